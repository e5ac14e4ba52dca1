//! Noise-aware template matching.
//!
//! One template per clip: a square patch of side ODR diameter, cut from the
//! sharpest frame (lowest flow variance) of the smoothest stretch of the
//! trajectory. Every clip frame is matched against it with a masked
//! mean-absolute RGB difference, skipping specular pixels on both sides, and
//! a fixed-size crop centered on the matched ODR is emitted.
//!
//! Matching is exact exhaustive search over the window, accelerated without
//! changing results: candidates are visited in tie-break order, so any
//! candidate whose lower bound already reaches the incumbent score can be
//! skipped. Bounds come from tile sums (successive elimination, coarse to
//! fine) and from partial row sums.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::DetectionTimeline;
use crate::error::{Error, Result};
use crate::flow::{compute_flow, flow_variance, FlowParams};
use crate::stl::{ClipSegment, Trajectory};
use crate::video_io::{to_grayscale, Frame, VideoSequence};

/// Candidates keeping fewer unmasked pixels than this fraction are ignored.
pub const MIN_VALID_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    Replicate,
    /// Fill with black.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Search around the previous frame's match.
    #[default]
    Chained,
    /// Search around each frame's own detection.
    PerFrameBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NatmParams {
    pub specular_threshold: u8,
    pub filter_kernel: usize,
    pub masking: bool,
    /// Template side = round(diameter * margin).
    pub margin: f64,
    /// Search radius in pixels; `None` uses the ODR diameter.
    pub search_radius: Option<usize>,
    pub crop_size: usize,
    pub pad: PadPolicy,
    pub search_mode: SearchMode,
    pub window: usize,
    /// Refine matches below one pixel and resample crops bilinearly; when
    /// off, crops are cut at whole-pixel offsets.
    pub subpixel: bool,
}

impl Default for NatmParams {
    fn default() -> Self {
        Self {
            specular_threshold: 220,
            filter_kernel: 5,
            masking: true,
            margin: 1.0,
            search_radius: None,
            crop_size: 640,
            pad: PadPolicy::Replicate,
            search_mode: SearchMode::Chained,
            window: 15,
            subpixel: true,
        }
    }
}

impl NatmParams {
    pub fn validate(&self) -> Result<()> {
        if self.filter_kernel == 0 || self.filter_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter_kernel must be odd and >= 1, got {}",
                self.filter_kernel
            )));
        }
        if !(self.margin.is_finite() && self.margin > 0.0 && self.margin <= 4.0) {
            return Err(Error::Config(format!(
                "margin must be in (0, 4], got {}",
                self.margin
            )));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be > 0".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be > 0".into()));
        }
        Ok(())
    }

    pub fn mask_policy(&self) -> MaskPolicy {
        MaskPolicy {
            enabled: self.masking,
            threshold: self.specular_threshold,
            filter_kernel: self.filter_kernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskPolicy {
    pub enabled: bool,
    pub threshold: u8,
    pub filter_kernel: usize,
}

impl MaskPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            threshold: 220,
            filter_kernel: 5,
        }
    }
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 220,
            filter_kernel: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    /// `side x side` RGB.
    pub patch: Vec<u8>,
    pub side: usize,
    pub source_frame: usize,
    pub anchor: (usize, usize),
    /// Detected ODR center relative to the anchor; `side / 2` up to the
    /// anchor's rounding and clamping.
    pub odr_offset: (f64, f64),
}

impl Template {
    /// Template whose ODR center is the patch center.
    pub fn centered(
        patch: Vec<u8>,
        side: usize,
        source_frame: usize,
        anchor: (usize, usize),
    ) -> Self {
        let half = side as f64 / 2.0;
        Self {
            patch,
            side,
            source_frame,
            anchor,
            odr_offset: (half, half),
        }
    }

    #[inline]
    fn px(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.side + x) * 3;
        &self.patch[o..o + 3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecularMask {
    pub width: usize,
    pub height: usize,
    /// Row-major; true = excluded.
    pub bits: Vec<bool>,
    pub threshold: u8,
    pub filter_kernel: usize,
}

impl SpecularMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub frame_index: usize,
    /// Top-left of the matched patch.
    pub position: (usize, usize),
    /// Matched ODR center: `position + template.odr_offset`.
    pub center: (f64, f64),
    pub score: f64,
    pub valid_fraction: f64,
    /// No candidate kept enough unmasked pixels; `position` is the search
    /// center.
    pub flagged: bool,
}

/// Interval of `window` frames inside the clip with the smallest summed
/// trajectory gradient; ties go to the earliest. Undefined gradients count
/// as zero.
pub fn select_smooth_window(
    traj: &Trajectory,
    clip: &ClipSegment,
    window: usize,
) -> RangeInclusive<usize> {
    let window = window.clamp(1, clip.len());
    let g = |t: usize| traj.gradient.get(t).copied().flatten().unwrap_or(0.0);
    let mut best: Option<(f64, usize)> = None;
    for start in clip.start_frame..=clip.end_frame + 1 - window {
        let sum: f64 = (start..start + window).map(g).sum();
        if best.is_none_or(|(b, _)| sum < b) {
            best = Some((sum, start));
        }
    }
    let start = best.map(|b| b.1).unwrap_or(clip.start_frame);
    start..=start + window - 1
}

/// Sharpness score (flow var_mag) per frame of `interval`: each frame takes
/// its incoming pair, the first frame its outgoing pair.
pub fn template_frame_scores(
    seq: &VideoSequence,
    interval: RangeInclusive<usize>,
    params: &FlowParams,
) -> Result<Vec<(usize, f64)>> {
    let (start, end) = (*interval.start(), *interval.end());
    if end >= seq.len() || start > end {
        return Err(Error::Range(format!(
            "interval {start}..={end} outside sequence of {} frames",
            seq.len()
        )));
    }
    if start == end {
        return Ok(vec![(start, 0.0)]);
    }
    let grays: Vec<_> = seq.frames()[start..=end]
        .par_iter()
        .map(to_grayscale)
        .collect();
    let pair_var: Vec<f64> = (0..grays.len() - 1)
        .into_par_iter()
        .map(|i| {
            compute_flow(
                &grays[i],
                &grays[i + 1],
                params.block_size,
                params.search_radius,
            )
            .map(|f| flow_variance(&f).var_mag)
        })
        .collect::<Result<_>>()?;
    Ok((start..=end)
        .enumerate()
        .map(|(i, t)| (t, pair_var[i.max(1) - 1]))
        .collect())
}

/// Frame with the lowest flow variance in `interval`; ties go to the earliest.
pub fn select_template_frame(
    seq: &VideoSequence,
    interval: RangeInclusive<usize>,
    params: &FlowParams,
) -> Result<usize> {
    let scores = template_frame_scores(seq, interval, params)?;
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 < best.1 {
            best = s;
        }
    }
    Ok(best.0)
}

/// Top-left of a `side` square centered on `center`, clamped to the frame.
pub fn centered_anchor(
    center: (f64, f64),
    side: usize,
    width: usize,
    height: usize,
) -> (usize, usize) {
    let place = |c: f64, limit: usize| {
        let a = (c - side as f64 / 2.0).round();
        a.clamp(0.0, (limit - side) as f64) as usize
    };
    (place(center.0, width), place(center.1, height))
}

pub fn template_side(diameter: usize, margin: f64) -> usize {
    ((diameter as f64 * margin).round() as usize).max(1)
}

pub fn extract_template(
    seq: &VideoSequence,
    frame: usize,
    timeline: &DetectionTimeline,
    side: usize,
) -> Result<Template> {
    let f = seq
        .frames()
        .get(frame)
        .ok_or_else(|| Error::Range(format!("frame {frame} outside sequence of {}", seq.len())))?;
    let (w, h) = (f.width(), f.height());
    if side == 0 {
        return Err(Error::Config("template side must be > 0".into()));
    }
    if side > w.min(h) {
        return Err(Error::TemplateTooLarge {
            side,
            limit: w.min(h),
        });
    }
    let bbox = timeline
        .get(frame)
        .ok_or_else(|| Error::Validation(format!("frame {frame} has no detection")))?;
    let c = bbox.center();
    let anchor = centered_anchor(c, side, w, h);
    Ok(Template {
        patch: f.crop_replicate(anchor.0 as i64, anchor.1 as i64, side, side),
        side,
        source_frame: frame,
        anchor,
        odr_offset: (c.0 - anchor.0 as f64, c.1 - anchor.1 as f64),
    })
}

/// Raw bits `B > thr && G > thr` over `rect` expanded by the kernel radius,
/// mean-filtered (windows clipped to the `bw x bh` bounds) and
/// re-thresholded at one half.
fn specular_bits(
    pixel: impl Fn(usize, usize) -> [u8; 3],
    bw: usize,
    bh: usize,
    rect: (usize, usize, usize, usize),
    threshold: u8,
    kernel: usize,
) -> Vec<bool> {
    let (rx, ry, rw, rh) = rect;
    let k = kernel / 2;
    let ex0 = rx.saturating_sub(k);
    let ey0 = ry.saturating_sub(k);
    let ex1 = (rx + rw + k).min(bw);
    let ey1 = (ry + rh + k).min(bh);
    let (ew, eh) = (ex1 - ex0, ey1 - ey0);
    // integral of raw bits over the expanded rect
    let mut integ = vec![0u32; (ew + 1) * (eh + 1)];
    for y in 0..eh {
        let mut run = 0u32;
        for x in 0..ew {
            let p = pixel(ex0 + x, ey0 + y);
            run += (p[2] > threshold && p[1] > threshold) as u32;
            integ[(y + 1) * (ew + 1) + x + 1] = integ[y * (ew + 1) + x + 1] + run;
        }
    }
    let mut bits = vec![false; rw * rh];
    for y in 0..rh {
        let gy = ry + y;
        let y0 = gy.saturating_sub(k) - ey0;
        let y1 = (gy + k + 1).min(bh) - ey0;
        for x in 0..rw {
            let gx = rx + x;
            let x0 = gx.saturating_sub(k) - ex0;
            let x1 = (gx + k + 1).min(bw) - ex0;
            let s = integ[y1 * (ew + 1) + x1] + integ[y0 * (ew + 1) + x0]
                - integ[y0 * (ew + 1) + x1]
                - integ[y1 * (ew + 1) + x0];
            let n = ((x1 - x0) * (y1 - y0)) as u32;
            bits[y * rw + x] = 2 * s >= n;
        }
    }
    bits
}

pub fn build_specular_mask(region: &Frame, threshold: u8, filter_kernel: usize) -> SpecularMask {
    let (w, h) = (region.width(), region.height());
    let kernel = filter_kernel.max(1) | 1;
    SpecularMask {
        width: w,
        height: h,
        bits: specular_bits(
            |x, y| region.get(x, y),
            w,
            h,
            (0, 0, w, h),
            threshold,
            kernel,
        ),
        threshold,
        filter_kernel: kernel,
    }
}

/// Template-side mask, computed on the patch alone.
pub fn template_mask(tmpl: &Template, policy: &MaskPolicy) -> Option<SpecularMask> {
    if !policy.enabled {
        return None;
    }
    let f = Frame::new(0, tmpl.side, tmpl.side, tmpl.patch.clone()).expect("square patch");
    Some(build_specular_mask(
        &f,
        policy.threshold,
        policy.filter_kernel,
    ))
}

/// Search offsets within `radius`, in tie-break order: smallest squared
/// displacement, then row-major.
fn search_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut offs: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
        .collect();
    offs.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    offs
}

/// One tile level of template sums for successive elimination.
struct TileLevel {
    tile: usize,
    n: usize,
    /// Per tile: usable (no masked template pixel) and channel sums.
    tiles: Vec<(bool, [i64; 3])>,
}

/// Precomputed, frame-independent matching state for one template.
pub struct Matcher {
    tmpl: Template,
    policy: MaskPolicy,
    tmask: Option<SpecularMask>,
    /// Unmasked template pixels.
    cnt_t: u64,
    levels: Vec<TileLevel>,
    offsets: Vec<(i64, i64)>,
    radius: usize,
    refine: bool,
}

/// Exact running best: `sum / (3 * cnt)` compared by cross-multiplication.
#[derive(Clone, Copy)]
struct Best {
    sum: u64,
    cnt: u64,
    pos: (usize, usize),
}

impl Matcher {
    pub fn new(tmpl: Template, policy: MaskPolicy, radius: usize) -> Self {
        let tmask = template_mask(&tmpl, &policy);
        let s = tmpl.side;
        let masked = |x: usize, y: usize| tmask.as_ref().is_some_and(|m| m.get(x, y));
        let cnt_t = (s * s) as u64 - tmask.as_ref().map_or(0, |m| m.count() as u64);
        let levels = [32usize, 16, 8]
            .into_iter()
            .filter(|&t| t * 2 <= s)
            .map(|tile| {
                let n = s / tile;
                let mut tiles = Vec::with_capacity(n * n);
                for ty in 0..n {
                    for tx in 0..n {
                        let mut ok = true;
                        let mut sums = [0i64; 3];
                        for y in ty * tile..(ty + 1) * tile {
                            for x in tx * tile..(tx + 1) * tile {
                                ok &= !masked(x, y);
                                let p = tmpl.px(x, y);
                                for c in 0..3 {
                                    sums[c] += p[c] as i64;
                                }
                            }
                        }
                        tiles.push((ok, sums));
                    }
                }
                TileLevel { tile, n, tiles }
            })
            .collect();
        Self {
            tmpl,
            policy,
            tmask,
            cnt_t,
            levels,
            offsets: search_offsets(radius as i64),
            radius,
            refine: false,
        }
    }

    /// Refine `center` to sub-pixel precision from the scores of the four
    /// neighbours of the best integer match. `position` stays integer.
    pub fn with_refinement(mut self, on: bool) -> Self {
        self.refine = on;
        self
    }

    pub fn template(&self) -> &Template {
        &self.tmpl
    }

    pub fn template_mask(&self) -> Option<&SpecularMask> {
        self.tmask.as_ref()
    }

    /// Best match for `frame` around the top-left `center`.
    pub fn find(&self, frame: &Frame, center: (usize, usize)) -> Result<MatchResult> {
        let s = self.tmpl.side;
        let (fw, fh) = (frame.width(), frame.height());
        if s > fw || s > fh {
            return Err(Error::TemplateTooLarge {
                side: s,
                limit: fw.min(fh),
            });
        }
        let max_x = fw - s;
        let max_y = fh - s;
        let center = (center.0.min(max_x), center.1.min(max_y));
        let r = self.radius;
        // region covering every candidate patch plus the refinement ring
        let rx0 = center.0.saturating_sub(r + 1);
        let ry0 = center.1.saturating_sub(r + 1);
        let rx1 = (center.0 + r + 1).min(max_x) + s;
        let ry1 = (center.1 + r + 1).min(max_y) + s;
        let (rw, rh) = (rx1 - rx0, ry1 - ry0);

        let fmask = self.policy.enabled.then(|| {
            specular_bits(
                |x, y| frame.get(x, y),
                fw,
                fh,
                (rx0, ry0, rw, rh),
                self.policy.threshold,
                self.policy.filter_kernel,
            )
        });

        // integrals over the region: RGB and candidate-side mask
        let iw = rw + 1;
        let mut integ = vec![[0i64; 4]; iw * (rh + 1)];
        for y in 0..rh {
            let row = frame.row(ry0 + y);
            let mut run = [0i64; 4];
            for x in 0..rw {
                let o = (rx0 + x) * 3;
                run[0] += row[o] as i64;
                run[1] += row[o + 1] as i64;
                run[2] += row[o + 2] as i64;
                run[3] += fmask.as_ref().is_some_and(|m| m[y * rw + x]) as i64;
                let up = integ[y * iw + x + 1];
                integ[(y + 1) * iw + x + 1] = [
                    up[0] + run[0],
                    up[1] + run[1],
                    up[2] + run[2],
                    up[3] + run[3],
                ];
            }
        }
        let rect_sum = |x: usize, y: usize, w: usize, h: usize| -> [i64; 4] {
            let a = integ[y * iw + x];
            let b = integ[y * iw + x + w];
            let c = integ[(y + h) * iw + x];
            let d = integ[(y + h) * iw + x + w];
            [
                d[0] - b[0] - c[0] + a[0],
                d[1] - b[1] - c[1] + a[1],
                d[2] - b[2] - c[2] + a[2],
                d[3] - b[3] - c[3] + a[3],
            ]
        };

        // masked sum and count at one candidate; `None` once it cannot beat `bound`
        let eval = |px: usize, py: usize, bound: Option<Best>| -> Option<(u64, u64)> {
            let (lx, ly) = (px - rx0, py - ry0);
            let mut sum = 0u64;
            let mut cnt = 0u64;
            for y in 0..s {
                let frow = &frame.row(py + y)[px * 3..(px + s) * 3];
                let trow = &self.tmpl.patch[y * s * 3..(y + 1) * s * 3];
                match (&self.tmask, &fmask) {
                    (None, None) => {
                        sum += frow
                            .iter()
                            .zip(trow)
                            .map(|(&a, &b)| a.abs_diff(b) as u64)
                            .sum::<u64>();
                        cnt += s as u64;
                    }
                    _ => {
                        for x in 0..s {
                            let tm = self.tmask.as_ref().is_some_and(|m| m.bits[y * s + x]);
                            let fm = fmask.as_ref().is_some_and(|m| m[(ly + y) * rw + lx + x]);
                            if tm || fm {
                                continue;
                            }
                            let o = x * 3;
                            sum += frow[o].abs_diff(trow[o]) as u64
                                + frow[o + 1].abs_diff(trow[o + 1]) as u64
                                + frow[o + 2].abs_diff(trow[o + 2]) as u64;
                            cnt += 1;
                        }
                    }
                }
                if let Some(b) = bound {
                    if sum * b.cnt >= b.sum * self.cnt_t {
                        return None;
                    }
                }
            }
            Some((sum, cnt))
        };

        let min_cnt = (MIN_VALID_FRACTION * (s * s) as f64).ceil() as u64;
        let mut best: Option<Best> = None;
        for &(dx, dy) in &self.offsets {
            let px = center.0 as i64 + dx;
            let py = center.1 as i64 + dy;
            if px < 0 || py < 0 || px as usize > max_x || py as usize > max_y {
                continue;
            }
            let (px, py) = (px as usize, py as usize);
            let (lx, ly) = (px - rx0, py - ry0);

            if let Some(b) = best {
                // score >= lb / (3 cnt_t) >= best  <=>  lb * b.cnt >= b.sum * cnt_t
                let pruned = self.levels.iter().any(|lvl| {
                    let mut lb = 0i64;
                    for ty in 0..lvl.n {
                        for tx in 0..lvl.n {
                            let (ok, ts) = lvl.tiles[ty * lvl.n + tx];
                            if !ok {
                                continue;
                            }
                            let cs = rect_sum(
                                lx + tx * lvl.tile,
                                ly + ty * lvl.tile,
                                lvl.tile,
                                lvl.tile,
                            );
                            if cs[3] != 0 {
                                continue;
                            }
                            lb += (ts[0] - cs[0]).abs()
                                + (ts[1] - cs[1]).abs()
                                + (ts[2] - cs[2]).abs();
                        }
                    }
                    lb as u64 * b.cnt >= b.sum * self.cnt_t
                });
                if pruned {
                    continue;
                }
            }

            let Some((sum, cnt)) = eval(px, py, best) else {
                continue;
            };
            if cnt < min_cnt || cnt == 0 {
                continue;
            }
            if best.is_none_or(|b| sum * b.cnt < b.sum * cnt) {
                best = Some(Best {
                    sum,
                    cnt,
                    pos: (px, py),
                });
                if sum == 0 {
                    break;
                }
            }
        }

        let off = self.tmpl.odr_offset;
        Ok(match best {
            Some(b) => {
                let (sx, sy) = if self.refine {
                    let score = |px: i64, py: i64| -> Option<f64> {
                        if px < rx0 as i64
                            || py < ry0 as i64
                            || px as usize > max_x
                            || py as usize > max_y
                        {
                            return None;
                        }
                        let (sum, cnt) = eval(px as usize, py as usize, None)?;
                        (cnt >= min_cnt).then(|| sum as f64 / (3 * cnt) as f64)
                    };
                    let s0 = b.sum as f64 / (3 * b.cnt) as f64;
                    let (px, py) = (b.pos.0 as i64, b.pos.1 as i64);
                    (
                        vline_peak(score(px - 1, py), s0, score(px + 1, py)),
                        vline_peak(score(px, py - 1), s0, score(px, py + 1)),
                    )
                } else {
                    (0.0, 0.0)
                };
                MatchResult {
                    frame_index: frame.index,
                    position: b.pos,
                    center: (b.pos.0 as f64 + sx + off.0, b.pos.1 as f64 + sy + off.1),
                    score: b.sum as f64 / (3 * b.cnt) as f64,
                    valid_fraction: b.cnt as f64 / (s * s) as f64,
                    flagged: false,
                }
            }
            None => {
                let (lx, ly) = (center.0 - rx0, center.1 - ry0);
                let masked = rect_sum(lx, ly, s, s)[3] as u64;
                let tm = (s * s) as u64 - self.cnt_t;
                let vf = ((s * s) as u64).saturating_sub(masked + tm) as f64 / (s * s) as f64;
                log::warn!(
                    "{}",
                    Error::UnreliableMatch {
                        frame: frame.index,
                        valid_fraction: vf
                    }
                );
                MatchResult {
                    frame_index: frame.index,
                    position: center,
                    center: (center.0 as f64 + off.0, center.1 as f64 + off.1),
                    score: f64::NAN,
                    valid_fraction: vf.max(0.0),
                    flagged: true,
                }
            }
        })
    }
}

/// Minimum of the symmetric V through three equally spaced samples
/// (equiangular line fit), as an offset in `[-0.5, 0.5]` from the middle one.
/// Suited to absolute-difference scores, whose valleys are V- rather than
/// parabola-shaped.
pub fn vline_peak(left: Option<f64>, mid: f64, right: Option<f64>) -> f64 {
    let (Some(a), Some(b)) = (left, right) else {
        return 0.0;
    };
    let rise = a.max(b) - mid;
    if !(rise > 0.0) {
        return 0.0;
    }
    ((a - b) / (2.0 * rise)).clamp(-0.5, 0.5)
}

/// Convenience wrapper over [`Matcher`] for a single frame.
pub fn masked_match(
    frame: &Frame,
    tmpl: &Template,
    policy: MaskPolicy,
    center: (usize, usize),
    radius: usize,
) -> Result<MatchResult> {
    Matcher::new(tmpl.clone(), policy, radius).find(frame, center)
}

/// Crop top-left for a crop of `crop` pixels centered on `center`.
pub fn crop_origin(center: (f64, f64), crop: usize) -> (i64, i64) {
    let half = crop as f64 / 2.0;
    (
        (center.0 - half).round() as i64,
        (center.1 - half).round() as i64,
    )
}

/// Crop top-left for `center`: exact with `subpixel`, otherwise rounded to
/// whole pixels as in [`crop_origin`].
pub fn crop_placement(center: (f64, f64), crop: usize, subpixel: bool) -> (f64, f64) {
    if subpixel {
        let half = crop as f64 / 2.0;
        (center.0 - half, center.1 - half)
    } else {
        let (x0, y0) = crop_origin(center, crop);
        (x0 as f64, y0 as f64)
    }
}

/// Square crop at a fractional top-left, bilinearly resampled with 8-bit
/// fixed-point weights. Whole-pixel origins give exactly [`crop_frame`].
pub fn crop_frame_at(frame: &Frame, x0: f64, y0: f64, size: usize, pad: PadPolicy) -> Frame {
    let (ix, iy) = (x0.floor(), y0.floor());
    let ax = ((x0 - ix) * 256.0).round() as u32;
    let ay = ((y0 - iy) * 256.0).round() as u32;
    // a fraction that rounds up to a whole pixel moves the integer origin
    let (ix, ax) = if ax == 256 { (ix + 1.0, 0) } else { (ix, ax) };
    let (iy, ay) = if ay == 256 { (iy + 1.0, 0) } else { (iy, ay) };
    if ax == 0 && ay == 0 {
        return crop_frame(frame, ix as i64, iy as i64, size, pad);
    }
    let src = crop_frame(frame, ix as i64, iy as i64, size + 1, pad);
    let sp = src.pixels();
    let s3 = (size + 1) * 3;
    let w = [
        (256 - ax) * (256 - ay),
        ax * (256 - ay),
        (256 - ax) * ay,
        ax * ay,
    ];
    let mut out = vec![0u8; size * size * 3];
    for (y, row) in out.chunks_exact_mut(size * 3).enumerate() {
        let r0 = &sp[y * s3..(y + 1) * s3];
        let r1 = &sp[(y + 1) * s3..(y + 2) * s3];
        for (i, o) in row.iter_mut().enumerate() {
            let v = w[0] * r0[i] as u32
                + w[1] * r0[i + 3] as u32
                + w[2] * r1[i] as u32
                + w[3] * r1[i + 3] as u32;
            *o = ((v + 32768) >> 16) as u8;
        }
    }
    Frame::new(frame.index, size, size, out).expect("crop size")
}

pub fn crop_frame(frame: &Frame, x0: i64, y0: i64, size: usize, pad: PadPolicy) -> Frame {
    let pixels = match pad {
        PadPolicy::Replicate => frame.crop_replicate(x0, y0, size, size),
        PadPolicy::Constant => {
            let mut out = vec![0u8; size * size * 3];
            let (w, h) = (frame.width() as i64, frame.height() as i64);
            for row in 0..size as i64 {
                let sy = y0 + row;
                if sy < 0 || sy >= h {
                    continue;
                }
                let lo = x0.max(0);
                let hi = (x0 + size as i64).min(w);
                if lo >= hi {
                    continue;
                }
                let src = &frame.row(sy as usize)[lo as usize * 3..hi as usize * 3];
                let d = (row as usize * size + (lo - x0) as usize) * 3;
                out[d..d + src.len()].copy_from_slice(src);
            }
            out
        }
    };
    Frame::new(frame.index, size, size, pixels).expect("crop size")
}

/// Matches every clip frame and emits the ODR-centered crops.
pub fn stabilize_clip(
    seq: &VideoSequence,
    clip: &ClipSegment,
    matcher: &Matcher,
    timeline: &DetectionTimeline,
    params: &NatmParams,
) -> Result<(VideoSequence, Vec<MatchResult>)> {
    if params.crop_size == 0 {
        return Err(Error::Config("crop_size must be > 0".into()));
    }
    if clip.end_frame >= seq.len() {
        return Err(Error::Range(format!(
            "clip {}..={} outside sequence of {} frames",
            clip.start_frame,
            clip.end_frame,
            seq.len()
        )));
    }
    let (w, h) = seq.dimensions();
    let side = matcher.template().side;
    let box_anchor = |t: usize| {
        timeline
            .get(t)
            .map(|b| centered_anchor(b.center(), side, w, h))
    };
    let frames = &seq.frames()[clip.start_frame..=clip.end_frame];
    let first = box_anchor(clip.start_frame).unwrap_or(matcher.template().anchor);
    let matches: Vec<MatchResult> = match params.search_mode {
        SearchMode::Chained => {
            let mut out = Vec::with_capacity(frames.len());
            let mut center = first;
            for f in frames {
                let m = matcher.find(f, center)?;
                center = m.position;
                out.push(m);
            }
            out
        }
        SearchMode::PerFrameBox => frames
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                // fall back to the nearest earlier detection
                let center = (0..=clip.start_frame + i)
                    .rev()
                    .take(i + 1)
                    .find_map(box_anchor)
                    .unwrap_or(first);
                matcher.find(f, center)
            })
            .collect::<Result<_>>()?,
    };
    let crops: Vec<Frame> = frames
        .par_iter()
        .zip(&matches)
        .map(|(f, m)| {
            let (x0, y0) = crop_placement(m.center, params.crop_size, params.subpixel);
            crop_frame_at(f, x0, y0, params.crop_size, params.pad)
        })
        .collect();
    let out = VideoSequence::new(
        crops,
        seq.fps(),
        format!("{}#{}-{}", seq.source_id, clip.start_frame, clip.end_frame),
    )?;
    Ok((out, matches))
}

pub fn matches_csv(matches: &[MatchResult]) -> String {
    let mut out = String::from("frame,x,y,cx,cy,score,valid_fraction,flagged\n");
    for m in matches {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.frame_index,
            m.position.0,
            m.position.1,
            m.center.0,
            m.center.1,
            m.score,
            m.valid_fraction,
            m.flagged as u8
        );
    }
    out
}

pub fn write_matches_csv(matches: &[MatchResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, matches_csv(matches))
        .map_err(|e| Error::Write(format!("{}: {e}", path.display())))
}

/// Everything produced while stabilizing one clip.
#[derive(Debug, Clone)]
pub struct ClipStabilization {
    pub clip: ClipSegment,
    pub smooth_window: RangeInclusive<usize>,
    pub frame_scores: Vec<(usize, f64)>,
    pub template: Template,
    pub sequence: VideoSequence,
    pub matches: Vec<MatchResult>,
}

/// Full per-clip stage: smooth window, sharpest frame, template, matching,
/// cropping.
pub fn stabilize(
    seq: &VideoSequence,
    clip: &ClipSegment,
    traj: &Trajectory,
    timeline: &DetectionTimeline,
    diameter: usize,
    params: &NatmParams,
    flow: &FlowParams,
) -> Result<ClipStabilization> {
    params.validate()?;
    let smooth_window = select_smooth_window(traj, clip, params.window);
    let frame_scores = template_frame_scores(seq, smooth_window.clone(), flow)?;
    let mut best = frame_scores[0];
    for &s in &frame_scores[1..] {
        if s.1 < best.1 {
            best = s;
        }
    }
    let side = template_side(diameter, params.margin);
    let template = extract_template(seq, best.0, timeline, side)?;
    let radius = params.search_radius.unwrap_or(diameter);
    let matcher = Matcher::new(template.clone(), params.mask_policy(), radius)
        .with_refinement(params.subpixel);
    let (sequence, matches) = stabilize_clip(seq, clip, &matcher, timeline, params)?;
    Ok(ClipStabilization {
        clip: *clip,
        smooth_window,
        frame_scores,
        template,
        sequence,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BoundingBox;
    use crate::synth::{generate, SynthSpec};
    use proptest::prelude::*;

    fn noise_frame(index: usize, w: usize, h: usize, seed: u64) -> Frame {
        Frame::from_fn(index, w, h, |x, y| {
            let mut v =
                (x as u64 * 73_856_093) ^ (y as u64 * 19_349_663) ^ seed.wrapping_mul(83_492_791);
            v = v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let b = (v >> 24) as u8;
            [b, b.wrapping_mul(3) / 2, b / 2]
        })
    }

    fn shifted(f: &Frame, dx: i64, dy: i64, index: usize) -> Frame {
        Frame::from_fn(index, f.width(), f.height(), |x, y| {
            let sx = (x as i64 - dx).clamp(0, f.width() as i64 - 1) as usize;
            let sy = (y as i64 - dy).clamp(0, f.height() as i64 - 1) as usize;
            f.get(sx, sy)
        })
    }

    fn tmpl_from(f: &Frame, anchor: (usize, usize), side: usize) -> Template {
        let patch = f.crop_replicate(anchor.0 as i64, anchor.1 as i64, side, side);
        Template::centered(patch, side, f.index, anchor)
    }

    /// Exhaustive oracle: every candidate scored in full, masks from the
    /// whole-frame mask, best by exact rational then tie order.
    fn brute_match(
        frame: &Frame,
        tmpl: &Template,
        policy: MaskPolicy,
        center: (usize, usize),
        radius: usize,
    ) -> Option<((usize, usize), u64, u64)> {
        let s = tmpl.side;
        let fmask = policy
            .enabled
            .then(|| build_specular_mask(frame, policy.threshold, policy.filter_kernel));
        let tmask = template_mask(tmpl, &policy);
        let max_x = frame.width() - s;
        let max_y = frame.height() - s;
        let center = (center.0.min(max_x), center.1.min(max_y));
        let mut cands = Vec::new();
        let r = radius as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (center.0 as i64 + dx, center.1 as i64 + dy);
                if px < 0 || py < 0 || px > max_x as i64 || py > max_y as i64 {
                    continue;
                }
                let (px, py) = (px as usize, py as usize);
                let (mut sum, mut cnt) = (0u64, 0u64);
                for y in 0..s {
                    for x in 0..s {
                        if tmask.as_ref().is_some_and(|m| m.get(x, y))
                            || fmask.as_ref().is_some_and(|m| m.get(px + x, py + y))
                        {
                            continue;
                        }
                        let a = frame.get(px + x, py + y);
                        let b = tmpl.px(x, y);
                        sum += (0..3).map(|c| a[c].abs_diff(b[c]) as u64).sum::<u64>();
                        cnt += 1;
                    }
                }
                if cnt * 4 >= (s * s) as u64 && cnt > 0 {
                    cands.push(((px, py), sum, cnt, dx * dx + dy * dy, dy, dx));
                }
            }
        }
        cands
            .into_iter()
            .min_by(|a, b| {
                (a.1 * b.2)
                    .cmp(&(b.1 * a.2))
                    .then((a.3, a.4, a.5).cmp(&(b.3, b.4, b.5)))
            })
            .map(|c| (c.0, c.1, c.2))
    }

    #[test]
    fn self_match_is_anchor_with_zero_score() {
        let f = noise_frame(0, 120, 100, 1);
        let t = tmpl_from(&f, (40, 30), 32);
        for policy in [MaskPolicy::default(), MaskPolicy::disabled()] {
            let m = masked_match(&f, &t, policy, (35, 33), 10).unwrap();
            assert_eq!(m.position, (40, 30));
            assert_eq!(m.score, 0.0);
            assert!(!m.flagged);
        }
    }

    #[test]
    fn translation_is_recovered() {
        let f = noise_frame(0, 160, 160, 2);
        let t = tmpl_from(&f, (60, 60), 40);
        let g = shifted(&f, 5, -3, 1);
        let m = masked_match(&g, &t, MaskPolicy::default(), (60, 60), 6).unwrap();
        assert_eq!(m.position, (65, 57));
        assert_eq!(m.score, 0.0);
        assert_eq!(m.center, (85.0, 77.0));
    }

    fn paste_spot(f: &mut Frame, x0: usize, y0: usize, size: usize) {
        for y in y0..(y0 + size).min(f.height()) {
            for x in x0..(x0 + size).min(f.width()) {
                f.put(x, y, [255, 255, 255]);
            }
        }
    }

    #[test]
    fn specular_spot_is_masked() {
        let spec = SynthSpec::basic(400, 400, 1, 40.0, 5);
        let f = generate(&spec).unwrap().sequence.frames()[0].clone();
        let t = tmpl_from(&f, (160, 160), 80);
        let mut g = shifted(&f, 4, 2, 1);
        paste_spot(&mut g, 190, 185, 20);
        let m = masked_match(&g, &t, MaskPolicy::default(), (160, 160), 12).unwrap();
        assert!(m.position.0.abs_diff(164) <= 1 && m.position.1.abs_diff(162) <= 1);
        assert!(m.valid_fraction < 1.0);
    }

    #[test]
    fn all_masked_is_flagged() {
        let f = Frame::filled(0, 60, 60, [255, 255, 255]);
        let t = tmpl_from(&noise_frame(0, 60, 60, 3), (10, 10), 20);
        let m = masked_match(&f, &t, MaskPolicy::default(), (12, 14), 5).unwrap();
        assert!(m.flagged);
        assert_eq!(m.position, (12, 14));
        assert_eq!(m.valid_fraction, 0.0);
    }

    #[test]
    fn mask_rules() {
        let f = Frame::filled(0, 30, 30, [50, 100, 100]);
        assert_eq!(build_specular_mask(&f, 220, 5).count(), 0);
        let red = Frame::filled(0, 30, 30, [255, 0, 0]);
        assert_eq!(build_specular_mask(&red, 220, 5).count(), 0);
        let mut g = Frame::filled(0, 60, 60, [40, 20, 10]);
        paste_spot(&mut g, 20, 20, 20);
        let m = build_specular_mask(&g, 220, 5);
        for y in 0..60 {
            for x in 0..60 {
                // boundary band of kernel/2 may go either way
                let inside = (22..38).contains(&x) && (22..38).contains(&y);
                let far = !(18..42).contains(&x) || !(18..42).contains(&y);
                if inside {
                    assert!(m.get(x, y), "({x},{y})");
                } else if far {
                    assert!(!m.get(x, y), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn template_geometry() {
        let f = Frame::filled(0, 1800, 1800, [1, 2, 3]);
        let seq = VideoSequence::new(vec![f], 30.0, "t").unwrap();
        let mut tl = DetectionTimeline::empty(1);
        tl.insert(
            0,
            BoundingBox {
                x: 220.0,
                y: 220.0,
                w: 160.0,
                h: 160.0,
                score: 1.0,
            },
        );
        let t = extract_template(&seq, 0, &tl, 160).unwrap();
        assert_eq!(
            (t.anchor, t.side, t.patch.len()),
            ((220, 220), 160, 160 * 160 * 3)
        );
        let mut tl = DetectionTimeline::empty(1);
        tl.insert(
            0,
            BoundingBox {
                x: 0.0,
                y: 0.0,
                w: 20.0,
                h: 20.0,
                score: 1.0,
            },
        );
        assert_eq!(extract_template(&seq, 0, &tl, 160).unwrap().anchor, (0, 0));
        assert!(matches!(
            extract_template(&seq, 0, &tl, 2000),
            Err(Error::TemplateTooLarge {
                side: 2000,
                limit: 1800
            })
        ));
    }

    fn traj_with(grad: Vec<Option<f64>>) -> Trajectory {
        Trajectory {
            points: vec![Some((0.0, 0.0)); grad.len()],
            gradient: grad,
            variance_series: vec![],
            window: 15,
        }
    }

    #[test]
    fn smooth_window_examples() {
        let n = 100;
        let clip = ClipSegment::new(0, n - 1, 30.0);
        let flat = traj_with(vec![Some(0.0); n]);
        assert_eq!(select_smooth_window(&flat, &clip, 15), 0..=14);
        let g = (0..n)
            .map(|t| Some(if (40..=54).contains(&t) { 0.0 } else { 1.0 }))
            .collect();
        assert_eq!(select_smooth_window(&traj_with(g), &clip, 15), 40..=54);
        let short = ClipSegment::new(5, 14, 30.0);
        assert_eq!(select_smooth_window(&flat, &short, 15), 5..=14);
    }

    #[test]
    fn template_frame_examples() {
        let base = noise_frame(0, 96, 96, 9);
        let frames: Vec<Frame> = (0..4)
            .map(|i| Frame::new(i, 96, 96, base.pixels().to_vec()).unwrap())
            .collect();
        let seq = VideoSequence::new(frames, 30.0, "s").unwrap();
        let p = FlowParams::default();
        assert_eq!(select_template_frame(&seq, 0..=3, &p).unwrap(), 0);
        assert_eq!(select_template_frame(&seq, 2..=2, &p).unwrap(), 2);
    }

    #[test]
    fn blurred_frames_are_screened_out() {
        // blurred captures come with shake; sensor noise lands after blur
        for seed in 0..4 {
            let mut spec = SynthSpec::basic(480, 480, 12, 40.0, 21 + seed);
            spec.blur.frames = (0..6).collect();
            spec.blur.sigma = 2.5;
            spec.blur.shake = 3.0;
            spec.noise.sigma = 3.0;
            let seq = generate(&spec).unwrap().sequence;
            let scores = template_frame_scores(&seq, 0..=11, &FlowParams::default()).unwrap();
            let pick = select_template_frame(&seq, 0..=11, &FlowParams::default()).unwrap();
            // frame 6 is sharp but its incoming pair straddles the blur edge
            assert!((7..=11).contains(&pick), "seed {seed}: {scores:?}");
        }
    }

    #[test]
    fn crop_padding() {
        let f = Frame::from_fn(0, 50, 40, |x, y| [x as u8, y as u8, 7]);
        let c = crop_frame(&f, -5, 30, 20, PadPolicy::Replicate);
        assert_eq!((c.width(), c.height()), (20, 20));
        assert_eq!(c.get(0, 0), [0, 30, 7]);
        assert_eq!(c.get(19, 19), [14, 39, 7]);
        let k = crop_frame(&f, -5, 30, 20, PadPolicy::Constant);
        assert_eq!(k.get(0, 0), [0, 0, 0]);
        assert_eq!(k.get(5, 0), [0, 30, 7]);
        assert_eq!(k.get(6, 19), [0, 0, 0]);
        assert_eq!(crop_origin((300.0, 300.0), 640), (-20, -20));
    }

    #[test]
    fn stabilize_static_clip() {
        let spec = SynthSpec::basic(400, 400, 5, 40.0, 4);
        let seq = generate(&spec).unwrap().sequence;
        let mut tl = DetectionTimeline::empty(5);
        for t in 0..5 {
            tl.insert(
                t,
                BoundingBox {
                    x: 160.0,
                    y: 160.0,
                    w: 80.0,
                    h: 80.0,
                    score: 1.0,
                },
            );
        }
        let traj = crate::stl::build_trajectory(&tl, 15);
        let clip = ClipSegment::new(0, 4, 30.0);
        let params = NatmParams {
            crop_size: 100,
            ..NatmParams::default()
        };
        let out = stabilize(&seq, &clip, &traj, &tl, 80, &params, &FlowParams::default()).unwrap();
        assert_eq!(out.sequence.len(), 5);
        assert_eq!(out.sequence.dimensions(), (100, 100));
        assert!(out
            .matches
            .iter()
            .all(|m| m.position == (160, 160) && m.score == 0.0));
        let csv = matches_csv(&out.matches);
        assert!(csv.starts_with("frame,x,y,cx,cy,score,valid_fraction,flagged\n0,160,160,"));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 8);
    }

    fn spotted(seed: u64, w: usize, h: usize, spots: &[(usize, usize, usize)]) -> Frame {
        let mut f = noise_frame(0, w, h, seed);
        for &(x, y, s) in spots {
            paste_spot(&mut f, x, y, s);
        }
        f
    }

    #[test]
    fn vline_peak_edge_cases() {
        assert_eq!(vline_peak(None, 1.0, Some(2.0)), 0.0);
        assert_eq!(vline_peak(Some(3.0), 1.0, None), 0.0);
        assert_eq!(vline_peak(Some(1.0), 1.0, Some(1.0)), 0.0);
        assert_eq!(vline_peak(Some(2.0), 1.0, Some(2.0)), 0.0);
        // right neighbour lower: minimum lies to the right
        assert!(vline_peak(Some(3.0), 1.0, Some(2.0)) > 0.0);
        assert_eq!(vline_peak(Some(5.0), 0.0, Some(0.0)), 0.5);
    }

    #[test]
    fn subpixel_crop_oracle() {
        let f = noise_frame(3, 30, 24, 9);
        // whole-pixel origins are plain crops
        assert_eq!(
            crop_frame_at(&f, 4.0, -3.0, 10, PadPolicy::Replicate),
            crop_frame(&f, 4, -3, 10, PadPolicy::Replicate)
        );
        assert_eq!(
            crop_frame_at(&f, 4.999, 2.0, 10, PadPolicy::Constant),
            crop_frame(&f, 5, 2, 10, PadPolicy::Constant)
        );
        // fractional origins: independent f64 bilinear reference
        for &(x0, y0) in &[(3.5, 2.25), (-1.75, 20.5), (10.1, 0.9)] {
            let c = crop_frame_at(&f, x0, y0, 12, PadPolicy::Replicate);
            let px = |x: i64, y: i64| f.get(x.clamp(0, 29) as usize, y.clamp(0, 23) as usize);
            for y in 0..12 {
                for x in 0..12 {
                    let (sx, sy) = (x0 + x as f64, y0 + y as f64);
                    let (ix, iy) = (sx.floor() as i64, sy.floor() as i64);
                    let (ax, ay) = (sx - sx.floor(), sy - sy.floor());
                    for ch in 0..3 {
                        let v = (1.0 - ax) * (1.0 - ay) * px(ix, iy)[ch] as f64
                            + ax * (1.0 - ay) * px(ix + 1, iy)[ch] as f64
                            + (1.0 - ax) * ay * px(ix, iy + 1)[ch] as f64
                            + ax * ay * px(ix + 1, iy + 1)[ch] as f64;
                        let got = c.get(x, y)[ch] as f64;
                        assert!(
                            (got - v).abs() <= 1.0,
                            "({x0},{y0}) px ({x},{y}) ch {ch}: {got} vs {v}"
                        );
                    }
                }
            }
        }
        assert_eq!(crop_placement((100.4, 50.6), 20, false), (90.0, 41.0));
        assert_eq!(
            crop_placement((100.4, 50.5), 20, true),
            (100.4 - 10.0, 40.5)
        );
    }

    #[test]
    fn refinement_tracks_synthetic_truth() {
        use crate::synth::{JitterKind, JitterSpec};
        let mut spec = SynthSpec::basic(400, 400, 24, 20.0, 11);
        spec.jitter = JitterSpec {
            kind: JitterKind::Sinusoid,
            amplitude: 5.0,
            period: 11.0,
            spike_frames: Vec::new(),
        };
        let video = generate(&spec).unwrap();
        let truth: Vec<(f64, f64)> = video.truth.iter().map(|r| (r.cx, r.cy)).collect();
        // detections from truth, so only matching is under test
        let mut tl = DetectionTimeline::empty(24);
        for (t, &(cx, cy)) in truth.iter().enumerate() {
            tl.insert(
                t,
                BoundingBox {
                    x: cx - 20.0,
                    y: cy - 20.0,
                    w: 40.0,
                    h: 40.0,
                    score: 1.0,
                },
            );
        }
        let traj = crate::stl::build_trajectory(&tl, 15);
        let clip = ClipSegment::new(0, 23, 30.0);
        let mean_err = |subpixel: bool| {
            let params = NatmParams {
                crop_size: 64,
                subpixel,
                ..NatmParams::default()
            };
            let out = stabilize(
                &video.sequence,
                &clip,
                &traj,
                &tl,
                40,
                &params,
                &FlowParams::default(),
            )
            .unwrap();
            // error relative to the template frame's own offset
            let t0 = out.template.source_frame;
            let m0 = out.matches[t0].center;
            let (ox, oy) = (truth[t0].0 - m0.0, truth[t0].1 - m0.1);
            out.matches
                .iter()
                .map(|m| {
                    (truth[m.frame_index].0 - m.center.0 - ox)
                        .hypot(truth[m.frame_index].1 - m.center.1 - oy)
                })
                .sum::<f64>()
                / out.matches.len() as f64
        };
        let (fine, coarse) = (mean_err(true), mean_err(false));
        assert!(fine < 0.15, "refined mean error {fine}");
        assert!(fine < coarse / 2.0, "refined {fine} vs integer {coarse}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn vline_peak_recovers_v_minimum(d in -0.5f64..=0.5, k in 0.1f64..50.0, c in 0.0f64..100.0) {
            let v = |x: f64| c + k * (x - d).abs();
            let est = vline_peak(Some(v(-1.0)), v(0.0), Some(v(1.0)));
            prop_assert!((est - d).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn accelerated_equals_brute_force(
            seed in 0u64..1000,
            side in 12usize..40,
            radius in 0usize..9,
            cx in 0usize..70,
            cy in 0usize..70,
            dx in -6i64..=6,
            dy in -6i64..=6,
            masking in any::<bool>(),
            spot in proptest::option::of((0usize..90, 0usize..90, 3usize..16)),
            tspot in proptest::option::of((0usize..30, 0usize..30, 3usize..12)),
            quant in 1u8..64,
        ) {
            // quantized noise makes ties common
            let base = noise_frame(0, 110, 100, seed);
            let q = |f: &Frame| Frame::from_fn(f.index, f.width(), f.height(), |x, y| {
                let p = f.get(x, y);
                [p[0] / quant * quant, p[1] / quant * quant, p[2] / quant * quant]
            });
            let src = q(&base);
            let anchor = (cx.min(110 - side), cy.min(100 - side));
            let mut t = tmpl_from(&src, anchor, side);
            if let Some((x, y, s)) = tspot {
                let mut tf = Frame::new(0, side, side, t.patch.clone()).unwrap();
                paste_spot(&mut tf, x.min(side - 1), y.min(side - 1), s.min(side - x.min(side - 1)).min(side - y.min(side - 1)));
                t.patch = tf.into_pixels();
            }
            let mut g = q(&shifted(&base, dx, dy, 1));
            if let Some((x, y, s)) = spot {
                paste_spot(&mut g, x.min(109), y.min(99), s.min(110 - x.min(109)).min(100 - y.min(99)));
            }
            let policy = if masking { MaskPolicy::default() } else { MaskPolicy::disabled() };
            let m = masked_match(&g, &t, policy, anchor, radius).unwrap();
            match brute_match(&g, &t, policy, anchor, radius) {
                Some((pos, sum, cnt)) => {
                    prop_assert!(!m.flagged);
                    prop_assert_eq!(m.position, pos);
                    prop_assert_eq!(m.score, sum as f64 / (3 * cnt) as f64);
                    prop_assert_eq!(m.valid_fraction, cnt as f64 / (side * side) as f64);
                }
                None => prop_assert!(m.flagged),
            }
        }

        #[test]
        fn self_match_any_mask(seed in 0u64..500, side in 8usize..30, ax in 0usize..40, ay in 0usize..40,
                               spots in proptest::collection::vec((0usize..70, 0usize..70, 2usize..8), 0..4)) {
            let f = spotted(seed, 70, 70, &spots);
            let anchor = (ax.min(70 - side), ay.min(70 - side));
            let t = tmpl_from(&f, anchor, side);
            for policy in [MaskPolicy::default(), MaskPolicy::disabled()] {
                let m = masked_match(&f, &t, policy, anchor, 4).unwrap();
                if !m.flagged {
                    prop_assert_eq!(m.position, anchor);
                    prop_assert_eq!(m.score, 0.0);
                }
            }
        }
    }
}
