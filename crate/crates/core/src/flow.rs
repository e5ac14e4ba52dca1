//! Block-matching optical flow and its variance statistics.
//!
//! Each non-overlapping block of the previous frame is matched against the
//! next frame by exhaustive sum-of-absolute-differences search. Candidates
//! are visited in tie-break order (smallest `|(u,v)|`, then `v`, then `u`)
//! and only a strictly smaller SAD replaces the incumbent, so pruning a
//! candidate whose partial sum already reaches the best is exact.
//!
//! This is integer-pixel block matching, not a differential flow method.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::{to_grayscale, GrayImage, VideoSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    pub block_size: usize,
    pub search_radius: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            block_size: 16,
            search_radius: 24,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 4 {
            return Err(Error::Config(format!(
                "flow block_size must be >= 4, got {}",
                self.block_size
            )));
        }
        if self.search_radius < 1 {
            return Err(Error::Config("flow search_radius must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid_w: usize,
    pub grid_h: usize,
    pub block_size: usize,
    pub search_radius: usize,
    /// Row-major per-block `(u, v)`.
    pub vectors: Vec<(i32, i32)>,
}

impl FlowField {
    pub fn get(&self, bx: usize, by: usize) -> (i32, i32) {
        self.vectors[by * self.grid_w + bx]
    }
}

/// Search offsets in tie-break order.
pub(crate) fn spiral_offsets(radius: i32) -> Vec<(i32, i32)> {
    let mut offs: Vec<(i32, i32)> = (-radius..=radius)
        .flat_map(|v| (-radius..=radius).map(move |u| (u, v)))
        .collect();
    offs.sort_by_key(|&(u, v)| (u * u + v * v, v, u));
    offs
}

#[inline]
fn row_sad(a: &[u8], b: &[u8]) -> u32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs())
        .sum()
}

/// Summed-area table with a zero first row and column.
struct Integral {
    stride: usize,
    data: Vec<u32>,
}

impl Integral {
    fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut data = vec![0u32; stride * (h + 1)];
        for y in 0..h {
            let mut run = 0u32;
            for (x, &v) in img.row(y).iter().enumerate() {
                run += v as u32;
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + run;
            }
        }
        Self { stride, data }
    }

    #[inline]
    fn sum(&self, x: usize, y: usize, w: usize, h: usize) -> u32 {
        let s = self.stride;
        self.data[(y + h) * s + x + w] + self.data[y * s + x]
            - self.data[y * s + x + w]
            - self.data[(y + h) * s + x]
    }
}

/// Exhaustive SAD search for one block. Candidates are skipped when a
/// lower bound (block-sum and quadrant-sum differences) already reaches the
/// best SAD; since only a strictly smaller SAD wins, this is exact.
#[allow(clippy::too_many_arguments)]
fn match_block(
    prev: &GrayImage,
    next: &GrayImage,
    prev_int: &Integral,
    next_int: &Integral,
    bx: usize,
    by: usize,
    bs: usize,
    offsets: &[(i32, i32)],
) -> (i32, i32) {
    let (w, h) = (next.width() as i64, next.height() as i64);
    let hb = bs / 2;
    let quads = [(0, 0), (hb, 0), (0, hb), (hb, hb)];
    let qsize = |i: usize| {
        let (qx, qy) = quads[i];
        (
            if qx == 0 { hb } else { bs - hb },
            if qy == 0 { hb } else { bs - hb },
        )
    };
    let block_sum = prev_int.sum(bx, by, bs, bs);
    let mut qsum = [0u32; 4];
    for (i, q) in qsum.iter_mut().enumerate() {
        let (qw, qh) = qsize(i);
        *q = prev_int.sum(bx + quads[i].0, by + quads[i].1, qw, qh);
    }
    let mut best = (0, 0);
    let mut best_sad = u32::MAX;
    for &(u, v) in offsets {
        let nx = bx as i64 + u as i64;
        let ny = by as i64 + v as i64;
        if nx < 0 || ny < 0 || nx + bs as i64 > w || ny + bs as i64 > h {
            continue;
        }
        let (nx, ny) = (nx as usize, ny as usize);
        if best_sad != u32::MAX {
            if next_int.sum(nx, ny, bs, bs).abs_diff(block_sum) >= best_sad {
                continue;
            }
            let mut lb = 0u32;
            for (i, &q) in qsum.iter().enumerate() {
                let (qw, qh) = qsize(i);
                lb += next_int
                    .sum(nx + quads[i].0, ny + quads[i].1, qw, qh)
                    .abs_diff(q);
            }
            if lb >= best_sad {
                continue;
            }
        }
        let mut sad = 0u32;
        for r in 0..bs {
            let a = &prev.row(by + r)[bx..bx + bs];
            let b = &next.row(ny + r)[nx..nx + bs];
            sad += row_sad(a, b);
            if sad >= best_sad {
                break;
            }
        }
        if sad < best_sad {
            best_sad = sad;
            best = (u, v);
            if sad == 0 {
                break;
            }
        }
    }
    best
}

pub fn compute_flow(
    prev: &GrayImage,
    next: &GrayImage,
    block_size: usize,
    search_radius: usize,
) -> Result<FlowField> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(Error::Size(format!(
            "flow inputs differ in size: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    FlowParams {
        block_size,
        search_radius,
    }
    .validate()?;
    let grid_w = prev.width() / block_size;
    let grid_h = prev.height() / block_size;
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::Size(format!(
            "image {}x{} smaller than one {block_size}px block",
            prev.width(),
            prev.height()
        )));
    }
    let offsets = spiral_offsets(search_radius as i32);
    let (prev_int, next_int) = rayon::join(|| Integral::new(prev), || Integral::new(next));
    let rows: Vec<Vec<(i32, i32)>> = (0..grid_h)
        .into_par_iter()
        .map(|gy| {
            (0..grid_w)
                .map(|gx| {
                    match_block(
                        prev,
                        next,
                        &prev_int,
                        &next_int,
                        gx * block_size,
                        gy * block_size,
                        block_size,
                        &offsets,
                    )
                })
                .collect()
        })
        .collect();
    Ok(FlowField {
        grid_w,
        grid_h,
        block_size,
        search_radius,
        vectors: rows.into_iter().flatten().collect(),
    })
}

/// Per-pair flow statistics; variances are population variances over blocks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowStats {
    pub var_u: f64,
    pub var_v: f64,
    pub var_mag: f64,
    pub mean_u: f64,
    pub mean_v: f64,
}

impl FlowStats {
    /// The scalar "variance of optical flow": `var_u + var_v`.
    pub fn flow_variance(&self) -> f64 {
        self.var_u + self.var_v
    }
}

/// Two-pass population statistics, shifted by the first sample so that a
/// constant series yields exactly zero variance.
fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let k = xs[0];
    let mean_d = xs.iter().map(|x| x - k).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - k - mean_d).powi(2)).sum::<f64>() / n;
    (k + mean_d, var)
}

pub fn flow_variance(field: &FlowField) -> FlowStats {
    let n = field.vectors.len();
    if n == 0 {
        return FlowStats::default();
    }
    let us: Vec<f64> = field.vectors.iter().map(|v| v.0 as f64).collect();
    let vs: Vec<f64> = field.vectors.iter().map(|v| v.1 as f64).collect();
    let mags: Vec<f64> = field
        .vectors
        .iter()
        .map(|v| (v.0 as f64).hypot(v.1 as f64))
        .collect();
    let (mean_u, var_u) = mean_and_variance(&us);
    let (mean_v, var_v) = mean_and_variance(&vs);
    let (_, var_mag) = mean_and_variance(&mags);
    FlowStats {
        var_u,
        var_v,
        var_mag,
        mean_u,
        mean_v,
    }
}

/// Flow statistics for every consecutive pair inside `range` (positions
/// into the sequence).
pub fn clip_flow_profile(
    seq: &VideoSequence,
    range: RangeInclusive<usize>,
    params: &FlowParams,
) -> Result<Vec<FlowStats>> {
    let (start, end) = (*range.start(), *range.end());
    if end >= seq.len() || start > end {
        return Err(Error::Range(format!(
            "frame range {start}..={end} outside sequence of {} frames",
            seq.len()
        )));
    }
    if end == start {
        return Err(Error::TooShort(
            "flow profile needs at least 2 frames".into(),
        ));
    }
    let frames = seq.frames();
    let mut prev = to_grayscale(&frames[start]);
    let mut out = Vec::with_capacity(end - start);
    for f in &frames[start + 1..=end] {
        let next = to_grayscale(f);
        let field = compute_flow(&prev, &next, params.block_size, params.search_radius)?;
        out.push(flow_variance(&field));
        prev = next;
    }
    Ok(out)
}

pub fn flow_profile_csv(profile: &[FlowStats]) -> String {
    let mut out = String::from("frame_pair,var_u,var_v,var_mag,mean_u,mean_v\n");
    for (i, s) in profile.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{}",
            s.var_u, s.var_v, s.var_mag, s.mean_u, s.mean_v
        );
    }
    out
}

pub fn write_flow_profile_csv(profile: &[FlowStats], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), flow_profile_csv(profile))
        .map_err(|e| Error::Write(format!("{}: {e}", path.as_ref().display())))
}
