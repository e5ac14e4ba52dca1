//! Per-frame optic disc region (ODR) detection.
//!
//! Two sources feed a [`DetectionTimeline`]: the built-in bright-disc
//! detector ([`detect_classical`]) and box files produced by an external
//! neural detector ([`import_detections`]). Boxes use continuous pixel
//! coordinates: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::{to_grayscale, Frame, GrayImage, VideoSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn mean_side(&self) -> f64 {
        (self.w + self.h) / 2.0
    }

    /// Intersects the box with `[0, width) x [0, height)`; `None` when
    /// nothing is left.
    pub fn clamped(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = (self.x + self.w).clamp(0.0, width as f64);
        let y1 = (self.y + self.h).clamp(0.0, height as f64);
        (x1 > x0 && y1 > y0).then_some(BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            score: self.score,
        })
    }
}

/// Per-frame detections for a whole video, indexed by frame position.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTimeline {
    entries: Vec<Option<BoundingBox>>,
}

impl DetectionTimeline {
    pub fn empty(n_frames: usize) -> Self {
        Self {
            entries: vec![None; n_frames],
        }
    }

    pub fn from_entries(entries: Vec<Option<BoundingBox>>) -> Self {
        Self { entries }
    }

    pub fn n_frames(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, frame: usize) -> Option<&BoundingBox> {
        self.entries.get(frame).and_then(Option::as_ref)
    }

    pub fn entries(&self) -> &[Option<BoundingBox>] {
        &self.entries
    }

    pub fn is_detected(&self, frame: usize) -> bool {
        self.get(frame).is_some()
    }

    pub fn detected_count(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    /// Keeps the higher-scoring box when a frame already has one.
    pub fn insert(&mut self, frame: usize, bbox: BoundingBox) {
        let slot = &mut self.entries[frame];
        match slot {
            Some(existing) if existing.score >= bbox.score => {}
            _ => *slot = Some(bbox),
        }
    }

    pub fn to_records(&self) -> Vec<DetectionRecord> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                b.map(|b| DetectionRecord {
                    frame_index: i,
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    score: b.score,
                })
            })
            .collect()
    }
}

/// One element of the detections JSON array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    /// Luma quantile used as the bright threshold; pixels strictly above it
    /// are candidates.
    pub intensity_quantile: f64,
    /// Minimum component area as a fraction of the frame.
    pub min_area_frac: f64,
    /// Frames darker than this on average are treated as blinks.
    pub min_mean_luma: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            intensity_quantile: 0.99,
            min_area_frac: 0.002,
            min_mean_luma: 20.0,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.intensity_quantile) {
            return Err(Error::Config(format!(
                "intensity_quantile must be in [0,1), got {}",
                self.intensity_quantile
            )));
        }
        if !(0.0..=1.0).contains(&self.min_area_frac) {
            return Err(Error::Config(format!(
                "min_area_frac must be in [0,1], got {}",
                self.min_area_frac
            )));
        }
        if !(0.0..=255.0).contains(&self.min_mean_luma) {
            return Err(Error::Config(format!(
                "min_mean_luma must be in [0,255], got {}",
                self.min_mean_luma
            )));
        }
        Ok(())
    }
}

/// Nearest-rank quantile of an 8-bit image.
fn luma_quantile(hist: &[u64; 256], total: u64, q: f64) -> u8 {
    let rank = (q * (total - 1) as f64).floor() as u64;
    let mut seen = 0u64;
    for (v, &c) in hist.iter().enumerate() {
        seen += c;
        if seen > rank {
            return v as u8;
        }
    }
    255
}

struct Component {
    area: usize,
    sum: u64,
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
}

/// Largest 8-connected component of `luma > thresh`; ties keep the one
/// found first in raster order.
fn largest_bright_component(gray: &GrayImage, thresh: u8) -> Option<Component> {
    let (w, h) = (gray.width(), gray.height());
    let data = gray.data();
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    let mut best: Option<Component> = None;
    for start in 0..w * h {
        if visited[start] || data[start] <= thresh {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut comp = Component {
            area: 0,
            sum: 0,
            min_x: usize::MAX,
            min_y: usize::MAX,
            max_x: 0,
            max_y: 0,
        };
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            comp.area += 1;
            comp.sum += data[p] as u64;
            comp.min_x = comp.min_x.min(x);
            comp.max_x = comp.max_x.max(x);
            comp.min_y = comp.min_y.min(y);
            comp.max_y = comp.max_y.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if !visited[q] && data[q] > thresh {
                        visited[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|b| comp.area > b.area) {
            best = Some(comp);
        }
    }
    best
}

/// Bright-disc detector on a precomputed luma image.
pub fn detect_in_gray(gray: &GrayImage, params: &DetectorParams) -> Option<BoundingBox> {
    let total = gray.data().len() as u64;
    if total == 0 {
        return None;
    }
    let mut hist = [0u64; 256];
    let mut sum = 0u64;
    for &v in gray.data() {
        hist[v as usize] += 1;
        sum += v as u64;
    }
    if (sum as f64 / total as f64) < params.min_mean_luma {
        return None;
    }
    let thresh = luma_quantile(&hist, total, params.intensity_quantile);
    let comp = largest_bright_component(gray, thresh)?;
    if (comp.area as f64) < params.min_area_frac * total as f64 {
        return None;
    }
    Some(BoundingBox {
        x: comp.min_x as f64,
        y: comp.min_y as f64,
        w: (comp.max_x - comp.min_x + 1) as f64,
        h: (comp.max_y - comp.min_y + 1) as f64,
        score: comp.sum as f64 / comp.area as f64 / 255.0,
    })
}

pub fn detect_classical(frame: &Frame, params: &DetectorParams) -> Option<BoundingBox> {
    detect_in_gray(&to_grayscale(frame), params)
}

/// Reads a detections JSON array into a timeline over `n_frames` frames of
/// size `width` x `height`. Records below `min_score` are ignored.
pub fn import_detections(
    path: impl AsRef<Path>,
    n_frames: usize,
    width: usize,
    height: usize,
    min_score: f64,
) -> Result<DetectionTimeline> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_detections(&bytes, n_frames, width, height, min_score).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_detections(
    json: &[u8],
    n_frames: usize,
    width: usize,
    height: usize,
    min_score: f64,
) -> Result<DetectionTimeline> {
    let records: Vec<DetectionRecord> =
        serde_json::from_slice(json).map_err(|e| Error::Parse(e.to_string()))?;
    let mut timeline = DetectionTimeline::empty(n_frames);
    for r in records {
        if r.frame_index >= n_frames {
            return Err(Error::Range(format!(
                "frame_index {} >= n_frames {n_frames}",
                r.frame_index
            )));
        }
        let finite = [r.x, r.y, r.w, r.h, r.score].iter().all(|v| v.is_finite());
        if !finite || r.w <= 0.0 || r.h <= 0.0 {
            return Err(Error::Validation(format!(
                "frame {}: box must have finite coordinates and positive size",
                r.frame_index
            )));
        }
        if !(0.0..=1.0).contains(&r.score) {
            return Err(Error::Validation(format!(
                "frame {}: score {} outside [0,1]",
                r.frame_index, r.score
            )));
        }
        if r.score < min_score {
            continue;
        }
        let raw = BoundingBox {
            x: r.x,
            y: r.y,
            w: r.w,
            h: r.h,
            score: r.score,
        };
        if let Some(b) = raw.clamped(width, height) {
            timeline.insert(r.frame_index, b);
        }
    }
    Ok(timeline)
}

pub fn write_detections(timeline: &DetectionTimeline, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec_pretty(&timeline.to_records())
        .map_err(|e| Error::Write(e.to_string()))?;
    std::fs::write(path.as_ref(), json)
        .map_err(|e| Error::Write(format!("{}: {e}", path.as_ref().display())))
}

/// Where detections come from.
#[derive(Debug, Clone)]
pub enum DetectorSource {
    Classical(DetectorParams),
    File {
        path: std::path::PathBuf,
        min_score: f64,
    },
}

pub fn run_detector(seq: &VideoSequence, source: &DetectorSource) -> Result<DetectionTimeline> {
    match source {
        DetectorSource::Classical(params) => {
            params.validate()?;
            let entries = seq
                .frames()
                .par_iter()
                .map(|f| detect_classical(f, params))
                .collect();
            Ok(DetectionTimeline::from_entries(entries))
        }
        DetectorSource::File { path, min_score } => {
            let (w, h) = seq.dimensions();
            import_detections(path, seq.len(), w, h, *min_score)
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// `round(median((w + h) / 2))` over detected frames.
pub fn estimate_odr_diameter(timeline: &DetectionTimeline) -> Result<usize> {
    let mut sides: Vec<f64> = timeline
        .entries
        .iter()
        .flatten()
        .map(|b| b.mean_side())
        .collect();
    if sides.is_empty() {
        return Err(Error::NoOdr);
    }
    Ok((median(&mut sides).round() as usize).max(1))
}
