//! Stability metrics and the run report.
//!
//! The scalar "flow variance" of a frame pair is `var_u + var_v`; per-clip
//! figures are arithmetic means over the clip's consecutive pairs. Overall
//! figures pool every pair of every stabilized clip.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{clip_flow_profile, write_flow_profile_csv, FlowParams, FlowStats};
use crate::natm::{crop_placement, MatchResult};
use crate::video_io::VideoSequence;

pub const REPORT_FILE: &str = "report.json";
pub const SCHEMA_VERSION: u32 = 1;

/// Means of a flow profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FlowSummary {
    pub pairs: usize,
    pub mean_var_u: f64,
    pub mean_var_v: f64,
    pub mean_var_mag: f64,
    pub mean_flow_variance: f64,
}

impl FlowSummary {
    pub fn of(profile: &[FlowStats]) -> Self {
        let n = profile.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: fn(&FlowStats) -> f64| profile.iter().map(f).sum::<f64>() / n as f64;
        Self {
            pairs: n,
            mean_var_u: mean(|s| s.var_u),
            mean_var_v: mean(|s| s.var_v),
            mean_var_mag: mean(|s| s.var_mag),
            mean_flow_variance: mean(|s| s.var_u + s.var_v),
        }
    }
}

/// Flow profile of a whole sequence plus its means.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub frames: usize,
    pub profile: Vec<FlowStats>,
    pub summary: FlowSummary,
}

pub fn score_sequence(seq: &VideoSequence, params: &FlowParams) -> Result<SequenceScore> {
    if seq.len() < 2 {
        return Err(Error::TooShort(format!(
            "scoring needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    let profile = clip_flow_profile(seq, 0..=seq.len() - 1, params)?;
    Ok(SequenceScore {
        frames: seq.len(),
        summary: FlowSummary::of(&profile),
        profile,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryError {
    pub frames: usize,
    pub mean: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    pub max: f64,
}

impl fmt::Display for TrajectoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean {:.3} px, p95 {:.3} px, max {:.3} px over {} frames",
            self.mean, self.p95, self.max, self.frames
        )
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Distance of the true disc center from the crop center in each output
/// frame. `truth[t]` is the true center of input frame `t`; `subpixel`
/// selects the crop placement used by the stabilizer.
pub fn trajectory_error(
    truth: &[(f64, f64)],
    matches: &[MatchResult],
    crop_size: usize,
    subpixel: bool,
) -> Result<TrajectoryError> {
    if matches.is_empty() {
        return Err(Error::Alignment("no matches to score".into()));
    }
    let half = crop_size as f64 / 2.0;
    let mut errs = matches
        .iter()
        .map(|m| {
            let t = truth.get(m.frame_index).ok_or_else(|| {
                Error::Alignment(format!(
                    "ground truth has {} frames, match refers to frame {}",
                    truth.len(),
                    m.frame_index
                ))
            })?;
            let (x0, y0) = crop_placement(m.center, crop_size, subpixel);
            Ok((t.0 - x0 - half).hypot(t.1 - y0 - half))
        })
        .collect::<Result<Vec<f64>>>()?;
    errs.sort_by(f64::total_cmp);
    Ok(TrajectoryError {
        frames: errs.len(),
        mean: errs.iter().sum::<f64>() / errs.len() as f64,
        p95: percentile(&errs, 95.0),
        max: errs[errs.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub frames: usize,
    pub length_seconds: f64,
    pub smooth_window: [usize; 2],
    pub template_frame: usize,
    pub template_anchor: [usize; 2],
    pub template_side: usize,
    pub flagged_frames: Vec<usize>,
    pub flow: FlowSummary,
    pub profile_file: String,
    pub trajectory_error: Option<TrajectoryError>,
    #[serde(skip)]
    pub profile: Vec<FlowStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginalReport {
    pub frames: usize,
    pub flow: FlowSummary,
    pub profile_file: String,
    #[serde(skip)]
    pub profile: Vec<FlowStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub schema_version: u32,
    pub source_id: String,
    pub n_frames: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub detected_frames: usize,
    pub odr_diameter: Option<usize>,
    pub grad_thresh: Option<f64>,
    pub removed_frames: Vec<usize>,
    pub no_usable_clips: bool,
    pub notes: Vec<String>,
    pub original: Option<OriginalReport>,
    pub per_clip: Vec<ClipReport>,
    /// Pooled over every pair of every clip; `None` without clips.
    pub overall: Option<FlowSummary>,
    pub config_echo: serde_json::Value,
}

impl StabilityReport {
    /// Recomputes `overall` from the clip profiles.
    pub fn aggregate(clips: &[ClipReport]) -> Option<FlowSummary> {
        let pooled: Vec<FlowStats> = clips
            .iter()
            .flat_map(|c| c.profile.iter().copied())
            .collect();
        (!pooled.is_empty()).then(|| FlowSummary::of(&pooled))
    }
}

pub fn profile_file_name(id: &str) -> String {
    format!("flow_profile_{id}.csv")
}

/// Writes `report.json` and every referenced flow profile into `dir`.
pub fn write_report(report: &StabilityReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::Write(format!("{}: {e}", dir.display())))?;
    if let Some(o) = &report.original {
        write_flow_profile_csv(&o.profile, dir.join(&o.profile_file))?;
    }
    for c in &report.per_clip {
        write_flow_profile_csv(&c.profile, dir.join(&c.profile_file))?;
    }
    let mut json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Write(format!("report serialization: {e}")))?;
    json.push('\n');
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, json).map_err(|e| Error::Write(format!("{}: {e}", path.display())))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<StabilityReport> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|e| Error::InputFormat(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Parses a flow profile CSV back into stats rows.
pub fn parse_flow_profile_csv(text: &str) -> Result<Vec<FlowStats>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("flow profile line {}", i + 1));
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(FlowStats {
            var_u: f[1],
            var_v: f[2],
            var_mag: f[3],
            mean_u: f[4],
            mean_v: f[5],
        });
    }
    Ok(out)
}
