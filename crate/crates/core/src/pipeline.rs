//! End-to-end orchestration: detection, localization, stabilization and
//! scoring, with every artifact written under one output directory.
//!
//! Output tree:
//! ```text
//! detections.json
//! trajectory.csv
//! clips.json
//! clip_<k>/{meta.json, 000000.png, ..., matches.csv}
//! flow_profile_original.csv, flow_profile_clip_<k>.csv
//! report.json
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{
    estimate_odr_diameter, run_detector, write_detections, DetectionTimeline, DetectorParams,
    DetectorSource,
};
use crate::error::{Error, Result};
use crate::flow::{clip_flow_profile, FlowParams};
use crate::metrics::{
    profile_file_name, score_sequence, trajectory_error, write_report, ClipReport, FlowSummary,
    OriginalReport, StabilityReport, SCHEMA_VERSION,
};
use crate::natm::{stabilize, write_matches_csv, ClipStabilization, NatmParams};
use crate::stl::{localize, write_trajectory_csv, ClipSegment, Localization, LocalizeParams};
use crate::synth::parse_truth_csv;
use crate::video_io::{load_sequence, save_sequence, VideoSequence};

pub const DETECTIONS_FILE: &str = "detections.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const CLIPS_FILE: &str = "clips.json";
pub const MATCHES_FILE: &str = "matches.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    #[default]
    Classical,
    /// Boxes imported from a JSON file (e.g. an external neural detector).
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub detector: DetectorMode,
    pub detections: Option<PathBuf>,
    /// Imported boxes scoring below this are ignored.
    pub min_score: f64,
    pub detection: DetectorParams,
    pub localize: LocalizeParams,
    pub natm: NatmParams,
    pub flow: FlowParams,
    /// Also score the unstabilized input (one flow field per input pair).
    pub score_original: bool,
    /// Ground-truth `truth.csv` for trajectory error.
    pub truth: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            detector: DetectorMode::Classical,
            detections: None,
            min_score: 0.0,
            detection: DetectorParams::default(),
            localize: LocalizeParams::default(),
            natm: NatmParams::default(),
            flow: FlowParams::default(),
            score_original: true,
            truth: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config(format!(
                "min_score must be in [0,1], got {}",
                self.min_score
            )));
        }
        if self.detector == DetectorMode::File && self.detections.is_none() {
            return Err(Error::Config(
                "detector 'file' requires a detections path".into(),
            ));
        }
        self.detection.validate()?;
        self.localize.validate()?;
        self.natm.validate()?;
        self.flow.validate()
    }

    pub fn detector_source(&self) -> DetectorSource {
        match (self.detector, &self.detections) {
            (DetectorMode::File, Some(path)) => DetectorSource::File {
                path: path.clone(),
                min_score: self.min_score,
            },
            _ => DetectorSource::Classical(self.detection),
        }
    }

    /// The effective configuration as recorded in the report. The output
    /// location is omitted: it does not influence any result.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("output");
        }
        v
    }

    fn require_input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::Config("an input path is required".into()))
    }

    fn require_output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config("an output path is required".into()))
    }
}

/// Segmentation summary written to `clips.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipsFile {
    pub odr_diameter: Option<usize>,
    pub grad_thresh: Option<f64>,
    pub removed_frames: Vec<usize>,
    pub clips: Vec<ClipSegment>,
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Write(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    json.push('\n');
    std::fs::write(path, json).map_err(|e| write_err(path, e))
}

/// Removes artifacts of an earlier run so the tree reflects this run only.
fn clear_previous_artifacts(out: &Path) -> Result<()> {
    let entries = match std::fs::read_dir(out) {
        Ok(e) => e,
        Err(_) => return Ok(()),
    };
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        let is_clip_dir = name.starts_with("clip_") && path.is_dir();
        let is_profile = name.starts_with("flow_profile_") && name.ends_with(".csv");
        if is_clip_dir {
            std::fs::remove_dir_all(&path).map_err(|e| write_err(&path, e))?;
        } else if is_profile {
            std::fs::remove_file(&path).map_err(|e| write_err(&path, e))?;
        }
    }
    Ok(())
}

pub fn clip_id(k: usize) -> String {
    format!("clip_{k}")
}

/// Detection plus localization.
pub struct Localized {
    pub timeline: DetectionTimeline,
    pub diameter: Option<usize>,
    pub localization: Localization,
}

pub fn detect_and_localize(seq: &VideoSequence, cfg: &PipelineConfig) -> Result<Localized> {
    let timeline = run_detector(seq, &cfg.detector_source())?;
    log::info!(
        "detect: ODR found in {}/{} frames",
        timeline.detected_count(),
        timeline.n_frames()
    );
    let diameter = match estimate_odr_diameter(&timeline) {
        Ok(d) => Some(d),
        Err(Error::NoOdr) => None,
        Err(e) => return Err(e),
    };
    let localization = localize(&timeline, diameter, seq.fps(), &cfg.localize);
    log::info!(
        "localize: diameter {}, {} frames removed, {} clips",
        diameter.map_or("n/a".to_string(), |d| format!("{d} px")),
        localization.removed.len(),
        localization.clips.len()
    );
    Ok(Localized {
        timeline,
        diameter,
        localization,
    })
}

fn clips_file(loc: &Localized) -> ClipsFile {
    ClipsFile {
        odr_diameter: loc.diameter,
        grad_thresh: loc.diameter.map(|_| loc.localization.grad_thresh),
        removed_frames: loc.localization.removed.iter().copied().collect(),
        clips: loc.localization.clips.clone(),
    }
}

/// Writes the detection and localization artifacts.
pub fn write_localization(loc: &Localized, out: &Path) -> Result<()> {
    write_detections(&loc.timeline, out.join(DETECTIONS_FILE))?;
    write_trajectory_csv(
        &loc.localization.trajectory,
        &loc.localization.removed,
        out.join(TRAJECTORY_FILE),
    )?;
    write_json(&out.join(CLIPS_FILE), &clips_file(loc))
}

/// Stabilizes every clip (clips run in parallel) and writes `clip_<k>/`.
pub fn stabilize_clips(
    seq: &VideoSequence,
    loc: &Localized,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<Vec<ClipStabilization>> {
    let Some(diameter) = loc.diameter else {
        return Ok(Vec::new());
    };
    let results: Vec<ClipStabilization> = loc
        .localization
        .clips
        .par_iter()
        .enumerate()
        .map(|(k, clip)| {
            let st = stabilize(
                seq,
                clip,
                &loc.localization.trajectory,
                &loc.timeline,
                diameter,
                &cfg.natm,
                &cfg.flow,
            )?;
            let dir = out.join(clip_id(k));
            save_sequence(&st.sequence, &dir)?;
            write_matches_csv(&st.matches, dir.join(MATCHES_FILE))?;
            Ok(st)
        })
        .collect::<Result<_>>()?;
    for (k, st) in results.iter().enumerate() {
        log::info!(
            "stabilize: {} frames {}..={}, template frame {} at {:?}, {} flagged",
            clip_id(k),
            st.clip.start_frame,
            st.clip.end_frame,
            st.template.source_frame,
            st.template.anchor,
            st.matches.iter().filter(|m| m.flagged).count()
        );
    }
    Ok(results)
}

/// Ground-truth centers indexed by frame.
pub fn load_truth(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InputFormat(format!("{}: {e}", path.display())))?;
    let rows = parse_truth_csv(&text)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.frame != i {
                return Err(Error::Alignment(format!(
                    "truth row {i} is for frame {}",
                    r.frame
                )));
            }
            Ok((r.cx, r.cy))
        })
        .collect()
}

fn prepare_output(cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cfg.require_output()?.to_path_buf();
    std::fs::create_dir_all(&out).map_err(|e| write_err(&out, e))?;
    clear_previous_artifacts(&out)?;
    Ok(out)
}

fn load_input(cfg: &PipelineConfig) -> Result<VideoSequence> {
    let seq = load_sequence(cfg.require_input()?)?;
    let (w, h) = seq.dimensions();
    log::info!("load: {} frames {w}x{h} @ {} fps", seq.len(), seq.fps());
    Ok(seq)
}

/// Detection, localization and stabilization without scoring.
pub fn run_stabilize(cfg: &PipelineConfig) -> Result<(Localized, Vec<ClipStabilization>)> {
    cfg.validate()?;
    let seq = load_input(cfg)?;
    let out = prepare_output(cfg)?;
    let loc = detect_and_localize(&seq, cfg)?;
    write_localization(&loc, &out)?;
    let clips = stabilize_clips(&seq, &loc, cfg, &out)?;
    Ok((loc, clips))
}

/// The full pipeline; returns the report also written to `report.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<StabilityReport> {
    cfg.validate()?;
    let truth = cfg.truth.as_deref().map(load_truth).transpose()?;
    let seq = load_input(cfg)?;
    let out = prepare_output(cfg)?;
    let loc = detect_and_localize(&seq, cfg)?;
    write_localization(&loc, &out)?;
    let stabilized = stabilize_clips(&seq, &loc, cfg, &out)?;

    let per_clip = stabilized
        .par_iter()
        .enumerate()
        .map(|(k, st)| {
            let id = clip_id(k);
            let n = st.sequence.len();
            let profile = if n >= 2 {
                clip_flow_profile(&st.sequence, 0..=n - 1, &cfg.flow)?
            } else {
                Vec::new()
            };
            let trajectory_error = truth
                .as_ref()
                .map(|t| trajectory_error(t, &st.matches, cfg.natm.crop_size, cfg.natm.subpixel))
                .transpose()?;
            Ok(ClipReport {
                profile_file: profile_file_name(&id),
                clip_id: id,
                start_frame: st.clip.start_frame,
                end_frame: st.clip.end_frame,
                frames: n,
                length_seconds: st.clip.length_seconds,
                smooth_window: [*st.smooth_window.start(), *st.smooth_window.end()],
                template_frame: st.template.source_frame,
                template_anchor: [st.template.anchor.0, st.template.anchor.1],
                template_side: st.template.side,
                flagged_frames: st
                    .matches
                    .iter()
                    .filter(|m| m.flagged)
                    .map(|m| m.frame_index)
                    .collect(),
                flow: FlowSummary::of(&profile),
                trajectory_error,
                profile,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    drop(stabilized);

    let original = if cfg.score_original && seq.len() >= 2 {
        let s = score_sequence(&seq, &cfg.flow)?;
        Some(OriginalReport {
            frames: s.frames,
            flow: s.summary,
            profile_file: profile_file_name("original"),
            profile: s.profile,
        })
    } else {
        None
    };

    let mut notes = Vec::new();
    if loc.diameter.is_none() {
        notes.push("no ODR detected in any frame".to_string());
    } else if per_clip.is_empty() {
        notes.push(format!(
            "no run of detected, jitter-free frames reaches {} s",
            cfg.localize.min_clip_seconds
        ));
    }
    let (w, h) = seq.dimensions();
    let report = StabilityReport {
        schema_version: SCHEMA_VERSION,
        source_id: seq.source_id.clone(),
        n_frames: seq.len(),
        fps: seq.fps(),
        width: w,
        height: h,
        detected_frames: loc.timeline.detected_count(),
        odr_diameter: loc.diameter,
        grad_thresh: loc.diameter.map(|_| loc.localization.grad_thresh),
        removed_frames: loc.localization.removed.iter().copied().collect(),
        no_usable_clips: per_clip.is_empty(),
        notes,
        original,
        overall: StabilityReport::aggregate(&per_clip),
        per_clip,
        config_echo: cfg.echo(),
    };
    write_report(&report, &out)?;
    match &report.overall {
        Some(o) => log::info!(
            "score: {} clips, mean var_mag {:.4} stabilized{}",
            report.per_clip.len(),
            o.mean_var_mag,
            report
                .original
                .as_ref()
                .map(|r| format!(" vs {:.4} original", r.flow.mean_var_mag))
                .unwrap_or_default()
        ),
        None => log::info!("score: no usable clips"),
    }
    Ok(report)
}
