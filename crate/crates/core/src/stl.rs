//! Spatio-temporal localization of the visible ODR.
//!
//! Builds the ODR center trajectory from a detection timeline, drops frames
//! on either side of huge jumps, and cuts the remainder into clips that are
//! long enough to contain a full venous pulsation cycle.
//!
//! The rolling variance series is the population variance of the per-frame
//! displacement magnitude over the trailing `window` frames; it is only
//! defined where every displacement in the window is defined.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::DetectionTimeline;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Option<(f64, f64)>>,
    /// `|p_t - p_{t-1}|`, defined when both frames are detected.
    pub gradient: Vec<Option<f64>>,
    pub variance_series: Vec<Option<f64>>,
    pub window: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn from_points(points: Vec<Option<(f64, f64)>>, window: usize) -> Self {
        let window = window.max(2);
        let gradient: Vec<Option<f64>> = (0..points.len())
            .map(|t| {
                if t == 0 {
                    return None;
                }
                match (points[t - 1], points[t]) {
                    (Some(a), Some(b)) => Some((b.0 - a.0).hypot(b.1 - a.1)),
                    _ => None,
                }
            })
            .collect();
        let variance_series = (0..points.len())
            .map(|t| {
                if t + 1 < window {
                    return None;
                }
                let vals: Option<Vec<f64>> = gradient[t + 1 - window..=t].iter().copied().collect();
                vals.map(|v| population_variance(&v))
            })
            .collect();
        Self {
            points,
            gradient,
            variance_series,
            window,
        }
    }
}

pub(crate) fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn build_trajectory(timeline: &DetectionTimeline, window: usize) -> Trajectory {
    let points = timeline
        .entries()
        .iter()
        .map(|b| b.map(|b| b.center()))
        .collect();
    Trajectory::from_points(points, window)
}

/// Frames adjoining any displacement larger than `grad_thresh`.
pub fn filter_jitters(traj: &Trajectory, grad_thresh: f64) -> BTreeSet<usize> {
    let mut removed = BTreeSet::new();
    for (t, g) in traj.gradient.iter().enumerate() {
        if matches!(g, Some(g) if *g > grad_thresh) {
            removed.insert(t - 1);
            removed.insert(t);
        }
    }
    removed
}

/// Inclusive frame range with a visible, jitter-free ODR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSegment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub length_seconds: f64,
}

impl ClipSegment {
    pub fn new(start_frame: usize, end_frame: usize, fps: f64) -> Self {
        Self {
            start_frame,
            end_frame,
            length_seconds: (end_frame - start_frame + 1) as f64 / fps,
        }
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start_frame..=self.end_frame
    }
}

/// Minimum run length in frames for a clip of `min_seconds`.
pub fn min_clip_frames(fps: f64, min_seconds: f64) -> usize {
    // tolerate binary fp noise such as 1.5 * 30 = 45.000000000000004
    ((min_seconds * fps - 1e-9).ceil() as usize).max(1)
}

pub fn segment_clips(
    timeline: &DetectionTimeline,
    removed: &BTreeSet<usize>,
    fps: f64,
    min_seconds: f64,
) -> Vec<ClipSegment> {
    let min_len = min_clip_frames(fps, min_seconds);
    let keep = |t: usize| timeline.is_detected(t) && !removed.contains(&t);
    let n = timeline.n_frames();
    let mut clips = Vec::new();
    let mut t = 0;
    while t < n {
        if !keep(t) {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && keep(t) {
            t += 1;
        }
        if t - start >= min_len {
            clips.push(ClipSegment::new(start, t - 1, fps));
        }
    }
    clips
}

/// Result of the whole localization stage.
#[derive(Debug, Clone)]
pub struct Localization {
    pub trajectory: Trajectory,
    pub removed: BTreeSet<usize>,
    pub clips: Vec<ClipSegment>,
    pub grad_thresh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeParams {
    /// Absolute jitter threshold in px/frame; when absent it is
    /// `grad_thresh_mult` times the estimated ODR diameter.
    pub grad_thresh: Option<f64>,
    pub grad_thresh_mult: f64,
    pub min_clip_seconds: f64,
    pub window: usize,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            grad_thresh: None,
            grad_thresh_mult: 1.0,
            min_clip_seconds: 1.5,
            window: 15,
        }
    }
}

impl LocalizeParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.grad_thresh {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("grad_thresh must be > 0, got {g}")));
            }
        }
        if !(self.grad_thresh_mult.is_finite() && self.grad_thresh_mult > 0.0) {
            return Err(Error::Config(format!(
                "grad_thresh_mult must be > 0, got {}",
                self.grad_thresh_mult
            )));
        }
        if !(self.min_clip_seconds.is_finite() && self.min_clip_seconds > 0.0) {
            return Err(Error::Config(format!(
                "min_clip_seconds must be > 0, got {}",
                self.min_clip_seconds
            )));
        }
        if self.window < 2 {
            return Err(Error::Config(format!(
                "window must be >= 2, got {}",
                self.window
            )));
        }
        Ok(())
    }

    pub fn threshold_for(&self, diameter: usize) -> f64 {
        self.grad_thresh
            .unwrap_or(self.grad_thresh_mult * diameter as f64)
    }
}

/// Runs trajectory, jitter filtering and segmentation. `diameter` is
/// `None` when nothing was detected, in which case no clips are produced.
pub fn localize(
    timeline: &DetectionTimeline,
    diameter: Option<usize>,
    fps: f64,
    params: &LocalizeParams,
) -> Localization {
    let trajectory = build_trajectory(timeline, params.window);
    let Some(diameter) = diameter else {
        return Localization {
            trajectory,
            removed: BTreeSet::new(),
            clips: Vec::new(),
            grad_thresh: params.grad_thresh.unwrap_or(f64::NAN),
        };
    };
    let grad_thresh = params.threshold_for(diameter);
    let removed = filter_jitters(&trajectory, grad_thresh);
    let clips = segment_clips(timeline, &removed, fps, params.min_clip_seconds);
    Localization {
        trajectory,
        removed,
        clips,
        grad_thresh,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn trajectory_csv(traj: &Trajectory, removed: &BTreeSet<usize>) -> String {
    let mut out = String::from("frame,detected,cx,cy,gradient,rolling_variance,removed\n");
    for t in 0..traj.len() {
        let p = traj.points[t];
        let _ = writeln!(
            out,
            "{t},{},{},{},{},{},{}",
            p.is_some() as u8,
            opt(p.map(|p| p.0)),
            opt(p.map(|p| p.1)),
            opt(traj.gradient[t]),
            opt(traj.variance_series[t]),
            removed.contains(&t) as u8
        );
    }
    out
}

pub fn write_trajectory_csv(
    traj: &Trajectory,
    removed: &BTreeSet<usize>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path.as_ref(), trajectory_csv(traj, removed))
        .map_err(|e| Error::Write(format!("{}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BoundingBox;
    use proptest::prelude::*;

    fn timeline_from_centers(centers: &[Option<(f64, f64)>]) -> DetectionTimeline {
        DetectionTimeline::from_entries(
            centers
                .iter()
                .map(|c| {
                    c.map(|(x, y)| BoundingBox {
                        x: x - 10.0,
                        y: y - 10.0,
                        w: 20.0,
                        h: 20.0,
                        score: 1.0,
                    })
                })
                .collect(),
        )
    }

    #[test]
    fn empty_timeline_is_all_gaps() {
        let t = build_trajectory(&DetectionTimeline::empty(5), 15);
        assert!(t.points.iter().all(Option::is_none));
        assert!(t.gradient.iter().all(Option::is_none));
        assert!(t.variance_series.iter().all(Option::is_none));
    }

    #[test]
    fn three_four_five() {
        let t = build_trajectory(
            &timeline_from_centers(&[Some((100.0, 100.0)), Some((103.0, 104.0))]),
            15,
        );
        assert_eq!(t.gradient, vec![None, Some(5.0)]);
    }

    #[test]
    fn constant_centers() {
        let c = vec![Some((50.0, 60.0)); 50];
        let t = build_trajectory(&timeline_from_centers(&c), 15);
        assert!(t.gradient.iter().flatten().all(|&g| g == 0.0));
        assert!(t.variance_series.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(t.variance_series.iter().flatten().count(), 50 - 15 + 1 - 1);
    }

    #[test]
    fn gaps_break_gradient() {
        let c = [Some((0.0, 0.0)), None, Some((1.0, 0.0)), Some((2.0, 0.0))];
        let t = build_trajectory(&timeline_from_centers(&c), 2);
        assert_eq!(t.gradient, vec![None, None, None, Some(1.0)]);
        assert_eq!(t.variance_series, vec![None, None, None, None]);
    }

    #[test]
    fn jitter_examples() {
        let c = vec![Some((10.0, 10.0)); 20];
        let t = build_trajectory(&timeline_from_centers(&c), 15);
        assert!(filter_jitters(&t, 50.0).is_empty());

        let c: Vec<_> = (0..20)
            .map(|i| Some((if i >= 10 { 210.0 } else { 10.0 }, 10.0)))
            .collect();
        let t = build_trajectory(&timeline_from_centers(&c), 15);
        assert_eq!(filter_jitters(&t, 50.0), BTreeSet::from([9, 10]));

        let c: Vec<_> = (0..20).map(|i| Some((2.0 * i as f64, 0.0))).collect();
        let t = build_trajectory(&timeline_from_centers(&c), 15);
        assert!(filter_jitters(&t, 50.0).is_empty());
    }

    #[test]
    fn segmentation_examples() {
        let tl = timeline_from_centers(&vec![Some((0.0, 0.0)); 100]);
        let clips = segment_clips(&tl, &BTreeSet::new(), 30.0, 1.0);
        assert_eq!(clips.len(), 1);
        assert_eq!((clips[0].start_frame, clips[0].end_frame), (0, 99));
        assert!((clips[0].length_seconds - 100.0 / 30.0).abs() < 1e-12);

        let c: Vec<_> = (0..=100)
            .map(|i| ((0..=20).contains(&i) || i >= 40).then_some((0.0, 0.0)))
            .collect();
        let clips = segment_clips(&timeline_from_centers(&c), &BTreeSet::new(), 30.0, 1.0);
        assert_eq!(clips.len(), 1);
        assert_eq!((clips[0].start_frame, clips[0].end_frame), (40, 100));

        let clips = segment_clips(&DetectionTimeline::empty(50), &BTreeSet::new(), 30.0, 1.0);
        assert!(clips.is_empty());
    }

    #[test]
    fn min_frames_rounds_up() {
        assert_eq!(min_clip_frames(30.0, 1.5), 45);
        assert_eq!(min_clip_frames(30.0, 1.0), 30);
        assert_eq!(min_clip_frames(25.0, 1.01), 26);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let c = [Some((1.0, 2.0)), None, Some((3.0, 4.0))];
        let t = build_trajectory(&timeline_from_centers(&c), 2);
        let csv = trajectory_csv(&t, &BTreeSet::from([2]));
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,1,1,2,,,0");
        assert_eq!(lines[2], "1,0,,,,,0");
        assert_eq!(lines[3], "2,1,3,4,,,1");
    }

    fn arb_centers() -> impl Strategy<Value = Vec<Option<(f64, f64)>>> {
        proptest::collection::vec(
            proptest::option::weighted(0.85, (0.0f64..500.0, 0.0f64..500.0)),
            0..120,
        )
    }

    proptest! {
        #[test]
        fn removal_monotone_in_threshold(c in arb_centers(), a in 1.0f64..300.0, b in 1.0f64..300.0) {
            let t = build_trajectory(&timeline_from_centers(&c), 5);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(filter_jitters(&t, hi).is_subset(&filter_jitters(&t, lo)));
        }

        #[test]
        fn clips_respect_invariants(c in arb_centers(), thresh in 1.0f64..300.0, min_s in 0.1f64..1.0) {
            let tl = timeline_from_centers(&c);
            let t = build_trajectory(&tl, 5);
            let removed = filter_jitters(&t, thresh);
            let fps = 30.0;
            let clips = segment_clips(&tl, &removed, fps, min_s);
            let min_len = min_clip_frames(fps, min_s);
            let mut covered = BTreeSet::new();
            for w in clips.windows(2) {
                prop_assert!(w[0].end_frame < w[1].start_frame);
            }
            for clip in &clips {
                prop_assert!(clip.start_frame <= clip.end_frame);
                prop_assert!(clip.len() >= min_len);
                for f in clip.frames() {
                    prop_assert!(tl.is_detected(f) && !removed.contains(&f));
                    covered.insert(f);
                }
            }
            // brute force: kept frames lying in long-enough runs
            let keep: Vec<bool> = (0..c.len()).map(|f| tl.is_detected(f) && !removed.contains(&f)).collect();
            let mut expected = BTreeSet::new();
            let mut f = 0;
            while f < keep.len() {
                if !keep[f] { f += 1; continue; }
                let s = f;
                while f < keep.len() && keep[f] { f += 1; }
                if f - s >= min_len { expected.extend(s..f); }
            }
            prop_assert_eq!(covered, expected);
        }

        #[test]
        fn gradient_translation_invariant(c in arb_centers(), dx in -1000.0f64..1000.0, dy in -1000.0f64..1000.0) {
            let shifted: Vec<_> = c.iter().map(|p| p.map(|(x, y)| (x + dx, y + dy))).collect();
            let a = build_trajectory(&timeline_from_centers(&c), 5);
            let b = build_trajectory(&timeline_from_centers(&shifted), 5);
            for (ga, gb) in a.gradient.iter().zip(&b.gradient) {
                match (ga, gb) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-6),
                    (None, None) => {}
                    _ => prop_assert!(false, "definedness differs"),
                }
            }
        }
    }
}
