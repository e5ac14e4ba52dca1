//! End-to-end acceptance suite on the synthetic benchmarks. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! `ACCEPTANCE_TRIALS` overrides the trial count of the blur-screening
//! criterion (default 100).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fundus_stab::detection::{estimate_odr_diameter, run_detector, DetectorParams, DetectorSource};
use fundus_stab::flow::{compute_flow, FlowParams};
use fundus_stab::metrics::{read_report, StabilityReport, REPORT_FILE};
use fundus_stab::natm::{
    extract_template, select_smooth_window, select_template_frame, stabilize, stabilize_clip,
    template_side, MaskPolicy, Matcher, NatmParams,
};
use fundus_stab::pipeline::{ClipsFile, CLIPS_FILE};
use fundus_stab::stl::{localize, min_clip_frames, LocalizeParams};
use fundus_stab::synth::{
    benchmark, generate, JitterKind, JitterSpec, SynthSpec, BENCHMARK_NAMES, BLINK_FRAMES,
    BLUR_FRAMES, SPIKE_FRAME, TRUTH_FILE,
};
use fundus_stab::video_io::{load_sequence, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const SINUSOIDS: [&str; 3] = ["sinusoid-10", "sinusoid-20", "sinusoid-40"];
const CROP: usize = 640;
const P95_MAX: f64 = 2.0;
const MEAN_MAX: f64 = 1.0;
const VARIANCE_RATIO: f64 = 5.0;
const BLUR_PASS: usize = 95;
const SPECULAR_TOL: f64 = 1.0;
const FLOW_RECOVERY: f64 = 0.90;

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fundus-stab"))
        .arg("-q")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "fundus-stab {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out.stdout)
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn default_seed(name: &str) -> u64 {
    1000 + BENCHMARK_NAMES
        .iter()
        .position(|n| *n == name)
        .expect("benchmark") as u64
}

/// Default `run` on a CLI-generated benchmark, with ground truth attached.
fn run_benchmark(root: &Path, name: &str) -> Result<(StabilityReport, PathBuf), String> {
    let frames = root.join(name);
    let out = root.join(format!("{name}-out"));
    cli(&["synth", "--benchmark", name, "--out", p(&frames)])?;
    cli(&[
        "run",
        "--input",
        p(&frames),
        "--output",
        p(&out),
        "--truth",
        p(&frames.join(TRUTH_FILE)),
    ])?;
    // frames are only needed for scoring; free the disk early
    std::fs::remove_dir_all(&frames).map_err(|e| e.to_string())?;
    let report = read_report(out.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    Ok((report, out))
}

fn localize_benchmark(root: &Path, name: &str) -> Result<ClipsFile, String> {
    let frames = root.join(name);
    let out = root.join(format!("{name}-loc"));
    cli(&["synth", "--benchmark", name, "--out", p(&frames)])?;
    cli(&["localize", "--input", p(&frames), "--output", p(&out)])?;
    std::fs::remove_dir_all(&frames).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(out.join(CLIPS_FILE)).map_err(|e| e.to_string())?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

struct Sinusoids {
    runs: Vec<(&'static str, StabilityReport, PathBuf)>,
}

fn sinusoid_runs(root: &Path) -> Result<Sinusoids, String> {
    let mut runs = Vec::new();
    for name in SINUSOIDS {
        let (report, out) = run_benchmark(root, name)?;
        runs.push((name, report, out));
    }
    Ok(Sinusoids { runs })
}

fn crop_geometry(s: &Sinusoids) -> Outcome {
    let mut frames = 0;
    for (name, report, out) in &s.runs {
        if report.width != 1800 || report.height != 1800 {
            return Err(format!(
                "{name}: input is {}x{}",
                report.width, report.height
            ));
        }
        if report.per_clip.is_empty() {
            return Err(format!("{name}: no clips"));
        }
        for clip in &report.per_clip {
            let seq = load_sequence(out.join(&clip.clip_id)).map_err(|e| e.to_string())?;
            if seq
                .frames()
                .iter()
                .any(|f| (f.width(), f.height()) != (CROP, CROP))
            {
                return Err(format!("{name}/{}: frame not {CROP}x{CROP}", clip.clip_id));
            }
            frames += seq.len();
        }
    }
    Ok(format!("{frames} output frames, all {CROP}x{CROP}"))
}

fn stabilization_quality(s: &Sinusoids) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, report, _) in &s.runs {
        for clip in &report.per_clip {
            let e = clip
                .trajectory_error
                .as_ref()
                .ok_or("no trajectory error")?;
            ok &= e.p95 <= P95_MAX && e.mean <= MEAN_MAX;
            parts.push(format!("{name}: mean {:.2} p95 {:.2}", e.mean, e.p95));
        }
    }
    let msg = format!(
        "{} (limits mean <= {MEAN_MAX}, p95 <= {P95_MAX})",
        parts.join("; ")
    );
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn flow_variance_ordering(s: &Sinusoids) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, report, _) in &s.runs {
        let orig = report
            .original
            .as_ref()
            .ok_or("original not scored")?
            .flow
            .mean_var_mag;
        let stab = report.overall.ok_or("no stabilized score")?.mean_var_mag;
        ok &= stab <= orig / VARIANCE_RATIO;
        parts.push(format!("{name}: {stab:.3} vs {orig:.3}"));
    }
    let msg = format!("stabilized vs original var_mag: {}", parts.join("; "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Maximal runs outside `removed` no shorter than `min_len`.
fn expected_clips(n: usize, removed: &BTreeSet<usize>, min_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..=n {
        let keep = t < n && !removed.contains(&t);
        match (keep, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= min_len {
                    out.push((s, t - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn jitter_filtering(root: &Path) -> Outcome {
    let clips = localize_benchmark(root, "spike")?;
    let removed: BTreeSet<usize> = clips.removed_frames.iter().copied().collect();
    let want_removed: BTreeSet<usize> = [SPIKE_FRAME - 1, SPIKE_FRAME].into();
    let min_len = min_clip_frames(30.0, LocalizeParams::default().min_clip_seconds);
    let want_clips = expected_clips(150, &want_removed, min_len);
    let got_clips: Vec<_> = clips
        .clips
        .iter()
        .map(|c| (c.start_frame, c.end_frame))
        .collect();
    let msg = format!("removed {removed:?}, clips {got_clips:?}");
    if removed == want_removed && got_clips == want_clips {
        Ok(msg)
    } else {
        Err(format!(
            "{msg}; expected removed {want_removed:?}, clips {want_clips:?}"
        ))
    }
}

fn blink_handling(root: &Path) -> Outcome {
    let clips = localize_benchmark(root, "blink-gap")?;
    let got: Vec<_> = clips
        .clips
        .iter()
        .map(|c| (c.start_frame, c.end_frame))
        .collect();
    let leaked: Vec<usize> = BLINK_FRAMES
        .filter(|t| clips.clips.iter().any(|c| c.contains(*t)))
        .collect();
    let msg = format!("clips {got:?}");
    if got.len() == 2 && leaked.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; blink frames inside clips: {leaked:?}"))
    }
}

fn blur_screening(trials: usize) -> Outcome {
    let loc_params = LocalizeParams::default();
    let natm = NatmParams::default();
    let flow = FlowParams::default();
    let source = DetectorSource::Classical(DetectorParams::default());
    let mut outside = 0;
    let mut bad = Vec::new();
    for trial in 0..trials {
        let seed = 6000 + trial as u64;
        let spec = benchmark("blur-window", seed).expect("benchmark");
        let video = generate(&spec).map_err(|e| e.to_string())?;
        let seq = &video.sequence;
        let timeline = run_detector(seq, &source).map_err(|e| e.to_string())?;
        let diameter = estimate_odr_diameter(&timeline).map_err(|e| e.to_string())?;
        let loc = localize(&timeline, Some(diameter), spec.fps, &loc_params);
        let mut picks = Vec::new();
        for clip in &loc.clips {
            let window = select_smooth_window(&loc.trajectory, clip, natm.window);
            picks.push(select_template_frame(seq, window, &flow).map_err(|e| e.to_string())?);
        }
        if !picks.is_empty() && picks.iter().all(|t| !BLUR_FRAMES.contains(t)) {
            outside += 1;
        } else {
            bad.push((seed, picks));
        }
    }
    let need = (BLUR_PASS * trials).div_ceil(100);
    let msg = format!("template outside blur window in {outside}/{trials} trials (need {need})");
    if outside >= need {
        Ok(msg)
    } else {
        Err(format!("{msg}; failing seeds/picks {bad:?}"))
    }
}

fn specular_robustness() -> Outcome {
    let name = "specular-on-odr";
    let spotted = benchmark(name, default_seed(name)).expect("benchmark");
    let mut clean = spotted.clone();
    clean.specular.frames.clear();

    let natm = NatmParams::default();
    let flow = FlowParams::default();
    let source = DetectorSource::Classical(DetectorParams::default());

    // reference: the full default pipeline on the spot-free video
    let video = generate(&clean).map_err(|e| e.to_string())?;
    let timeline = run_detector(&video.sequence, &source).map_err(|e| e.to_string())?;
    let diameter = estimate_odr_diameter(&timeline).map_err(|e| e.to_string())?;
    let loc = localize(
        &timeline,
        Some(diameter),
        clean.fps,
        &LocalizeParams::default(),
    );
    let clip = *loc.clips.first().ok_or("no clip in spot-free run")?;
    let reference = stabilize(
        &video.sequence,
        &clip,
        &loc.trajectory,
        &timeline,
        diameter,
        &natm,
        &flow,
    )
    .map_err(|e| e.to_string())?;
    drop(video);

    // same template frame and anchor, spots present, masking on and off
    let video = generate(&spotted).map_err(|e| e.to_string())?;
    let side = template_side(diameter, natm.margin);
    let template = extract_template(
        &video.sequence,
        reference.template.source_frame,
        &timeline,
        side,
    )
    .map_err(|e| e.to_string())?;
    let radius = natm.search_radius.unwrap_or(diameter);
    let max_dev = |policy: MaskPolicy| -> Result<f64, String> {
        let matcher = Matcher::new(template.clone(), policy, radius);
        let (_, matches) = stabilize_clip(&video.sequence, &clip, &matcher, &timeline, &natm)
            .map_err(|e| e.to_string())?;
        Ok(matches
            .iter()
            .zip(&reference.matches)
            .map(|(a, b)| (a.center.0 - b.center.0).hypot(a.center.1 - b.center.1))
            .fold(0.0, f64::max))
    };
    let masked = max_dev(natm.mask_policy())?;
    let unmasked = max_dev(MaskPolicy::disabled())?;
    let msg = format!(
        "max deviation from spot-free run: masked {masked:.2} px, unmasked {unmasked:.2} px"
    );
    if masked <= SPECULAR_TOL && unmasked > SPECULAR_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn flow_kernel_oracle() -> Outcome {
    let params = FlowParams::default();
    let (w, h, r) = (320usize, 256usize, params.search_radius as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pad = r as usize;
    let (cw, ch) = (w + 2 * pad, h + 2 * pad);
    let canvas: Vec<u8> = (0..cw * ch).map(|_| rng.gen()).collect();
    // three-tap smoothing keeps the texture unique but not white
    let smooth = |x: usize, y: usize| -> u8 {
        let at = |x: usize, y: usize| canvas[y.min(ch - 1) * cw + x.min(cw - 1)] as u32;
        ((at(x, y) * 2 + at(x + 1, y) + at(x, y + 1)) / 4) as u8
    };
    let prev = GrayImage::from_fn(w, h, |x, y| smooth(x + pad, y + pad));

    let id = compute_flow(&prev, &prev, params.block_size, params.search_radius)
        .map_err(|e| e.to_string())?;
    if id.vectors.iter().any(|&v| v != (0, 0)) {
        return Err("compute_flow(img, img) has a non-zero vector".into());
    }

    let mut shifts = vec![
        (r, 0),
        (0, r),
        (-r, -r),
        (r, -r),
        (0, 0),
        (1, 0),
        (-7, 3),
        (13, -20),
    ];
    shifts.extend((0..12).map(|_| (rng.gen_range(-r..=r), rng.gen_range(-r..=r))));
    let bs = params.block_size as i64;
    let mut worst = 1.0f64;
    for &(dx, dy) in &shifts {
        let next = GrayImage::from_fn(w, h, |x, y| {
            smooth(
                (x as i64 + pad as i64 - dx) as usize,
                (y as i64 + pad as i64 - dy) as usize,
            )
        });
        let f = compute_flow(&prev, &next, params.block_size, params.search_radius)
            .map_err(|e| e.to_string())?;
        let (mut hit, mut total) = (0, 0);
        for gy in 0..f.grid_h {
            for gx in 0..f.grid_w {
                let (x, y) = (gx as i64 * bs + dx, gy as i64 * bs + dy);
                if x < 0 || y < 0 || x + bs > w as i64 || y + bs > h as i64 {
                    continue;
                }
                total += 1;
                hit += usize::from(f.get(gx, gy) == (dx as i32, dy as i32));
            }
        }
        worst = worst.min(hit as f64 / total as f64);
    }
    let msg = format!(
        "identity flow zero; worst exact-recovery fraction {worst:.3} over {} shifts (|d| <= {r})",
        shifts.len()
    );
    if worst >= FLOW_RECOVERY {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("prefix").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    let mut spec = SynthSpec::basic(480, 480, 60, 24.0, 9);
    spec.jitter = JitterSpec {
        kind: JitterKind::Sinusoid,
        amplitude: 8.0,
        period: 20.0,
        spike_frames: Vec::new(),
    };
    spec.specular.frames = (0..60).step_by(4).collect();
    let spec_path = root.join("det-spec.json");
    std::fs::write(&spec_path, serde_json::to_vec(&spec).unwrap()).map_err(|e| e.to_string())?;
    let frames = root.join("det-frames");
    cli(&["synth", "--spec", p(&spec_path), "--out", p(&frames)])?;
    let mut trees = Vec::new();
    for threads in ["1", "2", "4"] {
        let out = root.join(format!("det-out-{threads}"));
        cli(&[
            "--threads",
            threads,
            "run",
            "--input",
            p(&frames),
            "--output",
            p(&out),
            "--crop-size",
            "128",
            "--truth",
            p(&frames.join(TRUTH_FILE)),
        ])?;
        trees.push(out);
    }
    let base = tree_files(&trees[0]);
    for other in &trees[1..] {
        if tree_files(other) != base {
            return Err(format!("file sets differ: {}", other.display()));
        }
        for rel in &base {
            let a = std::fs::read(trees[0].join(rel)).map_err(|e| e.to_string())?;
            let b = std::fs::read(other.join(rel)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!(
                    "{} differs with {}",
                    rel.display(),
                    other.display()
                ));
            }
        }
    }
    Ok(format!(
        "{} files bit-identical across --threads 1/2/4",
        base.len()
    ))
}

fn main() {
    let trials = std::env::var("ACCEPTANCE_TRIALS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(100usize);
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let mut failed = 0;
    let mut report = |id: usize, title: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id} PASS {title}: {msg} [{secs:.0}s]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} FAIL {title}: {msg} [{secs:.0}s]");
            }
        }
    };

    let t = Instant::now();
    let sinusoids = sinusoid_runs(root);
    let shared = |f: fn(&Sinusoids) -> Outcome| match &sinusoids {
        Ok(s) => f(s),
        Err(e) => Err(e.clone()),
    };
    report(1, "crop geometry", t, shared(crop_geometry));
    report(2, "stabilization quality", t, shared(stabilization_quality));
    report(
        3,
        "flow-variance ordering",
        t,
        shared(flow_variance_ordering),
    );
    drop(sinusoids);

    let t = Instant::now();
    report(4, "jitter filtering", t, jitter_filtering(root));
    let t = Instant::now();
    report(5, "blink handling", t, blink_handling(root));
    let t = Instant::now();
    report(6, "blur screening", t, blur_screening(trials));
    let t = Instant::now();
    report(7, "specular robustness", t, specular_robustness());
    let t = Instant::now();
    report(8, "flow kernel oracle", t, flow_kernel_oracle());
    let t = Instant::now();
    report(9, "determinism", t, determinism(root));

    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
