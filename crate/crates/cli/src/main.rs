//! Command-line front end for fundus video stabilization.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Failures print one JSON object `{"error": <kind>, "message": <text>}` on
//! stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fundus_stab::metrics::{profile_file_name, score_sequence};
use fundus_stab::natm::{PadPolicy, SearchMode};
use fundus_stab::pipeline::{
    detect_and_localize, run_pipeline, run_stabilize, write_localization, DetectorMode,
    PipelineConfig, DETECTIONS_FILE,
};
use fundus_stab::synth::{benchmark, generate, write_synth, SynthSpec, BENCHMARK_NAMES};
use fundus_stab::video_io::load_sequence;
use fundus_stab::{flow, Error};

#[derive(Parser, Debug)]
#[command(
    name = "fundus-stab",
    version,
    about = "Optic-disc-anchored stabilization of fundus retina videos"
)]
struct Cli {
    /// Worker thread cap; results are identical for any value.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full pipeline: detect, localize, stabilize, score.
    Run(PipelineArgs),
    /// Per-frame ODR detection only (writes detections.json).
    Detect(PipelineArgs),
    /// Detection plus trajectory, jitter filtering and clip segmentation.
    Localize(PipelineArgs),
    /// Everything up to the stabilized clips, without scoring.
    Stabilize(PipelineArgs),
    /// Flow-variance score of a frame sequence.
    Score(ScoreArgs),
    /// Generate a synthetic fundus video with ground truth.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DetectorArg {
    Classical,
    File,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PadArg {
    Replicate,
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SearchArg {
    Chained,
    PerFrameBox,
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame directory (meta.json + PNGs) or a .y4m file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    detector: Option<DetectorArg>,
    /// Detections JSON for `--detector file`.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    min_score: Option<f64>,
    #[arg(long)]
    intensity_quantile: Option<f64>,
    #[arg(long)]
    min_area_frac: Option<f64>,
    #[arg(long)]
    min_mean_luma: Option<f64>,
    /// Absolute jitter threshold in px/frame.
    #[arg(long)]
    grad_thresh: Option<f64>,
    /// Jitter threshold as a multiple of the ODR diameter.
    #[arg(long)]
    grad_thresh_mult: Option<f64>,
    #[arg(long)]
    min_clip_seconds: Option<f64>,
    /// Rolling-variance and smooth-period window, in frames.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    specular_threshold: Option<u8>,
    #[arg(long)]
    filter_kernel: Option<usize>,
    /// Disable specular masking.
    #[arg(long)]
    no_mask: bool,
    /// Template side as a multiple of the ODR diameter.
    #[arg(long)]
    margin: Option<f64>,
    /// Template search radius in px (default: ODR diameter).
    #[arg(long)]
    search_radius: Option<usize>,
    #[arg(long, value_enum)]
    pad: Option<PadArg>,
    #[arg(long, value_enum)]
    search_mode: Option<SearchArg>,
    /// Whole-pixel matching and crops (no sub-pixel refinement).
    #[arg(long)]
    no_subpixel: bool,
    #[arg(long)]
    block_size: Option<usize>,
    /// Optical-flow search radius in px.
    #[arg(long)]
    flow_radius: Option<usize>,
    /// Ground-truth truth.csv for trajectory error.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Skip scoring the unstabilized input.
    #[arg(long)]
    no_score_original: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    /// Directory for score.json and the flow profile CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    block_size: usize,
    #[arg(long, default_value_t = 24)]
    flow_radius: usize,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["spec", "benchmark", "list"]))]
struct SynthArgs {
    /// SynthSpec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Named benchmark from the standard suite.
    #[arg(long)]
    benchmark: Option<String>,
    /// List benchmark names.
    #[arg(long)]
    list: bool,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, required_unless_present = "list")]
    out: Option<PathBuf>,
}

impl PipelineArgs {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut c = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                PipelineConfig::from_json(&bytes)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        if self.input.is_some() {
            c.input = self.input.clone();
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        if let Some(d) = self.detector {
            c.detector = match d {
                DetectorArg::Classical => DetectorMode::Classical,
                DetectorArg::File => DetectorMode::File,
            };
        }
        if self.detections.is_some() {
            c.detections = self.detections.clone();
        }
        set(&mut c.min_score, &self.min_score);
        set(
            &mut c.detection.intensity_quantile,
            &self.intensity_quantile,
        );
        set(&mut c.detection.min_area_frac, &self.min_area_frac);
        set(&mut c.detection.min_mean_luma, &self.min_mean_luma);
        if self.grad_thresh.is_some() {
            c.localize.grad_thresh = self.grad_thresh;
        }
        set(&mut c.localize.grad_thresh_mult, &self.grad_thresh_mult);
        set(&mut c.localize.min_clip_seconds, &self.min_clip_seconds);
        if let Some(w) = self.window {
            c.localize.window = w;
            c.natm.window = w;
        }
        set(&mut c.natm.crop_size, &self.crop_size);
        set(&mut c.natm.specular_threshold, &self.specular_threshold);
        set(&mut c.natm.filter_kernel, &self.filter_kernel);
        if self.no_mask {
            c.natm.masking = false;
        }
        set(&mut c.natm.margin, &self.margin);
        if self.search_radius.is_some() {
            c.natm.search_radius = self.search_radius;
        }
        if let Some(p) = self.pad {
            c.natm.pad = match p {
                PadArg::Replicate => PadPolicy::Replicate,
                PadArg::Constant => PadPolicy::Constant,
            };
        }
        if let Some(m) = self.search_mode {
            c.natm.search_mode = match m {
                SearchArg::Chained => SearchMode::Chained,
                SearchArg::PerFrameBox => SearchMode::PerFrameBox,
            };
        }
        if self.no_subpixel {
            c.natm.subpixel = false;
        }
        set(&mut c.flow.block_size, &self.block_size);
        set(&mut c.flow.search_radius, &self.flow_radius);
        if self.truth.is_some() {
            c.truth = self.truth.clone();
        }
        if self.no_score_original {
            c.score_original = false;
        }
        c.validate()?;
        if c.input.is_none() || c.output.is_none() {
            return Err(Error::Config("--input and --output are required".into()));
        }
        Ok(c)
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

fn cmd_detect(args: &PipelineArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let seq = load_sequence(cfg.input.as_deref().expect("resolved"))?;
    let out = cfg.output.as_deref().expect("resolved");
    std::fs::create_dir_all(out).map_err(|e| Error::Write(format!("{}: {e}", out.display())))?;
    let timeline = fundus_stab::detection::run_detector(&seq, &cfg.detector_source())?;
    fundus_stab::detection::write_detections(&timeline, out.join(DETECTIONS_FILE))?;
    log::info!(
        "detect: ODR found in {}/{} frames",
        timeline.detected_count(),
        timeline.n_frames()
    );
    print_json(&serde_json::json!({
        "frames": timeline.n_frames(),
        "detected": timeline.detected_count(),
    }));
    Ok(())
}

fn cmd_localize(args: &PipelineArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let seq = load_sequence(cfg.input.as_deref().expect("resolved"))?;
    let out = cfg.output.as_deref().expect("resolved");
    std::fs::create_dir_all(out).map_err(|e| Error::Write(format!("{}: {e}", out.display())))?;
    let loc = detect_and_localize(&seq, &cfg)?;
    write_localization(&loc, out)?;
    print_json(&serde_json::json!({
        "odr_diameter": loc.diameter,
        "removed_frames": loc.localization.removed,
        "clips": loc.localization.clips,
    }));
    Ok(())
}

fn cmd_stabilize(args: &PipelineArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let (_, clips) = run_stabilize(&cfg)?;
    let summary: Vec<_> = clips
        .iter()
        .map(|c| {
            serde_json::json!({
                "start_frame": c.clip.start_frame,
                "end_frame": c.clip.end_frame,
                "template_frame": c.template.source_frame,
                "flagged": c.matches.iter().filter(|m| m.flagged).count(),
            })
        })
        .collect();
    print_json(&serde_json::json!({ "clips": summary }));
    Ok(())
}

fn cmd_run(args: &PipelineArgs) -> Result<(), Error> {
    let cfg = args.resolve()?;
    let report = run_pipeline(&cfg)?;
    print_json(&serde_json::json!({
        "clips": report.per_clip.len(),
        "no_usable_clips": report.no_usable_clips,
        "overall": report.overall,
        "original": report.original.as_ref().map(|o| o.flow),
    }));
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<(), Error> {
    let params = flow::FlowParams {
        block_size: args.block_size,
        search_radius: args.flow_radius,
    };
    params.validate()?;
    let seq = load_sequence(&args.input)?;
    let score = score_sequence(&seq, &params)?;
    let value = serde_json::json!({
        "source_id": seq.source_id,
        "frames": score.frames,
        "flow": score.summary,
    });
    if let Some(out) = &args.output {
        std::fs::create_dir_all(out)
            .map_err(|e| Error::Write(format!("{}: {e}", out.display())))?;
        flow::write_flow_profile_csv(&score.profile, out.join(profile_file_name("input")))?;
        let path = out.join("score.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&value).expect("json") + "\n",
        )
        .map_err(|e| Error::Write(format!("{}: {e}", path.display())))?;
    }
    print_json(&value);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    if args.list {
        for name in BENCHMARK_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let mut spec = match (&args.spec, &args.benchmark) {
        (Some(path), _) => {
            let bytes =
                std::fs::read(path).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
            SynthSpec::from_json(&bytes)?
        }
        (None, Some(name)) => {
            let mut s = benchmark(name, 0).ok_or_else(|| {
                Error::Spec(format!(
                    "unknown benchmark '{name}'; known: {}",
                    BENCHMARK_NAMES.join(", ")
                ))
            })?;
            let idx = BENCHMARK_NAMES
                .iter()
                .position(|n| n == name)
                .expect("known");
            s.seed = 1000 + idx as u64;
            s
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = args.out.as_deref().expect("clap requires --out");
    let video = generate(&spec)?;
    write_synth(&video, out)?;
    std::fs::write(
        out.join("spec.json"),
        serde_json::to_string_pretty(&spec).expect("json") + "\n",
    )
    .map_err(|e| Error::Write(format!("{}: {e}", out.display())))?;
    log::info!(
        "synth: {} frames written to {}",
        spec.n_frames,
        out.display()
    );
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
    ExitCode::from(code)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 2);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
        {
            return fail("runtime", &e.to_string(), 1);
        }
    }
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Localize(a) => cmd_localize(a),
        Command::Stabilize(a) => cmd_stabilize(a),
        Command::Score(a) => cmd_score(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
