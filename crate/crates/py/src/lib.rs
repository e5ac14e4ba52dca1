//! Python bindings for the fundus stabilization library.
//!
//! Frames cross the boundary as packed `bytes` (RGB, row-major; luma for
//! flow inputs). Structured results come back as dicts or JSON strings that
//! mirror the files the CLI writes.

use std::path::PathBuf;

use fundus_stab::detection::{run_detector, BoundingBox, DetectorParams, DetectorSource};
use fundus_stab::flow::{compute_flow, flow_variance, FlowParams};
use fundus_stab::metrics::score_sequence;
use fundus_stab::natm::{MaskPolicy, Matcher, Template};
use fundus_stab::pipeline::{run_pipeline as run_core_pipeline, PipelineConfig};
use fundus_stab::synth::{self, SynthSpec};
use fundus_stab::video_io::{load_sequence, save_sequence, Frame, GrayImage, VideoSequence};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(
    fundus_stab,
    StabError,
    PyException,
    "Raised with args (kind, message)."
);

fn err(e: fundus_stab::Error) -> PyErr {
    StabError::new_err((e.kind(), e.to_string()))
}

/// `(x, y, w, h, score)` of a detected box.
type BoxTuple = (f64, f64, f64, f64, f64);

fn json_err(e: serde_json::Error) -> PyErr {
    StabError::new_err(("parse", e.to_string()))
}

/// An in-memory RGB video.
#[pyclass(module = "fundus_stab", frozen)]
struct Video {
    seq: VideoSequence,
}

#[pymethods]
impl Video {
    /// Build a video from packed RGB frames of equal size.
    #[new]
    #[pyo3(signature = (frames, width, height, fps = 30.0))]
    fn new(frames: Vec<Vec<u8>>, width: usize, height: usize, fps: f64) -> PyResult<Self> {
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, px)| Frame::new(i, width, height, px))
            .collect::<fundus_stab::Result<Vec<_>>>()
            .map_err(err)?;
        let seq = VideoSequence::new(frames, fps, "python").map_err(err)?;
        Ok(Self { seq })
    }

    /// Load a PNG frame directory or a `.y4m` file.
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let seq = py.detach(|| load_sequence(&path)).map_err(err)?;
        Ok(Self { seq })
    }

    /// Write the video as a PNG frame directory.
    fn save(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.detach(|| save_sequence(&self.seq, &path)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.seq.len()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.seq.fps()
    }

    /// `(width, height)`.
    #[getter]
    fn size(&self) -> (usize, usize) {
        self.seq.dimensions()
    }

    /// Packed RGB bytes of the frame at `position`.
    fn frame<'py>(&self, py: Python<'py>, position: usize) -> PyResult<Bound<'py, PyBytes>> {
        let f = self.frame_ref(position)?;
        Ok(PyBytes::new(py, f.pixels()))
    }

    /// Packed luma bytes of the frame at `position`.
    fn gray<'py>(&self, py: Python<'py>, position: usize) -> PyResult<Bound<'py, PyBytes>> {
        let g = fundus_stab::video_io::to_grayscale(self.frame_ref(position)?);
        Ok(PyBytes::new(py, g.data()))
    }

    fn __repr__(&self) -> String {
        let (w, h) = self.seq.dimensions();
        format!(
            "Video({} frames, {w}x{h}, {} fps)",
            self.seq.len(),
            self.seq.fps()
        )
    }
}

impl Video {
    fn frame_ref(&self, position: usize) -> PyResult<&Frame> {
        self.seq.frames().get(position).ok_or_else(|| {
            StabError::new_err((
                "range",
                format!("frame {position} outside video of {}", self.seq.len()),
            ))
        })
    }
}

/// Names of the built-in synthetic benchmarks.
#[pyfunction]
fn benchmark_names() -> Vec<&'static str> {
    synth::BENCHMARK_NAMES.to_vec()
}

/// Spec JSON of a named benchmark.
#[pyfunction]
fn benchmark_spec(name: &str, seed: u64) -> PyResult<String> {
    let spec = synth::benchmark(name, seed)
        .ok_or_else(|| StabError::new_err(("spec", format!("unknown benchmark '{name}'"))))?;
    serde_json::to_string(&spec).map_err(json_err)
}

/// Render a synthetic video from spec JSON; returns `(video, truth)` with
/// one `(cx, cy)` disc center per frame.
#[pyfunction]
fn synthesize(py: Python<'_>, spec_json: &str) -> PyResult<(Video, Vec<(f64, f64)>)> {
    let spec = SynthSpec::from_json(spec_json.as_bytes()).map_err(err)?;
    let video = py.detach(|| synth::generate(&spec)).map_err(err)?;
    let truth = video.truth.iter().map(|r| (r.cx, r.cy)).collect();
    Ok((
        Video {
            seq: video.sequence,
        },
        truth,
    ))
}

/// Classical optic disc detection per frame; `None` where nothing was found.
/// `params_json` overrides detector fields.
#[pyfunction]
#[pyo3(signature = (video, params_json = None))]
fn detect(
    py: Python<'_>,
    video: &Video,
    params_json: Option<&str>,
) -> PyResult<Vec<Option<BoxTuple>>> {
    let params: DetectorParams = match params_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => DetectorParams::default(),
    };
    let timeline = py
        .detach(|| run_detector(&video.seq, &DetectorSource::Classical(params)))
        .map_err(err)?;
    Ok(timeline
        .entries()
        .iter()
        .map(|e| e.map(|b: BoundingBox| (b.x, b.y, b.w, b.h, b.score)))
        .collect())
}

/// Block-matching flow between two luma images. Returns a dict with the
/// block grid, row-major `(u, v)` vectors and their variances.
#[pyfunction]
#[pyo3(signature = (prev, next, width, height, block_size = 16, search_radius = 24))]
fn optical_flow<'py>(
    py: Python<'py>,
    prev: &[u8],
    next: &[u8],
    width: usize,
    height: usize,
    block_size: usize,
    search_radius: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let a = GrayImage::new(width, height, prev.to_vec()).map_err(err)?;
    let b = GrayImage::new(width, height, next.to_vec()).map_err(err)?;
    let field = py
        .detach(|| compute_flow(&a, &b, block_size, search_radius))
        .map_err(err)?;
    let stats = flow_variance(&field);
    let d = PyDict::new(py);
    d.set_item("grid", (field.grid_w, field.grid_h))?;
    d.set_item("vectors", field.vectors)?;
    d.set_item("var_u", stats.var_u)?;
    d.set_item("var_v", stats.var_v)?;
    d.set_item("var_mag", stats.var_mag)?;
    d.set_item("flow_variance", stats.flow_variance())?;
    Ok(d)
}

/// Masked template matching of one frame against a `side`-pixel template
/// cut around `template_center` in another frame. Returns a dict with the
/// match position, refined disc center, score and valid fraction.
#[pyfunction]
#[pyo3(signature = (
    video, position, template_frame, template_center, side, search_radius,
    mask = true, subpixel = true, threshold = 220, filter_kernel = 5
))]
#[allow(clippy::too_many_arguments)]
fn match_template<'py>(
    py: Python<'py>,
    video: &Video,
    position: usize,
    template_frame: usize,
    template_center: (f64, f64),
    side: usize,
    search_radius: usize,
    mask: bool,
    subpixel: bool,
    threshold: u8,
    filter_kernel: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let src = video.frame_ref(template_frame)?;
    let target = video.frame_ref(position)?;
    let (w, h) = video.seq.dimensions();
    let anchor = fundus_stab::natm::centered_anchor(template_center, side, w, h);
    let patch = src.crop_replicate(anchor.0 as i64, anchor.1 as i64, side, side);
    let mut tmpl = Template::centered(patch, side, template_frame, anchor);
    tmpl.odr_offset = (
        template_center.0 - anchor.0 as f64,
        template_center.1 - anchor.1 as f64,
    );
    let policy = MaskPolicy {
        enabled: mask,
        threshold,
        filter_kernel,
    };
    let search = (anchor.0, anchor.1);
    let m = py
        .detach(|| {
            Matcher::new(tmpl, policy, search_radius)
                .with_refinement(subpixel)
                .find(target, search)
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("position", m.position)?;
    d.set_item("center", m.center)?;
    d.set_item("score", m.score)?;
    d.set_item("valid_fraction", m.valid_fraction)?;
    d.set_item("flagged", m.flagged)?;
    Ok(d)
}

/// Flow-variance score of a whole video as JSON (per-pair profile and means).
#[pyfunction]
#[pyo3(signature = (video, block_size = 16, search_radius = 24))]
fn score(
    py: Python<'_>,
    video: &Video,
    block_size: usize,
    search_radius: usize,
) -> PyResult<String> {
    let params = FlowParams {
        block_size,
        search_radius,
    };
    let s = py
        .detach(|| score_sequence(&video.seq, &params))
        .map_err(err)?;
    serde_json::to_string(&serde_json::json!({
        "frames": s.frames,
        "flow": s.summary,
        "profile": s.profile,
    }))
    .map_err(json_err)
}

/// Run the full pipeline from config JSON (same schema as the CLI's
/// `--config`, with `input` and `output` set). Writes all artifacts and
/// returns the report JSON.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = PipelineConfig::from_json(config_json.as_bytes()).map_err(err)?;
    let report = py.detach(|| run_core_pipeline(&cfg)).map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule(name = "fundus_stab")]
fn fundus_stab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StabError", m.py().get_type::<StabError>())?;
    m.add_class::<Video>()?;
    m.add_function(wrap_pyfunction!(benchmark_names, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_spec, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(optical_flow, m)?)?;
    m.add_function(wrap_pyfunction!(match_template, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
