//! Deterministic synthetic fundus videos with ground truth.
//!
//! A static "retina" (textured reddish background, dark vessels, a bright
//! optic disc with a brighter cup) is rendered once onto a canvas and then
//! translated per frame so the disc follows its ground-truth path. The
//! camera aperture stays fixed. Blur, sensor noise, specular spots, blinks
//! and illumination drift are layered on per frame.
//!
//! Coordinates are continuous: pixel `(i, j)` is sampled at
//! `(i + 0.5, j + 0.5)`, so a disc centered at `(300.0, 300.0)` with radius
//! 80 covers pixel columns 220..=379.
//!
//! Jitter offsets added to the base disc path:
//! - `sinusoid`: `dx = A sin(2 pi t / P)`, `dy = A/2 sin(2 pi t / P + pi/3)`
//! - `random_walk`: per-axis Gaussian steps with std `A/8`, clamped to `+-A`
//! - `spike`: `dx` toggles between 0 and `A` at every listed spike frame

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::{save_sequence, Frame, VideoSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSpec {
    /// Base center per frame; a single entry applies to every frame.
    pub path: Vec<(f64, f64)>,
    pub radius: f64,
    /// Multiplier on the disc's colors.
    #[serde(default = "one")]
    pub brightness: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JitterKind {
    #[default]
    None,
    Sinusoid,
    RandomWalk,
    Spike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSpec {
    pub kind: JitterKind,
    pub amplitude: f64,
    pub period: f64,
    pub spike_frames: Vec<usize>,
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self {
            kind: JitterKind::None,
            amplitude: 0.0,
            period: 30.0,
            spike_frames: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurSpec {
    pub frames: Vec<usize>,
    pub sigma: f64,
    /// Extra uniform displacement in `[-shake, shake]` per axis on blurred
    /// frames: blur in hand-held capture comes with camera shake.
    pub shake: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            frames: Vec::new(),
            sigma: 3.0,
            shake: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpotPlacement {
    /// Moves with the disc, at this offset from its center.
    OdrRelative { dx: f64, dy: f64 },
    /// Fixed in camera coordinates.
    Fixed { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecularSpec {
    #[serde(default)]
    pub frames: Vec<usize>,
    pub radius: f64,
    pub placement: SpotPlacement,
}

impl Default for SpecularSpec {
    fn default() -> Self {
        Self {
            frames: Vec::new(),
            radius: 10.0,
            placement: SpotPlacement::OdrRelative { dx: 0.0, dy: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BlinkSpec {
    pub frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlluminationSpec {
    /// Relative gain swing: gain(t) = 1 + drift sin(2 pi t / period).
    pub drift: f64,
    pub period: f64,
}

impl Default for IlluminationSpec {
    fn default() -> Self {
        Self {
            drift: 0.0,
            period: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub sigma: f64,
    /// Frames receiving noise; `None` means every frame.
    pub frames: Option<Vec<usize>>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub n_frames: usize,
    pub disc: DiscSpec,
    #[serde(default)]
    pub jitter: JitterSpec,
    #[serde(default)]
    pub blur: BlurSpec,
    #[serde(default)]
    pub blinks: BlinkSpec,
    #[serde(default)]
    pub specular: SpecularSpec,
    #[serde(default)]
    pub illumination: IlluminationSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    /// Static disc of `radius` at the frame center, nothing else.
    pub fn basic(width: usize, height: usize, n_frames: usize, radius: f64, seed: u64) -> Self {
        Self {
            width,
            height,
            fps: 30.0,
            n_frames,
            disc: DiscSpec {
                path: vec![(width as f64 / 2.0, height as f64 / 2.0)],
                radius,
                brightness: 1.0,
            },
            jitter: JitterSpec::default(),
            blur: BlurSpec::default(),
            blinks: BlinkSpec::default(),
            specular: SpecularSpec::default(),
            illumination: IlluminationSpec::default(),
            noise: NoiseSpec::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.width == 0 || self.height == 0 {
            return err(format!("frame size {}x{}", self.width, self.height));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return err(format!("fps {}", self.fps));
        }
        let r = self.disc.radius;
        if !(r > 0.0 && r < self.width.min(self.height) as f64 / 2.0) {
            return err(format!("disc radius {r} must be in (0, min(w,h)/2)"));
        }
        if self.disc.path.is_empty()
            || (self.disc.path.len() != 1 && self.disc.path.len() != self.n_frames)
        {
            return err(format!(
                "disc path must have 1 or n_frames ({}) entries, got {}",
                self.n_frames,
                self.disc.path.len()
            ));
        }
        if !(self.disc.brightness.is_finite() && self.disc.brightness > 0.0) {
            return err("disc brightness must be positive".into());
        }
        if !(self.jitter.amplitude >= 0.0 && self.jitter.amplitude.is_finite()) {
            return err("jitter amplitude must be >= 0".into());
        }
        if self.jitter.kind == JitterKind::Sinusoid && !(self.jitter.period > 0.0) {
            return err("sinusoid period must be > 0".into());
        }
        if !(self.blur.sigma >= 0.0 && self.blur.shake >= 0.0) {
            return err("blur sigma and shake must be >= 0".into());
        }
        if !(self.specular.radius >= 0.0) {
            return err("specular radius must be >= 0".into());
        }
        if !(self.noise.sigma >= 0.0) {
            return err("noise sigma must be >= 0".into());
        }
        if !(self.illumination.drift.abs() < 1.0 && self.illumination.period > 0.0) {
            return err("illumination drift must be in (-1,1) with positive period".into());
        }
        let sets: [(&str, &[usize]); 4] = [
            ("spike", &self.jitter.spike_frames),
            ("blur", &self.blur.frames),
            ("blink", &self.blinks.frames),
            ("specular", &self.specular.frames),
        ];
        for (name, set) in sets {
            if let Some(&f) = set.iter().find(|&&f| f >= self.n_frames) {
                return err(format!("{name} frame {f} >= n_frames {}", self.n_frames));
            }
        }
        if let Some(noise) = &self.noise.frames {
            if let Some(&f) = noise.iter().find(|&&f| f >= self.n_frames) {
                return err(format!("noise frame {f} >= n_frames {}", self.n_frames));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &[u8]) -> Result<Self> {
        let spec: SynthSpec =
            serde_json::from_slice(json).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-frame ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub blink: bool,
    pub blurred: bool,
    pub specular: bool,
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub sequence: VideoSequence,
    pub truth: Vec<TruthRow>,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(
        seed ^ mix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)),
    ))
}

/// Ground-truth disc centers for every frame.
pub fn ground_truth_centers(spec: &SynthSpec) -> Vec<(f64, f64)> {
    let n = spec.n_frames;
    let a = spec.jitter.amplitude;
    let mut jitter = vec![(0.0, 0.0); n];
    match spec.jitter.kind {
        JitterKind::None => {}
        JitterKind::Sinusoid => {
            let p = spec.jitter.period;
            for (t, j) in jitter.iter_mut().enumerate() {
                let ph = 2.0 * PI * t as f64 / p;
                *j = (a * ph.sin(), 0.5 * a * (ph + PI / 3.0).sin());
            }
        }
        JitterKind::RandomWalk => {
            let mut rng = stream_rng(spec.seed, 1);
            let step = Normal::new(0.0, (a / 8.0).max(1e-12)).expect("finite std");
            let (mut x, mut y) = (0.0f64, 0.0f64);
            for j in jitter.iter_mut().skip(1) {
                x = (x + step.sample(&mut rng)).clamp(-a, a);
                y = (y + step.sample(&mut rng)).clamp(-a, a);
                *j = (x, y);
            }
        }
        JitterKind::Spike => {
            let spikes: BTreeSet<usize> = spec.jitter.spike_frames.iter().copied().collect();
            let mut up = false;
            for (t, j) in jitter.iter_mut().enumerate() {
                if spikes.contains(&t) {
                    up = !up;
                }
                *j = (if up { a } else { 0.0 }, 0.0);
            }
        }
    }
    let blurred: BTreeSet<usize> = spec.blur.frames.iter().copied().collect();
    let mut shake_rng = stream_rng(spec.seed, 2);
    (0..n)
        .map(|t| {
            let base = spec.disc.path[if spec.disc.path.len() == 1 { 0 } else { t }];
            let (mut sx, mut sy) = (0.0, 0.0);
            if blurred.contains(&t) && spec.blur.shake > 0.0 {
                sx = shake_rng.gen_range(-spec.blur.shake..=spec.blur.shake);
                sy = shake_rng.gen_range(-spec.blur.shake..=spec.blur.shake);
            }
            (base.0 + jitter[t].0 + sx, base.1 + jitter[t].1 + sy)
        })
        .collect()
}

/// Smooth lattice value noise in [0,1].
struct ValueNoise {
    seed: u64,
}

impl ValueNoise {
    fn lattice(&self, ix: i64, iy: i64, octave: u64) -> f64 {
        let h = mix64(
            self.seed
                ^ mix64((ix as u64).wrapping_mul(0x9E37_79B9) ^ (iy as u64).wrapping_shl(32))
                ^ octave.wrapping_mul(0xD6E8_FEB8_6659_FD93),
        );
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn sample(&self, x: f64, y: f64, scale: f64, octave: u64) -> f64 {
        let (fx, fy) = (x / scale, y / scale);
        let (ix, iy) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - ix, fy - iy);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(tx), s(ty));
        let (ix, iy) = (ix as i64, iy as i64);
        let a = self.lattice(ix, iy, octave);
        let b = self.lattice(ix + 1, iy, octave);
        let c = self.lattice(ix, iy + 1, octave);
        let d = self.lattice(ix + 1, iy + 1, octave);
        let top = a + (b - a) * sx;
        let bot = c + (d - c) * sx;
        top + (bot - top) * sy
    }
}

/// Pre-rendered retina plus the per-frame state needed to render any frame
/// independently.
pub struct Renderer {
    spec: SynthSpec,
    centers: Vec<(f64, f64)>,
    /// Canvas in retina coordinates; pixel `(a, b)` is the retina at
    /// `(a + origin.0 + 0.5, b + origin.1 + 0.5)`.
    canvas: Vec<u8>,
    canvas_w: usize,
    origin: (i64, i64),
    reference: (f64, f64),
    /// Per-row `[lo, hi)` column span inside the camera aperture.
    aperture: Vec<(usize, usize)>,
    noise_tile: Vec<i8>,
    noise_tile_w: usize,
    noise_tile_h: usize,
    blink: BTreeSet<usize>,
    blur: BTreeSet<usize>,
    specular: BTreeSet<usize>,
    noisy: Option<BTreeSet<usize>>,
}

const NOISE_TILE: usize = 512;

impl Renderer {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let centers = ground_truth_centers(spec);
        let reference = spec.disc.path[0];
        // retina offset per frame is center - reference
        let (mut min_ox, mut max_ox, mut min_oy, mut max_oy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for c in &centers {
            min_ox = min_ox.min(c.0 - reference.0);
            max_ox = max_ox.max(c.0 - reference.0);
            min_oy = min_oy.min(c.1 - reference.1);
            max_oy = max_oy.max(c.1 - reference.1);
        }
        let origin = (-(max_ox.ceil() as i64) - 2, -(max_oy.ceil() as i64) - 2);
        let canvas_w = (spec.width as f64 + max_ox.ceil() - min_ox.floor()) as usize + 4;
        let canvas_h = (spec.height as f64 + max_oy.ceil() - min_oy.floor()) as usize + 4;
        let canvas = render_retina(spec, reference, origin, canvas_w, canvas_h);

        let (cx, cy) = (spec.width as f64 / 2.0, spec.height as f64 / 2.0);
        let ar = 0.47 * spec.width.min(spec.height) as f64;
        let aperture = (0..spec.height)
            .map(|y| {
                let dy = y as f64 + 0.5 - cy;
                let half = ar * ar - dy * dy;
                if half <= 0.0 {
                    return (0, 0);
                }
                let half = half.sqrt();
                let lo = (cx - half - 0.5).ceil().max(0.0) as usize;
                let hi = ((cx + half - 0.5).floor() + 1.0).min(spec.width as f64) as usize;
                (lo, hi.max(lo))
            })
            .collect();

        let (noise_tile, noise_tile_w, noise_tile_h) = if spec.noise.sigma > 0.0 {
            let mut rng = stream_rng(spec.seed, 3);
            let dist = Normal::new(0.0, spec.noise.sigma).expect("finite sigma");
            let n = NOISE_TILE * NOISE_TILE * 3;
            let tile = (0..n)
                .map(|_| dist.sample(&mut rng).round().clamp(-127.0, 127.0) as i8)
                .collect();
            (tile, NOISE_TILE, NOISE_TILE)
        } else {
            (Vec::new(), 0, 0)
        };

        Ok(Self {
            spec: spec.clone(),
            centers,
            canvas,
            canvas_w,
            origin,
            reference,
            aperture,
            noise_tile,
            noise_tile_w,
            noise_tile_h,
            blink: spec.blinks.frames.iter().copied().collect(),
            blur: spec.blur.frames.iter().copied().collect(),
            specular: spec.specular.frames.iter().copied().collect(),
            noisy: spec
                .noise
                .frames
                .as_ref()
                .map(|f| f.iter().copied().collect()),
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn n_frames(&self) -> usize {
        self.spec.n_frames
    }

    pub fn centers(&self) -> &[(f64, f64)] {
        &self.centers
    }

    pub fn truth(&self) -> Vec<TruthRow> {
        (0..self.spec.n_frames)
            .map(|t| TruthRow {
                frame: t,
                cx: self.centers[t].0,
                cy: self.centers[t].1,
                blink: self.blink.contains(&t),
                blurred: self.blur.contains(&t) && self.spec.blur.sigma > 0.0,
                specular: self.specular.contains(&t) && self.spec.specular.radius > 0.0,
            })
            .collect()
    }

    /// Center of the specular spot in frame `t`, if any.
    pub fn spot_center(&self, t: usize) -> Option<(f64, f64)> {
        if !self.specular.contains(&t) || self.spec.specular.radius <= 0.0 {
            return None;
        }
        Some(match self.spec.specular.placement {
            SpotPlacement::OdrRelative { dx, dy } => {
                (self.centers[t].0 + dx, self.centers[t].1 + dy)
            }
            SpotPlacement::Fixed { x, y } => (x, y),
        })
    }

    pub fn render(&self, t: usize) -> Frame {
        let spec = &self.spec;
        let (w, h) = (spec.width, spec.height);
        let mut px = vec![0u8; w * h * 3];

        // canvas coordinate of frame pixel i is i - offset - origin
        let ox = self.centers[t].0 - self.reference.0;
        let oy = self.centers[t].1 - self.reference.1;
        let fx = -ox - self.origin.0 as f64;
        let fy = -oy - self.origin.1 as f64;
        let (bx, by) = (fx.floor(), fy.floor());
        let ax = ((fx - bx) * 256.0).round() as u32;
        let ay = ((fy - by) * 256.0).round() as u32;
        let (bx, by) = (bx as i64, by as i64);
        let w00 = (256 - ax) * (256 - ay);
        let w10 = ax * (256 - ay);
        let w01 = (256 - ax) * ay;
        let w11 = ax * ay;
        let gain =
            1.0 + spec.illumination.drift * (2.0 * PI * t as f64 / spec.illumination.period).sin();
        let gain_q = (gain * 1024.0).round() as u32;
        let cw3 = self.canvas_w * 3;

        for (y, &(lo, hi)) in self.aperture.iter().enumerate() {
            if lo >= hi {
                continue;
            }
            let cy0 = (y as i64 + by) as usize;
            let r0 = &self.canvas[cy0 * cw3..(cy0 + 1) * cw3];
            let r1 = &self.canvas[(cy0 + 1) * cw3..(cy0 + 2) * cw3];
            let out = &mut px[y * w * 3..(y + 1) * w * 3];
            for x in lo..hi {
                let c0 = (x as i64 + bx) as usize * 3;
                for ch in 0..3 {
                    let v = w00 * r0[c0 + ch] as u32
                        + w10 * r0[c0 + 3 + ch] as u32
                        + w01 * r1[c0 + ch] as u32
                        + w11 * r1[c0 + 3 + ch] as u32;
                    let v = ((v + 32768) >> 16) * gain_q;
                    out[x * 3 + ch] = ((v + 512) >> 10).min(255) as u8;
                }
            }
        }

        let mut frame = Frame::new(t, w, h, px).expect("valid size");
        if self.blur.contains(&t) && spec.blur.sigma > 0.0 {
            frame = gaussian_blur(&frame, spec.blur.sigma);
        }
        let noisy = self.noisy.as_ref().is_none_or(|s| s.contains(&t));
        if noisy && self.noise_tile_w > 0 {
            self.add_noise(&mut frame, t);
        }
        if let Some((sx, sy)) = self.spot_center(t) {
            stamp_spot(&mut frame, sx, sy, spec.specular.radius);
        }
        if self.blink.contains(&t) {
            for v in frame.pixels_mut() {
                *v = (*v as u32 * 10 / 255) as u8;
            }
        }
        frame
    }

    fn add_noise(&self, frame: &mut Frame, t: usize) {
        let mut rng = stream_rng(self.spec.seed, 1000 + t as u64);
        let (tw, th) = (self.noise_tile_w, self.noise_tile_h);
        let off_x = rng.gen_range(0..tw);
        let off_y = rng.gen_range(0..th);
        let flip: bool = rng.gen();
        let w = frame.width();
        let px = frame.pixels_mut();
        for (y, &(lo, hi)) in self.aperture.iter().enumerate() {
            let ty = (y + off_y) % th;
            for x in lo..hi {
                let tx = (x + off_x) % tw;
                let base = (ty * tw + tx) * 3;
                for ch in 0..3 {
                    let mut n = self.noise_tile[base + ch] as i32;
                    if flip {
                        n = -n;
                    }
                    let o = (y * w + x) * 3 + ch;
                    px[o] = (px[o] as i32 + n).clamp(0, 255) as u8;
                }
            }
        }
    }
}

fn stamp_spot(frame: &mut Frame, sx: f64, sy: f64, r: f64) {
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let x0 = ((sx - r).floor() as i64).max(0);
    let x1 = ((sx + r).ceil() as i64).min(w - 1);
    let y0 = ((sy - r).floor() as i64).max(0);
    let y1 = ((sy + r).ceil() as i64).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - sx;
            let dy = y as f64 + 0.5 - sy;
            if dx * dx + dy * dy <= r * r {
                frame.put(x as usize, y as usize, [255, 255, 255]);
            }
        }
    }
}

fn smooth_ramp(edge0: f64, edge1: f64, x: f64) -> f64 {
    ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0)
}

/// Renders the static retina onto a canvas.
fn render_retina(
    spec: &SynthSpec,
    disc_center: (f64, f64),
    origin: (i64, i64),
    cw: usize,
    ch: usize,
) -> Vec<u8> {
    let noise = ValueNoise { seed: spec.seed };
    let r = spec.disc.radius;
    let vessels = vessel_map(spec, disc_center, origin, cw, ch);
    let bright = spec.disc.brightness;
    let rows: Vec<Vec<u8>> = (0..ch)
        .into_par_iter()
        .map(|b| {
            let mut row = Vec::with_capacity(cw * 3);
            let py = b as f64 + origin.1 as f64 + 0.5;
            for a in 0..cw {
                let pxf = a as f64 + origin.0 as f64 + 0.5;
                let coarse = noise.sample(pxf, py, 96.0, 0);
                let mid = noise.sample(pxf, py, 24.0, 1);
                let fine = noise.sample(pxf, py, 6.0, 2);
                let tex = 0.45 * coarse + 0.3 * mid + 0.25 * fine;
                let k = 0.7 + 0.6 * tex;
                let mut bg = [170.0 * k, 72.0 * k, 40.0 * k];
                let vdark = vessels[b * cw + a] as f64 / 255.0;
                for c in &mut bg {
                    *c *= 1.0 - 0.45 * vdark;
                }
                let d = (pxf - disc_center.0).hypot(py - disc_center.1);
                // darker peripapillary ring keeps the disc isolated
                let halo = 1.0 - 0.3 * (1.0 - smooth_ramp(r + 1.0, r + 10.0, d));
                let disc_w = 1.0 - smooth_ramp(r - 1.0, r + 1.0, d);
                let cup_w = 1.0 - smooth_ramp(0.35 * r, 0.45 * r, d);
                let dtex = 0.85 + 0.15 * (0.6 * mid + 0.4 * fine);
                let disc = [
                    (245.0 + 10.0 * cup_w) * dtex * bright,
                    (200.0 + 20.0 * cup_w) * dtex * bright,
                    (150.0 + 25.0 * cup_w) * dtex * bright,
                ];
                for c in 0..3 {
                    let v = disc_w * disc[c] + (1.0 - disc_w) * bg[c] * halo;
                    row.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            row
        })
        .collect();
    rows.concat()
}

/// Vessel darkness (0..255) on the canvas: branching curves leaving the disc.
fn vessel_map(
    spec: &SynthSpec,
    disc_center: (f64, f64),
    origin: (i64, i64),
    cw: usize,
    ch: usize,
) -> Vec<u8> {
    let mut map = vec![0u8; cw * ch];
    let mut rng = stream_rng(spec.seed, 4);
    let r = spec.disc.radius;
    let reach = spec.width.max(spec.height) as f64;
    let mut stamp = |x: f64, y: f64, width: f64| {
        let rad = width / 2.0 + 1.0;
        let ax = x - origin.0 as f64 - 0.5;
        let ay = y - origin.1 as f64 - 0.5;
        let (x0, x1) = ((ax - rad).floor() as i64, (ax + rad).ceil() as i64);
        let (y0, y1) = ((ay - rad).floor() as i64, (ay + rad).ceil() as i64);
        for yy in y0.max(0)..=y1.min(ch as i64 - 1) {
            for xx in x0.max(0)..=x1.min(cw as i64 - 1) {
                let d = (xx as f64 - ax).hypot(yy as f64 - ay);
                let v = 1.0 - smooth_ramp(width / 2.0 - 0.5, width / 2.0 + 0.5, d);
                let cell = &mut map[yy as usize * cw + xx as usize];
                *cell = (*cell).max((v * 255.0) as u8);
            }
        }
    };
    let trunks = 8;
    let mut stack: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    for k in 0..trunks {
        let ang = 2.0 * PI * (k as f64 + rng.gen_range(0.0..0.6)) / trunks as f64;
        let start = r + 12.0;
        stack.push((
            disc_center.0 + start * ang.cos(),
            disc_center.1 + start * ang.sin(),
            ang,
            rng.gen_range(5.0..9.0),
            reach * rng.gen_range(0.3..0.55),
        ));
    }
    while let Some((mut x, mut y, mut ang, width, len)) = stack.pop() {
        let mut travelled = 0.0;
        while travelled < len {
            stamp(x, y, width);
            ang += rng.gen_range(-0.06..0.06);
            x += ang.cos();
            y += ang.sin();
            travelled += 1.0;
            if width > 3.0 && rng.gen_bool(0.004) {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                stack.push((
                    x,
                    y,
                    ang + side * rng.gen_range(0.4..0.9),
                    width * 0.65,
                    len * 0.5,
                ));
            }
            if (x - disc_center.0).hypot(y - disc_center.1) < r + 10.0 {
                break;
            }
        }
    }
    map
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (frame.width(), frame.height());
    let src = frame.pixels();
    let w3 = w * 3;
    let mut tmp = vec![0f32; w * h * 3];
    tmp.par_chunks_mut(w3).enumerate().for_each(|(y, out)| {
        // replicate-padded row so every tap is a contiguous slice
        let row = &src[y * w3..(y + 1) * w3];
        let r3 = r as usize * 3;
        let mut padded = vec![0f32; w3 + 2 * r3];
        for (px, p) in padded.chunks_exact_mut(3).enumerate() {
            let sx = (px as i64 - r).clamp(0, w as i64 - 1) as usize;
            for c in 0..3 {
                p[c] = row[sx * 3 + c] as f32;
            }
        }
        for (i, kv) in k.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&padded[i * 3..i * 3 + w3]) {
                *o += kv * v;
            }
        }
    });
    let mut dst = vec![0u8; w * h * 3];
    dst.par_chunks_mut(w3).enumerate().for_each_init(
        || vec![0f32; w3],
        |acc, (y, out)| {
            acc.fill(0.0);
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                let row = &tmp[sy * w3..(sy + 1) * w3];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += kv * v;
                }
            }
            // inputs are non-negative, so +0.5 and truncation rounds half up
            for (o, a) in out.iter_mut().zip(acc.iter()) {
                *o = (a + 0.5).min(255.0) as u8;
            }
        },
    );
    Frame::new(frame.index, w, h, dst).expect("same size")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthVideo> {
    let renderer = Renderer::new(spec)?;
    let frames: Vec<Frame> = (0..spec.n_frames)
        .into_par_iter()
        .map(|t| renderer.render(t))
        .collect();
    let sequence = VideoSequence::new(frames, spec.fps, format!("synth-{}", spec.seed))?;
    Ok(SynthVideo {
        sequence,
        truth: renderer.truth(),
    })
}

pub fn truth_csv(truth: &[TruthRow]) -> String {
    let mut out = String::from("frame,cx,cy,blink,blurred,specular\n");
    for r in truth {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.frame, r.cx, r.cy, r.blink as u8, r.blurred as u8, r.specular as u8
        );
    }
    out
}

pub fn parse_truth_csv(text: &str) -> Result<Vec<TruthRow>> {
    let bad = |l: usize| Error::Parse(format!("truth.csv line {}", l + 1));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(i));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(i)),
        };
        rows.push(TruthRow {
            frame: f[0].parse().map_err(|_| bad(i))?,
            cx: f[1].parse().map_err(|_| bad(i))?,
            cy: f[2].parse().map_err(|_| bad(i))?,
            blink: flag(f[3])?,
            blurred: flag(f[4])?,
            specular: flag(f[5])?,
        });
    }
    Ok(rows)
}

pub const TRUTH_FILE: &str = "truth.csv";

/// Writes the frames in the PNG sequence format plus `truth.csv`.
pub fn write_synth(video: &SynthVideo, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    save_sequence(&video.sequence, dir)?;
    std::fs::write(dir.join(TRUTH_FILE), truth_csv(&video.truth))
        .map_err(|e| Error::Write(format!("{}: {e}", dir.display())))
}

/// Names of the fixed benchmark suite, in order.
pub const BENCHMARK_NAMES: [&str; 9] = [
    "clean-static",
    "sinusoid-10",
    "sinusoid-20",
    "sinusoid-40",
    "spike",
    "blink-gap",
    "blur-window",
    "specular-on-odr",
    "combined-worst-case",
];

pub const BENCH_SIZE: usize = 1800;
pub const BENCH_FRAMES: usize = 150;
pub const BENCH_RADIUS: f64 = 80.0;
pub const SPIKE_FRAME: usize = 75;
pub const SPIKE_AMPLITUDE: f64 = 200.0;
pub const BLINK_FRAMES: std::ops::RangeInclusive<usize> = 70..=79;
pub const BLUR_FRAMES: std::ops::RangeInclusive<usize> = 60..=89;

fn bench_base(seed: u64) -> SynthSpec {
    SynthSpec::basic(BENCH_SIZE, BENCH_SIZE, BENCH_FRAMES, BENCH_RADIUS, seed)
}

fn sinusoid(amplitude: f64) -> JitterSpec {
    JitterSpec {
        kind: JitterKind::Sinusoid,
        amplitude,
        period: 30.0,
        spike_frames: Vec::new(),
    }
}

/// One named benchmark with an explicit seed.
pub fn benchmark(name: &str, seed: u64) -> Option<SynthSpec> {
    let mut s = bench_base(seed);
    match name {
        "clean-static" => {}
        "sinusoid-10" => s.jitter = sinusoid(10.0),
        "sinusoid-20" => s.jitter = sinusoid(20.0),
        "sinusoid-40" => s.jitter = sinusoid(40.0),
        "spike" => {
            let c = s.disc.path[0];
            s.disc.path = vec![(c.0 - SPIKE_AMPLITUDE / 2.0, c.1)];
            s.jitter = JitterSpec {
                kind: JitterKind::Spike,
                amplitude: SPIKE_AMPLITUDE,
                period: 30.0,
                spike_frames: vec![SPIKE_FRAME],
            };
        }
        "blink-gap" => {
            s.jitter = JitterSpec {
                kind: JitterKind::Sinusoid,
                amplitude: 5.0,
                period: 45.0,
                spike_frames: Vec::new(),
            };
            s.blinks.frames = BLINK_FRAMES.collect();
        }
        "blur-window" => {
            s.blur = BlurSpec {
                frames: BLUR_FRAMES.collect(),
                sigma: 3.0,
                shake: 6.0,
            };
            s.noise = NoiseSpec {
                sigma: 3.0,
                frames: Some(BLUR_FRAMES.collect()),
            };
        }
        "specular-on-odr" => {
            s.jitter = sinusoid(20.0);
            let c = s.disc.path[0];
            s.specular = SpecularSpec {
                frames: (0..BENCH_FRAMES).collect(),
                // a broad glare over most of the disc: large enough that
                // unmasked matching locks onto it
                radius: 65.0,
                placement: SpotPlacement::Fixed {
                    x: c.0 + 0.3 * BENCH_RADIUS,
                    y: c.1 - 0.2 * BENCH_RADIUS,
                },
            };
        }
        "combined-worst-case" => {
            s.jitter = sinusoid(20.0);
            s.blinks.frames = (100..=105).collect();
            s.blur = BlurSpec {
                frames: (40..=47).collect(),
                sigma: 2.5,
                shake: 4.0,
            };
            let c = s.disc.path[0];
            s.specular = SpecularSpec {
                frames: (0..BENCH_FRAMES).step_by(3).collect(),
                radius: 18.0,
                placement: SpotPlacement::Fixed {
                    x: c.0 - 0.5 * BENCH_RADIUS,
                    y: c.1 + 0.4 * BENCH_RADIUS,
                },
            };
            s.illumination = IlluminationSpec {
                drift: 0.1,
                period: 75.0,
            };
            s.noise = NoiseSpec {
                sigma: 2.0,
                frames: None,
            };
        }
        _ => return None,
    }
    Some(s)
}

/// The fixed benchmark suite with default seeds.
pub fn standard_benchmarks() -> Vec<(String, SynthSpec)> {
    BENCHMARK_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| {
            (
                n.to_string(),
                benchmark(n, 1000 + i as u64).expect("known name"),
            )
        })
        .collect()
}
