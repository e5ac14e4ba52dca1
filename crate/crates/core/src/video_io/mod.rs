//! Frame containers and on-disk sequence formats.
//!
//! A sequence on disk is either a directory holding `meta.json` plus
//! `%06d.png` frames, or a single uncompressed Y4M file. Both are lossless,
//! so a save followed by a load reproduces pixels exactly.

mod y4m;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use y4m::{parse_y4m, read_y4m};

/// One RGB frame, 8 bits per channel, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub index: usize,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frame")
            .field("index", &self.index)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Frame {
    pub fn new(index: usize, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "frame {index} has zero dimension {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Validation(format!(
                "frame {index}: buffer length {} != {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(Self {
            index,
            width,
            height,
            pixels,
        })
    }

    /// Frame filled with a single color.
    pub fn filled(index: usize, width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(index, width, height, pixels).expect("valid dimensions")
    }

    pub fn from_fn(
        index: usize,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(index, width, height, pixels).expect("valid dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// One RGB row as a flat slice.
    #[inline]
    pub fn row(&self, y: usize) -> &[u8] {
        let w3 = self.width * 3;
        &self.pixels[y * w3..(y + 1) * w3]
    }

    /// Copies the `w`x`h` window at signed offset (`x0`, `y0`), replicating
    /// edge pixels for any part that falls outside the frame.
    pub fn crop_replicate(&self, x0: i64, y0: i64, w: usize, h: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(w * h * 3);
        let max_x = self.width as i64 - 1;
        let max_y = self.height as i64 - 1;
        let inside_x = x0 >= 0 && x0 + w as i64 - 1 <= max_x;
        for row in 0..h as i64 {
            let sy = (y0 + row).clamp(0, max_y) as usize;
            let src = self.row(sy);
            if inside_x {
                let s = x0 as usize * 3;
                out.extend_from_slice(&src[s..s + w * 3]);
            } else {
                for col in 0..w as i64 {
                    let sx = (x0 + col).clamp(0, max_x) as usize * 3;
                    out.extend_from_slice(&src[sx..sx + 3]);
                }
            }
        }
        out
    }
}

/// Color channel selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    fn offset(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Validation(format!(
                "gray buffer length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

/// BT.601 luma, `round(0.299 R + 0.587 G + 0.114 B)`.
#[inline]
pub fn luma(rgb: [u8; 3]) -> u8 {
    // weights sum to 1000, so the result never exceeds 255
    ((299 * rgb[0] as u32 + 587 * rgb[1] as u32 + 114 * rgb[2] as u32 + 500) / 1000) as u8
}

pub fn to_grayscale(frame: &Frame) -> GrayImage {
    let data = frame
        .pixels
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .collect();
    GrayImage {
        width: frame.width,
        height: frame.height,
        data,
    }
}

pub fn channel(frame: &Frame, which: Channel) -> GrayImage {
    let off = which.offset();
    let data = frame.pixels.chunks_exact(3).map(|p| p[off]).collect();
    GrayImage {
        width: frame.width,
        height: frame.height,
        data,
    }
}

/// An ordered, immutable run of equally sized frames.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    frames: Vec<Frame>,
    fps: f64,
    pub source_id: String,
}

impl VideoSequence {
    pub fn new(frames: Vec<Frame>, fps: f64, source_id: impl Into<String>) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Validation(format!(
                "fps must be positive, got {fps}"
            )));
        }
        if let Some(first) = frames.first() {
            let (w, h) = (first.width, first.height);
            for pair in frames.windows(2) {
                if pair[1].index <= pair[0].index {
                    return Err(Error::Validation(format!(
                        "frame indices not strictly increasing at {}",
                        pair[1].index
                    )));
                }
            }
            if let Some(bad) = frames.iter().find(|f| f.width != w || f.height != h) {
                return Err(Error::CorruptInput(format!(
                    "frame {} is {}x{}, expected {w}x{h}",
                    bad.index, bad.width, bad.height
                )));
            }
        }
        Ok(Self {
            frames,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// `(width, height)`; zero for an empty sequence.
    pub fn dimensions(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width, f.height))
    }

    /// Seconds since the first frame.
    pub fn timestamp(&self, position: usize) -> f64 {
        position as f64 / self.fps
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub source_id: String,
}

pub const META_FILE: &str = "meta.json";

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Loads a PNG-directory sequence or a `.y4m` file.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<VideoSequence> {
    let path = path.as_ref();
    if path.is_file() {
        return read_y4m(path);
    }
    if !path.is_dir() {
        return Err(Error::InputFormat(format!(
            "{} is neither a directory nor a file",
            path.display()
        )));
    }
    let meta_path = path.join(META_FILE);
    if !meta_path.is_file() {
        return Err(Error::InputFormat(format!(
            "missing {} in {}",
            META_FILE,
            path.display()
        )));
    }
    let meta: SequenceMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| Error::InputFormat(format!("{}: {e}", meta_path.display())))?;

    let mut numbered: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(path)? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let n: usize = stem
            .parse()
            .map_err(|_| Error::InputFormat(format!("bad frame name {}", p.display())))?;
        numbered.push((n, p));
    }
    if numbered.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no frames in {}",
            path.display()
        )));
    }
    numbered.sort();
    for (expected, (n, p)) in numbered.iter().enumerate() {
        if *n != expected {
            return Err(Error::CorruptInput(format!(
                "frame numbering gap or duplicate at {} (expected index {expected})",
                p.display()
            )));
        }
    }

    let mut frames = Vec::with_capacity(numbered.len());
    for (n, p) in numbered {
        let img = image::open(&p)
            .map_err(|e| Error::CorruptInput(format!("{}: {e}", p.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w != meta.width || h != meta.height {
            return Err(Error::CorruptInput(format!(
                "{} is {w}x{h}, manifest says {}x{}",
                p.display(),
                meta.width,
                meta.height
            )));
        }
        frames.push(Frame::new(n, w, h, img.into_raw())?);
    }
    VideoSequence::new(frames, meta.fps, meta.source_id.clone())
        .map_err(|e| Error::CorruptInput(e.to_string()))
}

/// Writes `meta.json` plus one PNG per frame, named by position.
pub fn save_sequence(seq: &VideoSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let werr = |e: &dyn std::fmt::Display| Error::Write(format!("{}: {e}", path.display()));
    fs::create_dir_all(path).map_err(|e| werr(&e))?;
    let (width, height) = seq.dimensions();
    let meta = SequenceMeta {
        fps: seq.fps,
        width,
        height,
        source_id: seq.source_id.clone(),
    };
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| werr(&e))?;
    fs::write(path.join(META_FILE), json).map_err(|e| werr(&e))?;
    for (pos, frame) in seq.frames.iter().enumerate() {
        write_png(&path.join(frame_file_name(pos)), frame).map_err(|e| werr(&e))?;
    }
    Ok(())
}

fn write_png(path: &Path, frame: &Frame) -> std::result::Result<(), String> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let file = fs::File::create(path).map_err(|e| e.to_string())?;
    let enc = PngEncoder::new_with_quality(
        std::io::BufWriter::new(file),
        CompressionType::Fast,
        FilterType::Adaptive,
    );
    enc.write_image(
        &frame.pixels,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| e.to_string())
}
