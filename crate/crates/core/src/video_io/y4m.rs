//! Minimal YUV4MPEG2 reader (C420 variants and C444, 8-bit).

use std::path::Path;

use super::{Frame, VideoSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Chroma {
    C420,
    C444,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InputFormat(msg.into())
}

pub fn read_y4m(path: &Path) -> Result<VideoSequence> {
    let bytes = std::fs::read(path)?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    parse_y4m(&bytes, &id)
}

fn split_line(buf: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = buf
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated y4m header line"))?;
    Ok((&buf[..nl], &buf[nl + 1..]))
}

pub fn parse_y4m(bytes: &[u8], source_id: &str) -> Result<VideoSequence> {
    let (header, mut rest) = split_line(bytes)?;
    let header = std::str::from_utf8(header).map_err(|_| bad("non-ascii y4m header"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(bad("missing YUV4MPEG2 signature"));
    }
    let (mut width, mut height, mut fps) = (0usize, 0usize, None);
    let mut chroma = Chroma::C420;
    for tok in tokens.filter(|t| !t.is_empty()) {
        let (tag, val) = tok.split_at(1);
        match tag {
            "W" => width = val.parse().map_err(|_| bad(format!("bad width {val}")))?,
            "H" => height = val.parse().map_err(|_| bad(format!("bad height {val}")))?,
            "F" => {
                let (n, d) = val
                    .split_once(':')
                    .ok_or_else(|| bad(format!("bad frame rate {val}")))?;
                let n: f64 = n
                    .parse()
                    .map_err(|_| bad(format!("bad frame rate {val}")))?;
                let d: f64 = d
                    .parse()
                    .map_err(|_| bad(format!("bad frame rate {val}")))?;
                if d <= 0.0 || n <= 0.0 {
                    return Err(bad(format!("bad frame rate {val}")));
                }
                fps = Some(n / d);
            }
            "C" => {
                chroma = if val.starts_with("420") {
                    Chroma::C420
                } else if val == "444" {
                    Chroma::C444
                } else {
                    return Err(bad(format!("unsupported colorspace C{val}")));
                }
            }
            _ => {}
        }
    }
    if width == 0 || height == 0 {
        return Err(bad("y4m header lacks dimensions"));
    }
    let fps = fps.ok_or_else(|| bad("y4m header lacks frame rate"))?;
    let (cw, ch) = match chroma {
        Chroma::C420 => (width.div_ceil(2), height.div_ceil(2)),
        Chroma::C444 => (width, height),
    };
    let frame_len = width * height + 2 * cw * ch;

    let mut frames = Vec::new();
    while !rest.is_empty() {
        let (fh, body) = split_line(rest)?;
        if !fh.starts_with(b"FRAME") {
            return Err(Error::CorruptInput("expected FRAME marker".into()));
        }
        if body.len() < frame_len {
            return Err(Error::CorruptInput(format!(
                "truncated frame {}: {} of {frame_len} bytes",
                frames.len(),
                body.len()
            )));
        }
        let (y, u, v) = (
            &body[..width * height],
            &body[width * height..width * height + cw * ch],
            &body[width * height + cw * ch..frame_len],
        );
        let idx = frames.len();
        let frame = Frame::from_fn(idx, width, height, |x, yy| {
            let (cx, cy) = match chroma {
                Chroma::C420 => (x / 2, yy / 2),
                Chroma::C444 => (x, yy),
            };
            ycbcr_to_rgb(y[yy * width + x], u[cy * cw + cx], v[cy * cw + cx])
        });
        frames.push(frame);
        rest = &body[frame_len..];
    }
    if frames.is_empty() {
        return Err(Error::EmptyInput("y4m stream has no frames".into()));
    }
    VideoSequence::new(frames, fps, source_id)
}

/// BT.601 studio-range YCbCr to RGB.
fn ycbcr_to_rgb(y: u8, cb: u8, cr: u8) -> [u8; 3] {
    let y = 1.164 * (y as f64 - 16.0);
    let cb = cb as f64 - 128.0;
    let cr = cr as f64 - 128.0;
    let c = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    [
        c(y + 1.596 * cr),
        c(y - 0.392 * cb - 0.813 * cr),
        c(y + 2.017 * cb),
    ]
}
