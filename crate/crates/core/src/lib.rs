//! Optic-disc-anchored stabilization of hand-held fundus retina videos.
//!
//! The pipeline has two stages. Spatio-temporal localization
//! ([`detection`], [`stl`]) finds the optic disc region (ODR) per frame,
//! drops frames around huge jumps and keeps clips long enough to show a
//! venous pulsation cycle. Noise-aware template matching ([`natm`]) then
//! registers every clip frame against an ODR-sized template taken from the
//! sharpest frame of the smoothest period, ignoring specular reflections,
//! and crops a fixed window around the disc.
//!
//! [`metrics`] scores footage by the variance of block-matching optical
//! flow ([`flow`]), and [`synth`] renders deterministic synthetic fundus
//! videos with known ground truth.

pub mod detection;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod natm;
pub mod pipeline;
pub mod stl;
pub mod synth;
pub mod video_io;

pub use error::{Error, Result};
