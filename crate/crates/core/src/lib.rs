//! Liquid sensing on mutual-capacitance touchscreens.
//!
//! The crate covers the full path from controller heatmaps to liquid
//! classes: preprocessing ([`heatmap`]), screen calibration
//! ([`calibration`]), droplet and deposit detection ([`detection`]),
//! capacitance models and fits ([`physics`]), a deterministic controller
//! simulator ([`simulator`]), classifiers ([`learn`]) and the JSON request
//! handler behind the local viewer endpoint ([`serve`]).

pub mod calibration;
pub mod detection;
pub mod error;
pub mod heatmap;
pub mod learn;
pub mod physics;
pub mod serve;
pub mod simulator;

pub use error::{Error, Result};
pub use heatmap::{DeviceProfile, Frame, Session};
