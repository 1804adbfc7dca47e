//! Event-driven single-channel EEG sleep staging.
//!
//! The pipeline converts a continuous recording into sparse bipolar event
//! streams (adaptive multi-scale delta modulation with residual compensation),
//! selects encoder thresholds under reconstruction-fidelity constraints,
//! groups events into 30 s epochs with a temporal validity mask, and runs a
//! hierarchical event-based classifier: multi-scale depthwise-separable
//! convolution branches with channel gating, masked local attention across
//! neighbouring epochs, and a leaky per-epoch state with reset on
//! discontinuity. A companion accounting module reports dense FLOPs and
//! sparsity-adjusted effective operations.

pub mod dsp;
pub mod efficiency;
pub mod encoder;
pub mod network;
pub mod operating_point;
pub mod s2e;
pub mod signal_io;
pub mod training;

mod error;

pub use error::{Error, Result};
