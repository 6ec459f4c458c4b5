//! Desk-scale CNN training toolkit.
//!
//! Everything runs on CPU with reproducible arithmetic: a small autodiff
//! tape, a residual backbone with optional convolutional attention, losses
//! that reweight rare classes and mix features by predicted uncertainty,
//! and a training loop whose outputs are byte-stable for a fixed seed.

pub mod backbone;
pub mod cbam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
