//! Frame-aware flow matching for short videos.
//!
//! A small f64 reverse-mode autodiff engine drives a per-frame-conditioned
//! transformer velocity field. Each frame of a video carries its own
//! timestep, so one model covers unconditional generation, image-to-video,
//! start/end interpolation, completion and extension purely through the
//! per-frame noise plan used at sampling time.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod timestep;
pub mod train;

pub use error::{Error, Result};
pub use model::{Checkpoint, ModelConfig};
pub use tensor::Tensor;
