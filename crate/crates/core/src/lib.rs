//! Diffusion policies whose conditional guidance is gated by a sequential
//! likelihood-ratio test between two denoising heads.

// `!(x > 0.0)` also rejects NaN; index loops mirror the maths in the kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod data;
pub mod env;
pub mod error;
pub mod exec;
pub mod io;
pub mod labeling;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
