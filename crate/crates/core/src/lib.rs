//! Two invertible generators mapping a visible and an infrared image domain
//! onto one shared Gaussian latent space.
//!
//! * [`tensor`]: f64 tensors, reverse-mode differentiation, Adam.
//! * [`flow`]: invertible layers, the flow generators and their losses.
//! * [`adversaries`]: identity encoders, modality discriminators.
//! * [`trainer`]: the alternating generator/discriminator loop.
//! * [`generation`]: latent interpolation and cross-modality translation.
//! * [`data`]: synthetic datasets, PPM/PNG I/O, manifests.
//! * [`reid`]: Rank-1/mAP retrieval and the expansion sweep.

// Index loops mirror the formulas; `!(x > y)` comparisons deliberately reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adversaries;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod generation;
pub mod model;
pub mod reid;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
