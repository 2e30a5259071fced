//! Prototypical mixture-of-experts layers for diffusion transformers.
//!
//! The crate contains a small reverse-mode autodiff engine, the routed
//! expert layer with conditional and prototypical routing, comparison
//! routers, the training objectives, a miniature DiT backbone, diffusion
//! samplers, a synthetic class-conditional dataset, specialization metrics
//! and the experiment harness that ties them together.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::type_complexity)]

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod moe;
pub mod params;
pub mod rng;
pub mod router;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
