//! Transformer volumetric super-resolution for anisotropic CT.
//!
//! Everything here is pure computation on in-memory data and builds without
//! `std`: tensors with reverse-mode differentiation, swin transformer layers,
//! the TVSRN network and its ablation variants, training, sliding-window
//! inference, image-quality metrics and synthetic phantoms. File formats and
//! the command line live in the `tvsr` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod infer;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod swin;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
