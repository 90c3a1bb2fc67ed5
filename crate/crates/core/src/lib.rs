//! Core of the forward-once structural adaptation recommender.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! tensors and a reverse-mode tape, the gated stacked-block backbones, the
//! structure controller, the structural weight mapper, joint training,
//! dataset preprocessing, ranking metrics and the cloud-side assembly of
//! per-device sub-models. File formats, the CLI and the fleet simulator
//! live in the `fofa` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod assembly;
pub mod autodiff;
pub mod backbone;
pub mod controller;
pub mod data;
pub mod error;
pub mod eval;
pub mod mapper;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
