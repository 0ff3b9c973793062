//! Dual-stream no-reference quality assessment for stained tissue patches.
//!
//! The crate is layered bottom-up: a small tensor/autodiff engine, Haar
//! wavelets and the WKV kernel, the global and cellular feature streams,
//! fusion and regression heads, losses and the training loop, evaluation
//! statistics, and a synthetic data generator with PPM/PGM I/O.

pub mod autodiff;
pub mod cellular;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod global;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod wkv;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{Bindings, ParamStore};
pub use tensor::{Real, Tensor};
