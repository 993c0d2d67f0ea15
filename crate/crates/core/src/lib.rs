//! Weakly-supervised crowd counting with a pyramid vision transformer.
//!
//! A four-stage transformer backbone turns each crop into a feature
//! pyramid; the head pools every level, projects and concatenates them and
//! regresses one count per crop. Everything runs on a small `f64` tensor
//! library with tape-based reverse-mode gradients.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{DataConfig, LossConfig, LossGranularity, ModelConfig, OptimConfig, RunConfig};
pub use error::{Error, Result};
pub use kernels::gelu;
pub use model::CrowdFormer;
pub use params::{ParamId, ParamStore};
pub use tape::{GeluApprox, Gradients, Tape, Var};
pub use tensor::Tensor;
