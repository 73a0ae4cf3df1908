//! Learning-to-reweight with optimized validation splits.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the experiment pipeline uses.

pub mod datagen;
pub mod diffcore;
pub mod dro_oracle;
pub mod error;
pub mod experiment;
pub mod hardness;
pub mod metrics;
pub mod models;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Tape = diffcore::Tape<f64>;
pub type ParamSet = models::ParamSet<f64>;
pub type Mlp = models::Mlp<f64>;
pub type MetaNet = models::MetaNet<f64>;
pub type SplitterNet = models::SplitterNet<f64>;
pub type Batch = trainer::meta::Batch<f64>;
pub type TrainerState = trainer::TrainerState<f64>;
