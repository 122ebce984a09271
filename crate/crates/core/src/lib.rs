//! Masked siamese network pretraining for small vision transformers, plus the
//! frozen-feature, fine-tuning, temporal and low-shot evaluation protocols.
//!
//! Numeric modules are generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below pin the common instantiations.

pub mod checkpoint;
pub mod dataio;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod num;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
pub use num::Scalar;

pub type EncoderParamsF32 = encoder::EncoderParams<f32>;
pub type EncoderParamsF64 = encoder::EncoderParams<f64>;
pub type PrototypeBankF32 = objective::PrototypeBank<f32>;
pub type PrototypeBankF64 = objective::PrototypeBank<f64>;
pub type TrainStateF32 = trainer::TrainState<f32>;
pub type TrainStateF64 = trainer::TrainState<f64>;
pub type MSTCNParamsF32 = downstream::MSTCNParams<f32>;
pub type MSTCNParamsF64 = downstream::MSTCNParams<f64>;
