//! Multimodal sentiment regression where pretrained unimodal branches steer
//! a per-sample attention fusion, built on a small float64 autodiff engine.

pub mod autograd;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod snapshot;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{KudaError, Result};
pub use model::{Features, KudaModel, Labels, ModelConfig, Prediction};
pub use params::{ParamStore, Session};
pub use pipeline::{Ablation, TrainConfig};
pub use tensor::Tensor;
