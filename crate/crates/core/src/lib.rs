//! Relational experience replay for continual learning.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision types the harness uses.

pub mod buffer;
pub mod classes;
pub mod error;
pub mod harness;
pub mod loss;
pub mod main_net;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod rrn;
pub mod scalar;
pub mod stream;
pub mod tensor;
pub mod trainer;

pub use classes::ClassSet;
pub use error::{Error, Result};
pub use objectives::{BaseLoss, ClassContext};
pub use scalar::Scalar;
pub use trainer::{TrainerConfig, Variant};

pub type Tensor = tensor::Tensor<f64>;
pub type ParamVector = tensor::ParamVector<f64>;
pub type MainNet = main_net::MainNet<f64>;
pub type RelationNet = rrn::RelationNet<f64>;
pub type ReservoirBuffer = buffer::ReservoirBuffer<f64>;
pub type BufferBatch = buffer::BufferBatch<f64>;
pub type PairBatch = objectives::PairBatch<f64>;
pub type Learner = trainer::Learner<f64>;
pub type MetaGradient = trainer::MetaGradient<f64>;
pub type TaskStream = stream::TaskStream<f64>;
pub type Task = stream::Task<f64>;
