//! Gradient-based neuron attribution, selection and ablation on a
//! self-contained micro-transformer trained over a synthetic culture world.

pub mod attribution;
pub mod error;
pub mod eval;
pub mod model;
pub mod neuron;
pub mod pipeline;
pub mod selection;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod world;

pub use attribution::{ScoreTable, Variant};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use neuron::{Family, NeuronId, NeuronMask, TapKey};
pub use tensor::Tensor;
