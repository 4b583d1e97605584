//! Distributed neural architecture search.
//!
//! Networks are declared as [`Descriptor`]s, assessed by evaluators that
//! train them locally or data-parallel over an [`Environment`], fed by the
//! [`curator`], and searched with a generational genetic algorithm.

pub mod analysis;
pub mod comms;
pub mod config;
pub mod curator;
pub mod descriptor;
pub mod error;
pub mod evaluator;
pub mod rng;
pub mod runlog;
pub mod scalar;
pub mod search;
pub mod tensor;

pub use comms::Environment;
pub use config::{ExperimentConfig, Mode};
pub use descriptor::{compile, Descriptor, Network, ValidationReport};
pub use error::{Error, Result};
pub use evaluator::{EvaluationConfig, EvaluationResult};
pub use runlog::RunLog;
pub use scalar::Scalar;
pub use search::{Chromosome, GaConfig};
pub use tensor::{LayerKind, LayerState, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Network64 = Network<f64>;
pub type Network32 = Network<f32>;
pub type LayerState64 = LayerState<f64>;
pub type DataSplit64 = curator::DataSplit<f64>;
