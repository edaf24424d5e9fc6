//! Video question answering over predicted situation hyper-graphs.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix it
//! to `f64`, which is what the harness and tests use.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod hypergraph;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};
pub use params::ParamId;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Tape = tape::Tape<f64>;
pub type Var<'t> = tape::Var<'t, f64>;
pub type TrainOutcome = train::TrainOutcome<f64>;
