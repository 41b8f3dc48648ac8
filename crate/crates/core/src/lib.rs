pub mod baselines;
pub mod checkpoint;
pub mod coding;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, SubsetDraw, Var};
pub use nn::{FfnShape, FfnStack, ParamId, ParamStore};
pub use optim::AdamState;
pub use tensor::Tensor;
