pub mod autograd;
pub mod balance;
pub mod baselines;
pub mod config;
pub mod ctn;
pub mod data;
pub mod error;
pub mod experiment;
pub mod jdn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod snapshot;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;
