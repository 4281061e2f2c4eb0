pub mod autodiff;
pub mod error;
pub mod layers;
pub mod net;

pub use error::{Error, Result};
pub mod data;
pub mod training;
pub mod baselines;
pub mod retrieval;
pub mod pipeline;
pub mod selftest;
pub mod cli;
