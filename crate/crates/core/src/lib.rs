pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mha;
pub mod model;
pub mod moe;
pub mod optim;
pub mod rng;
pub mod routing;
pub mod sparsity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
