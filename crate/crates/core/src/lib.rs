pub mod cli;
pub mod conditional_predict;
pub mod error;
pub mod estimation;
pub mod imputation;
pub mod mcmc;
pub mod model_core;
pub mod simstudy;
pub mod special_fns;

pub use error::{Error, Result};
