pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod interest;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod simdata;
pub mod training;

pub use error::{Error, Result};
