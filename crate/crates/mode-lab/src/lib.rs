//! Training and evaluation laboratory for mixture-of-experts low-rank
//! adaptation of a small frozen transformer on synthetic multi-task
//! binary classification.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod params;
pub mod routing;
pub mod synthdata;
pub mod training;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
