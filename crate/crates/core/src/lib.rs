//! Desk-scale laboratory for compressing Mixture-of-Experts models and
//! recalibrating their routers.

pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod kd;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scenario;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
