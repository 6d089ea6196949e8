//! Reverse-mode autodiff, norm-fixed SGD, capped-gain classification heads
//! and a budgeted hyper-parameter tuner, all on the CPU in `f64`.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod tuner;

pub use error::{Error, Result};
pub use tensor::Tensor;
