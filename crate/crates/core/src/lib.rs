pub mod augment;
pub mod autodiff;
pub mod backtest;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod fastmath;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod runtime;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
