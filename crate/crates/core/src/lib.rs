#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ball;
pub mod bounds;
pub mod estimator;
pub mod exploration;
pub mod experiments;
pub mod model;
pub mod simulator;
pub mod stats;
pub mod svg;
pub use error::{Error, Result};
