pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{RngStream, Tensor};
