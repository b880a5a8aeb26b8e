//! Linear attention with elementwise, randomized and learnable (SARA) feature
//! maps, exact softmax references, estimator diagnostics, distillation of a
//! softmax teacher into a linear student, and a scaling benchmark.

pub mod attention;
pub mod error;
pub mod feature_maps;
pub mod navdemo;
pub mod numerics;
pub mod theory;
pub mod uptrain;

pub use error::{Result, SaraError};
