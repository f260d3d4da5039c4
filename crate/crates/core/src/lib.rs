//! Probabilistic multi-modal motion forecasting on SO(3).

pub mod error;
pub mod rotmath;
pub mod so3stats;
pub mod diffcore;
pub mod tglayers;
pub mod model;
pub mod kindata;
pub mod training;
pub mod evaluation;

pub use error::{Error, Result};
