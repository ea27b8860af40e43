//! Continual object detection toolkit: a desk-scale one-stage detector,
//! weight mining and gradient-penalty hooks, activation-based layer
//! freezing, experience replay, detection and continual-learning metrics,
//! and a config-driven experiment runner.

pub mod bbox;
pub mod data;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod optim;
pub mod plot;
pub mod replay;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
