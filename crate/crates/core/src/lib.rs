//! Cross-attentive fusion of local visual concepts with a global image
//! feature, trained through top-k multiple-instance pooling over a
//! concept-by-class activation map.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod interpret;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
