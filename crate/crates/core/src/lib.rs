//! Polynomial-representation diffusion for multi-agent traffic scenes.
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod net;
pub mod poly;
pub mod scene;

pub use error::{Error, Result};
