//! Reinforcement-learning-guided sample consensus.

pub mod agent;
pub mod bench;
pub mod diffmath;
pub mod env;
pub mod error;
pub mod geometry;
pub mod scenes;

pub use error::{Error, Result};
