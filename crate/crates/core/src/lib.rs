//! Dynamics-aligned cross-domain reinforcement learning: a diffusion
//! Schrödinger bridge between source and target transitions, a learned
//! reward model, and soft actor-critic with behaviour-cloning initialization.

pub mod agent;
pub mod bridge;
pub mod container;
pub mod datasets;
pub mod envsim;
pub mod error;
pub mod reward;
pub mod rng;
pub mod stats;
pub mod tensornet;

pub use error::{Error, Result};
pub use rng::Rng;
