//! Simulator and training stack for a two-vehicle tunnel search task.
//!
//! An aerial scout explores a forked mine tunnel for a hidden target while
//! a ground vehicle learns to follow it. The crate provides the world
//! geometry and ray casting, vehicle dynamics, gym-style environments,
//! a small scalar-generic neural network library with a clipped-surrogate
//! on-policy trainer and a curiosity module, plus evaluation, plotting and
//! checkpointing utilities. Everything is deterministic given a seed.

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod icm;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod trainer;
pub mod vehicles;
pub mod world;

pub use error::{Error, Result};
