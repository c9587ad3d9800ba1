//! Instruction-conditioned procedural level generation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod env;
pub mod error;
pub mod evalbench;
pub mod fitness;
pub mod instruction;
pub mod level;
pub mod neural;
pub mod ppo;
pub mod seeding;

pub use error::{Error, Result};
