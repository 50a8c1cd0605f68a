//! Config-driven runs on top of `cdcgen`: data generation, both training
//! phases, translation, synthesis, evaluation and the gradient audit.

pub mod commands;
pub mod config;
pub mod domains;

pub use commands::{Direction, Suite};
pub use config::{DataSpec, EvalSpec, Preset, RunConfig};
pub use domains::Domains;
