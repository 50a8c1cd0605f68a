//! Cross-domain conditional generation.
//!
//! Two normalizing flows map a labeled source domain and an unlabeled
//! target domain into one shared Gaussian latent space. Adversarial critics
//! and a latent domain classifier align the two embeddings; a conditional
//! encoder then learns class-conditional latents from source labels alone,
//! and the target flow's inverse turns them into labeled target samples.

pub mod adversary;
pub mod audit;
pub mod condsynth;
pub mod data;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
