//! Two-phase training: flow alignment, then conditional synthesis with
//! the flows frozen.

mod adam;
mod align;
mod checkpoint;
mod cond;
mod metrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use align::{
    load_flows, train_alignment, AlignReport, AlignTrainer, Batch, FlowSide, MleTrainer,
    ALIGN_COLUMNS,
};
pub use checkpoint::{Checkpoint, Phase, FORMAT_VERSION, MAGIC};
pub use cond::{load_encoder, train_conditional, CondReport, CondTrainer, COND_COLUMNS};
pub use metrics::{strip_wall_time, MetricsLog};

use crate::adversary::CriticConfig;
use crate::condsynth::{EncoderConfig, LatentCriticConfig};
use crate::diffmath::{Module, Tape};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Config(format!(
            "{name} must be a finite non-negative weight, got {w}"
        )));
    }
    Ok(())
}

/// Phase-1 hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// MLE weights.
    pub lambda_s: f64,
    pub lambda_t: f64,
    /// Domain-confusion weights.
    pub gamma_s: f64,
    pub gamma_t: f64,
    /// Weight of the sample-space adversarial terms (both directions).
    pub adv_weight: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Critic updates per flow update.
    pub critic_steps: usize,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda_s: 1.0,
            lambda_t: 1.0,
            gamma_s: 0.1,
            gamma_t: 0.1,
            adv_weight: 1.0,
            lr: 1e-6,
            batch_size: 64,
            steps: 1000,
            critic_steps: 1,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [
            ("lambda_s", self.lambda_s),
            ("lambda_t", self.lambda_t),
            ("gamma_s", self.gamma_s),
            ("gamma_t", self.gamma_t),
            ("adv_weight", self.adv_weight),
        ] {
            check_weight(n, w)?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Phase-2 hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondConfig {
    pub beta_e: f64,
    pub beta_cr: f64,
    pub beta_cl: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for CondConfig {
    fn default() -> Self {
        CondConfig {
            beta_e: 1.0,
            beta_cr: 1.0,
            beta_cl: 1.0,
            lr: 2e-5,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl CondConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [
            ("beta_e", self.beta_e),
            ("beta_cr", self.beta_cr),
            ("beta_cl", self.beta_cl),
        ] {
            check_weight(n, w)?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Networks of the alignment phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignArch {
    pub flow_source: FlowConfig,
    pub flow_target: FlowConfig,
    pub critic_source: CriticConfig,
    pub critic_target: CriticConfig,
    pub dal_hidden: usize,
    /// Samples are 8-bit pixels that get dequantized before the flows.
    #[serde(default)]
    pub dequantize: bool,
}

impl AlignArch {
    /// Low-dimensional domains: 8 couplings per flow, 64-unit nets.
    pub fn vector(dim: usize) -> Self {
        AlignArch {
            flow_source: FlowConfig::vector(dim, 8, 64),
            flow_target: FlowConfig::vector(dim, 8, 64),
            critic_source: CriticConfig::vector(dim, 64),
            critic_target: CriticConfig::vector(dim, 64),
            dal_hidden: 64,
            dequantize: false,
        }
    }

    /// Image domains with the full-size RealNVP and patch critics.
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        let mut flow = FlowConfig::image_default();
        if let FlowConfig::Image {
            channels: c,
            height: h,
            width: w,
            ..
        } = &mut flow
        {
            (*c, *h, *w) = (channels, height, width);
        }
        AlignArch {
            flow_source: flow.clone(),
            flow_target: flow,
            critic_source: CriticConfig::patch(channels, height, width),
            critic_target: CriticConfig::patch(channels, height, width),
            dal_hidden: 64,
            dequantize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.flow_source.dim(), self.flow_target.dim());
        if a != b {
            return Err(Error::Config(format!(
                "flows must share a latent dimension, got {a} and {b}"
            )));
        }
        Ok(())
    }
}

/// Networks of the conditional phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondArch {
    pub encoder: EncoderConfig,
    pub latent_critic: LatentCriticConfig,
}

impl CondArch {
    pub fn vector(classes: usize, latent_dim: usize) -> Self {
        CondArch {
            encoder: EncoderConfig::vector(classes, latent_dim),
            latent_critic: LatentCriticConfig::vector(latent_dim, classes),
        }
    }

    pub fn image(classes: usize, channels: usize, height: usize, width: usize) -> Self {
        CondArch {
            encoder: EncoderConfig::image(classes, channels, height, width),
            latent_critic: LatentCriticConfig::image(classes, channels, height, width),
        }
    }
}

/// Independent RNG streams derived from one seed.
pub(crate) mod stream {
    pub const INIT_FLOW_S: u64 = 1;
    pub const INIT_FLOW_T: u64 = 2;
    pub const INIT_CRITICS: u64 = 3;
    pub const BATCH_S: u64 = 4;
    pub const BATCH_T: u64 = 5;
    pub const NOISE_S: u64 = 6;
    pub const NOISE_T: u64 = 7;
    pub const INIT_COND: u64 = 8;
    pub const COND_BATCH: u64 = 9;
    pub const COND_NOISE: u64 = 10;
    pub const COND_DEQUANT: u64 = 11;
}

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Fails if any of `opponents`' parameters picked up a gradient on `tape`.
pub(crate) fn ensure_untouched<M: Module + ?Sized>(
    tape: &Tape,
    opponents: &M,
    who: &str,
) -> Result<()> {
    for p in opponents.params() {
        if tape.param_grad(p.id()).is_some() {
            return Err(Error::Invalid(format!(
                "update would touch opponent parameter `{}` ({who})",
                p.name()
            )));
        }
    }
    Ok(())
}

pub(crate) fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(e.to_string()))
}

pub(crate) fn from_toml<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    toml::from_str(s).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))
}
