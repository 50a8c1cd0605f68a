use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::align::{diverged, draw_batch, finite, load_flows};
use super::checkpoint::{Checkpoint, Phase};
use super::metrics::MetricsLog;
use super::{
    adam_step, ensure_untouched, from_toml, rng_stream, stream, to_toml, AdamState, AlignArch,
    CondArch, CondConfig,
};
use crate::adversary::one_hot;
use crate::condsynth::{
    class_term, conditional_total_loss, critic_objective, encoder_loss, encoder_objective,
    latent_critic_loss, CondParts, ConditionEncoder, LatentCriticClassifier,
};
use crate::data::Dataset;
use crate::diffmath::{Module, Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CondReport {
    pub step: u64,
    /// `L_E` on the encoder step.
    pub encoder: f64,
    /// `L_CRITIC` on the critic step.
    pub critic: f64,
    /// `L_CLASSIFIER` (fake plus real cross-entropy) on the critic step.
    pub classifier: f64,
    /// `β`-weighted sum of the three.
    pub total: f64,
}

pub const COND_COLUMNS: [&str; 4] = ["encoder", "critic", "classifier", "total"];

impl CondReport {
    pub fn values(&self) -> [f64; 4] {
        [self.encoder, self.critic, self.classifier, self.total]
    }
}

#[derive(Serialize, Deserialize)]
struct CondSnapshot {
    arch: AlignArch,
    cond_arch: CondArch,
    cond: CondConfig,
}

/// State of the conditional phase. The flows are never updated.
pub struct CondTrainer {
    pub arch: AlignArch,
    pub cond_arch: CondArch,
    pub cfg: CondConfig,
    pub flow_s: FlowModel,
    pub flow_t: FlowModel,
    pub encoder: ConditionEncoder,
    pub critic: LatentCriticClassifier,
    adam_e: AdamState,
    adam_c: AdamState,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    deq_rng: ChaCha8Rng,
    step: u64,
}

fn check_source(source: &Dataset, classes: usize) -> Result<()> {
    source.ensure_trainable()?;
    source.ensure_labeled_source()?;
    if source.classes() != classes {
        return Err(Error::Config(format!(
            "source has {} classes, conditional networks expect {classes}",
            source.classes()
        )));
    }
    Ok(())
}

impl CondTrainer {
    pub fn new(
        align: &Checkpoint,
        cond_arch: CondArch,
        cfg: CondConfig,
        source: &Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        let (flow_s, flow_t, arch) = load_flows(align)?;
        let classes = cond_arch.encoder.classes();
        if cond_arch.latent_critic.classes() != classes {
            return Err(Error::Config(
                "encoder and latent critic disagree on the class count".into(),
            ));
        }
        check_source(source, classes)?;
        if source.item_shape() != flow_s.input_shape() {
            return Err(Error::ShapeMismatch {
                op: "train_conditional",
                left: source.item_shape().to_vec(),
                right: flow_s.input_shape(),
            });
        }
        let mut rng = rng_stream(cfg.seed, stream::INIT_COND);
        let encoder = ConditionEncoder::new("encoder", cond_arch.encoder.clone(), &mut rng)?;
        if encoder.latent_dim() != flow_s.latent_dim() {
            return Err(Error::Config(format!(
                "encoder emits {} latent dimensions, flows use {}",
                encoder.latent_dim(),
                flow_s.latent_dim()
            )));
        }
        let critic = LatentCriticClassifier::new(
            "latent_critic",
            cond_arch.latent_critic.clone(),
            &mut rng,
        )?;
        Ok(CondTrainer {
            adam_e: AdamState::for_module(cfg.lr, &encoder),
            adam_c: AdamState::for_module(cfg.lr, &critic),
            batch_rng: rng_stream(cfg.seed, stream::COND_BATCH),
            noise_rng: rng_stream(cfg.seed, stream::COND_NOISE),
            deq_rng: rng_stream(cfg.seed, stream::COND_DEQUANT),
            encoder,
            critic,
            flow_s,
            flow_t,
            arch,
            cond_arch,
            cfg,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Critic/classifier update, then encoder update, on one labeled batch.
    /// Generated latents are conditioned on the batch's own labels.
    pub fn cond_step(&mut self, source: &Dataset) -> Result<CondReport> {
        let step = self.step + 1;
        let batch = draw_batch(
            source,
            self.cfg.batch_size,
            &mut self.batch_rng,
            &mut self.deq_rng,
            self.arch.dequantize,
        )?;
        let labels = batch.labels.clone().expect("source batches are labeled");
        let real = self
            .flow_s
            .encode(&batch.x)
            .map_err(diverged(step, "source_latents"))?
            .z;
        let noise = Tensor::randn(
            vec![labels.len(), self.encoder.noise_dim()],
            &mut self.noise_rng,
        );
        let cond = one_hot(&labels, self.encoder.classes())?;
        let mut rep = CondReport {
            step,
            ..Default::default()
        };

        let tape = Tape::new();
        tape.freeze(self.encoder.param_ids());
        let fake = self
            .encoder
            .encode(&cond, tape.constant(noise.clone()))
            .map_err(diverged(step, "encoder"))?;
        let real_z = tape.constant(real);
        rep.critic = finite(
            step,
            "critic",
            latent_critic_loss(&self.critic, fake, real_z)?.to_scalar()?,
        )?;
        rep.classifier = finite(
            step,
            "classifier",
            class_term(&self.critic, fake, &labels)?
                .add(&class_term(&self.critic, real_z, &labels)?)?
                .to_scalar()?,
        )?;
        if let Some(obj) = critic_objective(&self.cfg, &self.critic, fake, real_z, &labels, &labels)
            .map_err(diverged(step, "critic"))?
        {
            tape.backward(obj).map_err(diverged(step, "critic"))?;
            ensure_untouched(&tape, &self.encoder, "critic step")?;
            self.critic.accumulate_grads(&tape);
            adam_step(&mut self.adam_c, &mut self.critic)?;
        }

        let tape = Tape::new();
        tape.freeze(self.critic.param_ids());
        let fake = self
            .encoder
            .encode(&cond, tape.constant(noise))
            .map_err(diverged(step, "encoder"))?;
        rep.encoder = finite(
            step,
            "encoder",
            encoder_loss(&self.critic, fake)?.to_scalar()?,
        )?;
        if let Some(obj) = encoder_objective(&self.cfg, &self.critic, fake, &labels)
            .map_err(diverged(step, "encoder"))?
        {
            tape.backward(obj).map_err(diverged(step, "encoder"))?;
            ensure_untouched(&tape, &self.critic, "encoder step")?;
            self.encoder.accumulate_grads(&tape);
            adam_step(&mut self.adam_e, &mut self.encoder)?;
        }
        rep.total = conditional_total_loss(
            &self.cfg,
            CondParts {
                encoder: rep.encoder,
                critic: rep.critic,
                classifier: rep.classifier,
            },
        )?;
        self.step = step;
        Ok(rep)
    }

    pub fn run(&mut self, source: &Dataset, out: Option<&Path>) -> Result<Vec<CondReport>> {
        let mut log = match out {
            Some(dir) => Some(MetricsLog::open(
                &dir.join("metrics_cond.csv"),
                &COND_COLUMNS,
            )?),
            None => None,
        };
        let start = Instant::now();
        let mut reports = Vec::new();
        while self.step < self.cfg.steps {
            let rep = self.cond_step(source)?;
            let last = rep.step == self.cfg.steps;
            if let Some(log) = &mut log {
                if rep.step % self.cfg.log_every == 0 || last {
                    log.append(rep.step, &rep.values(), start.elapsed().as_secs_f64())?;
                }
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if last || (every > 0 && rep.step % every == 0) {
                    self.to_checkpoint()?.save(&dir.join("cond.ckpt"))?;
                }
            }
            reports.push(rep);
        }
        Ok(reports)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            phase: Phase::Cond,
            step: self.step,
            tensors: Vec::new(),
            blobs: Vec::new(),
            config: to_toml(&CondSnapshot {
                arch: self.arch.clone(),
                cond_arch: self.cond_arch.clone(),
                cond: self.cfg.clone(),
            })?,
        };
        ck.push_module(&self.flow_s);
        ck.push_module(&self.flow_t);
        ck.push_module(&self.encoder);
        ck.push_module(&self.critic);
        ck.push_adam("encoder", &self.adam_e);
        ck.push_adam("latent_critic", &self.adam_c);
        ck.push_rng("cond_batch", &self.batch_rng);
        ck.push_rng("cond_noise", &self.noise_rng);
        ck.push_rng("cond_dequant", &self.deq_rng);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.phase != Phase::Cond {
            return Err(Error::Checkpoint(
                "expected a conditional checkpoint".into(),
            ));
        }
        let snap: CondSnapshot = from_toml(&ck.config)?;
        let (flow_s, flow_t, _) = load_flows(ck)?;
        let mut rng = rng_stream(snap.cond.seed, stream::INIT_COND);
        let mut encoder =
            ConditionEncoder::new("encoder", snap.cond_arch.encoder.clone(), &mut rng)?;
        let mut critic = LatentCriticClassifier::new(
            "latent_critic",
            snap.cond_arch.latent_critic.clone(),
            &mut rng,
        )?;
        ck.restore_module(&mut encoder)?;
        ck.restore_module(&mut critic)?;
        Ok(CondTrainer {
            adam_e: ck.adam("encoder")?,
            adam_c: ck.adam("latent_critic")?,
            batch_rng: ck.rng("cond_batch")?,
            noise_rng: ck.rng("cond_noise")?,
            deq_rng: ck.rng("cond_dequant")?,
            encoder,
            critic,
            flow_s,
            flow_t,
            arch: snap.arch,
            cond_arch: snap.cond_arch,
            cfg: snap.cond,
            step: ck.step,
        })
    }
}

/// The trained encoder of a conditional checkpoint.
pub fn load_encoder(ck: &Checkpoint) -> Result<ConditionEncoder> {
    Ok(CondTrainer::from_checkpoint(ck)?.encoder)
}

/// Phase 2 from an alignment checkpoint. `target`, when given, is only
/// checked: labeled target data is refused.
pub fn train_conditional(
    align: &Checkpoint,
    cond_arch: CondArch,
    cfg: CondConfig,
    source: &Dataset,
    target: Option<&Dataset>,
    out: Option<&Path>,
) -> Result<CondTrainer> {
    if let Some(t) = target {
        t.ensure_trainable()?;
    }
    let mut tr = CondTrainer::new(align, cond_arch, cfg, source)?;
    tr.run(source, out)?;
    Ok(tr)
}
