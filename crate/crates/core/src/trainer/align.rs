use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Phase};
use super::metrics::MetricsLog;
use super::{
    adam_step, ensure_untouched, from_toml, rng_stream, stream, to_toml, AdamState, AlignArch,
    AlignConfig,
};
use crate::adversary::{adv_critic_loss, adv_generator_loss, dal_loss, Critic, DomainClassifier};
use crate::data::Dataset;
use crate::diffmath::{Module, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{
    dequantize, standard_normal_log_density, FlowConfig, FlowModel, FlowOutput, LOGIT_ALPHA,
};

/// One minibatch in flow input space.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    /// Per-sample log-determinant of the dequantization, when applied.
    pub preprocess_log_det: Option<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn mean_preprocess_log_det(&self) -> f64 {
        self.preprocess_log_det
            .as_ref()
            .map_or(0.0, |v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Draws `n` indices uniformly with replacement and applies preprocessing.
pub(crate) fn draw_batch(
    data: &Dataset,
    n: usize,
    batch_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    dequant: bool,
) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::Invalid(format!("dataset `{}` is empty", data.name)));
    }
    let idx: Vec<usize> = (0..n)
        .map(|_| batch_rng.random_range(0..data.len()))
        .collect();
    let picked = data.select(&idx);
    let labels = picked.labels().map(|l| l.to_vec());
    let x = picked.samples().clone();
    if dequant {
        let d = dequantize(&x, LOGIT_ALPHA, noise_rng)?;
        Ok(Batch {
            x: d.y,
            preprocess_log_det: Some(d.log_det),
            labels,
        })
    } else {
        Ok(Batch {
            x,
            preprocess_log_det: None,
            labels,
        })
    }
}

/// Negative log-likelihood in bits per dimension of a batch, including
/// the preprocessing log-determinant.
pub(crate) fn nll_bits<'t>(out: &FlowOutput<'t>, batch: &Batch) -> Result<Var<'t>> {
    let d = batch.x.item_len() as f64;
    standard_normal_log_density(out.z)?
        .add(&out.log_det)?
        .mean()?
        .add_scalar(batch.mean_preprocess_log_det())?
        .mul_scalar(-1.0 / (d * std::f64::consts::LN_2))
}

pub(crate) fn weighted<'t>(acc: Option<Var<'t>>, w: f64, term: Var<'t>) -> Result<Option<Var<'t>>> {
    if w == 0.0 {
        return Ok(acc);
    }
    let t = term.mul_scalar(w)?;
    Ok(Some(match acc {
        Some(a) => a.add(&t)?,
        None => t,
    }))
}

/// Maps numeric failures to a divergence report naming the component.
pub(crate) fn diverged(step: u64, component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::FlowNonFinite { .. } | Error::Domain { .. } => {
            Error::Diverged {
                step,
                component: component.to_string(),
            }
        }
        other => other,
    }
}

pub(crate) fn finite(step: u64, component: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step,
            component: component.to_string(),
        })
    }
}

/// One flow with its optimizer and sampling streams.
#[derive(Clone, Debug)]
pub struct FlowSide {
    pub flow: FlowModel,
    pub adam: AdamState,
    batch_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    dequantize: bool,
}

impl FlowSide {
    /// `side` 0 is the source domain, 1 the target.
    fn new(
        cfg: &FlowConfig,
        dequant: bool,
        align: &AlignConfig,
        side: usize,
        data: &Dataset,
    ) -> Result<Self> {
        let (name, init, batch, noise) = side_streams(side);
        let mut rng = rng_stream(align.seed, init);
        let flow = FlowModel::new(name, cfg.clone(), &mut rng)?;
        let mut s = FlowSide {
            adam: AdamState::for_module(align.lr, &flow),
            flow,
            batch_rng: rng_stream(align.seed, batch),
            noise_rng: rng_stream(align.seed, noise),
            dequantize: dequant,
        };
        let first = s.sample(data, align.batch_size)?;
        s.flow.data_init(&first.x)?;
        Ok(s)
    }

    pub fn sample(&mut self, data: &Dataset, n: usize) -> Result<Batch> {
        draw_batch(
            data,
            n,
            &mut self.batch_rng,
            &mut self.noise_rng,
            self.dequantize,
        )
    }
}

fn side_streams(side: usize) -> (&'static str, u64, u64, u64) {
    if side == 0 {
        (
            "flow_s",
            stream::INIT_FLOW_S,
            stream::BATCH_S,
            stream::NOISE_S,
        )
    } else {
        (
            "flow_t",
            stream::INIT_FLOW_T,
            stream::BATCH_T,
            stream::NOISE_T,
        )
    }
}

/// Plain maximum-likelihood training of a single flow, drawing from the
/// same streams the alignment trainer uses for that domain.
pub struct MleTrainer {
    pub side: FlowSide,
    pub lambda: f64,
    batch_size: usize,
    step: u64,
}

impl MleTrainer {
    pub fn new(
        cfg: &FlowConfig,
        dequant: bool,
        align: &AlignConfig,
        side: usize,
        data: &Dataset,
    ) -> Result<Self> {
        align.validate()?;
        data.ensure_trainable()?;
        Ok(MleTrainer {
            side: FlowSide::new(cfg, dequant, align, side, data)?,
            lambda: if side == 0 {
                align.lambda_s
            } else {
                align.lambda_t
            },
            batch_size: align.batch_size,
            step: 0,
        })
    }

    /// One update; returns the batch NLL in bits/dim before the update.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        self.step += 1;
        let step = self.step;
        let batch = self.side.sample(data, self.batch_size)?;
        let tape = Tape::new();
        let out = self
            .side
            .flow
            .forward(tape.constant(batch.x.clone()))
            .map_err(diverged(step, "nll"))?;
        let nll = nll_bits(&out, &batch).map_err(diverged(step, "nll"))?;
        let value = finite(step, "nll", nll.to_scalar()?)?;
        if let Some(loss) = weighted(None, self.lambda, nll)? {
            tape.backward(loss).map_err(diverged(step, "nll"))?;
            self.side.flow.accumulate_grads(&tape);
            adam_step(&mut self.side.adam, &mut self.side.flow)?;
        }
        Ok(value)
    }
}

/// Per-step loss components. Terms whose weight is zero are not computed
/// and read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignReport {
    pub step: u64,
    /// Batch NLL in bits/dim.
    pub nll_s: f64,
    pub nll_t: f64,
    pub critic_s: f64,
    pub critic_t: f64,
    pub dal_classifier: f64,
    /// Generator side of the adversarial terms: `C_s` judging `F_{t→s}`
    /// output and `C_t` judging `F_{s→t}` output.
    pub gen_s: f64,
    pub gen_t: f64,
    pub confusion_s: f64,
    pub confusion_t: f64,
    /// Weighted objective minimized by the flows.
    pub flow_objective: f64,
}

pub const ALIGN_COLUMNS: [&str; 10] = [
    "nll_s",
    "nll_t",
    "critic_s",
    "critic_t",
    "dal_classifier",
    "gen_s",
    "gen_t",
    "confusion_s",
    "confusion_t",
    "flow_objective",
];

impl AlignReport {
    pub fn values(&self) -> [f64; 10] {
        [
            self.nll_s,
            self.nll_t,
            self.critic_s,
            self.critic_t,
            self.dal_classifier,
            self.gen_s,
            self.gen_t,
            self.confusion_s,
            self.confusion_t,
            self.flow_objective,
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct AlignSnapshot {
    arch: AlignArch,
    align: AlignConfig,
}

/// State of the alignment phase.
pub struct AlignTrainer {
    pub arch: AlignArch,
    pub cfg: AlignConfig,
    pub source: FlowSide,
    pub target: FlowSide,
    pub critic_s: Critic,
    pub critic_t: Critic,
    pub dal: DomainClassifier,
    adam_cs: AdamState,
    adam_ct: AdamState,
    adam_dal: AdamState,
    step: u64,
}

impl AlignTrainer {
    pub fn new(
        arch: AlignArch,
        cfg: AlignConfig,
        source: &Dataset,
        target: &Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        arch.validate()?;
        source.ensure_trainable()?;
        target.ensure_trainable()?;
        for (ds, fc) in [(source, &arch.flow_source), (target, &arch.flow_target)] {
            if ds.item_shape() != fc.input_shape() {
                return Err(Error::ShapeMismatch {
                    op: "train_alignment",
                    left: ds.item_shape().to_vec(),
                    right: fc.input_shape(),
                });
            }
        }
        let s = FlowSide::new(&arch.flow_source, arch.dequantize, &cfg, 0, source)?;
        let t = FlowSide::new(&arch.flow_target, arch.dequantize, &cfg, 1, target)?;
        Self::assemble(arch, cfg, s, t)
    }

    fn assemble(
        arch: AlignArch,
        cfg: AlignConfig,
        source: FlowSide,
        target: FlowSide,
    ) -> Result<Self> {
        let mut rng = rng_stream(cfg.seed, stream::INIT_CRITICS);
        let critic_s = Critic::new("critic_s", arch.critic_source.clone(), &mut rng)?;
        let critic_t = Critic::new("critic_t", arch.critic_target.clone(), &mut rng)?;
        let dal = DomainClassifier::new("dal", source.flow.latent_dim(), arch.dal_hidden, &mut rng);
        Ok(AlignTrainer {
            adam_cs: AdamState::for_module(cfg.lr, &critic_s),
            adam_ct: AdamState::for_module(cfg.lr, &critic_t),
            adam_dal: AdamState::for_module(cfg.lr, &dal),
            critic_s,
            critic_t,
            dal,
            source,
            target,
            arch,
            cfg,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn adv_on(&self) -> bool {
        self.cfg.adv_weight > 0.0
    }

    fn dal_on(&self) -> bool {
        self.cfg.gamma_s > 0.0 || self.cfg.gamma_t > 0.0
    }

    /// Critic step on a pair of batches; fakes are computed without any
    /// gradient path into the flows.
    fn critic_update(&mut self, bs: &Batch, bt: &Batch, rep: &mut AlignReport) -> Result<()> {
        let step = rep.step;
        let ng = Tape::no_grad();
        let zs = self
            .source
            .flow
            .forward(ng.constant(bs.x.clone()))
            .map_err(diverged(step, "flow_s"))?
            .z;
        let zt = self
            .target
            .flow
            .forward(ng.constant(bt.x.clone()))
            .map_err(diverged(step, "flow_t"))?
            .z;
        let tape = Tape::new();
        let mut total: Option<Var> = None;
        if self.adv_on() {
            let fake_t = self
                .target
                .flow
                .inverse(zs)
                .map_err(diverged(step, "translate_s2t"))?;
            let fake_s = self
                .source
                .flow
                .inverse(zt)
                .map_err(diverged(step, "translate_t2s"))?;
            let ls = adv_critic_loss(
                &self.critic_s,
                tape.constant(bs.x.clone()),
                tape.constant((*fake_s.value()).clone()),
            )
            .map_err(diverged(step, "critic_s"))?;
            let lt = adv_critic_loss(
                &self.critic_t,
                tape.constant(bt.x.clone()),
                tape.constant((*fake_t.value()).clone()),
            )
            .map_err(diverged(step, "critic_t"))?;
            rep.critic_s = finite(step, "critic_s", ls.to_scalar()?)?;
            rep.critic_t = finite(step, "critic_t", lt.to_scalar()?)?;
            total = Some(ls.add(&lt)?);
        }
        if self.dal_on() {
            let d = dal_loss(
                &self.dal,
                tape.constant((*zs.value()).clone()),
                tape.constant((*zt.value()).clone()),
            )
            .map_err(diverged(step, "dal_classifier"))?;
            rep.dal_classifier = finite(step, "dal_classifier", d.classifier.to_scalar()?)?;
            total = Some(match total {
                Some(t) => t.add(&d.classifier)?,
                None => d.classifier,
            });
        }
        let Some(total) = total else { return Ok(()) };
        tape.backward(total)
            .map_err(diverged(step, "critic_objective"))?;
        ensure_untouched(&tape, &self.source.flow, "critic step")?;
        ensure_untouched(&tape, &self.target.flow, "critic step")?;
        if self.adv_on() {
            self.critic_s.accumulate_grads(&tape);
            self.critic_t.accumulate_grads(&tape);
            adam_step(&mut self.adam_cs, &mut self.critic_s)?;
            adam_step(&mut self.adam_ct, &mut self.critic_t)?;
        }
        if self.dal_on() {
            self.dal.accumulate_grads(&tape);
            adam_step(&mut self.adam_dal, &mut self.dal)?;
        }
        Ok(())
    }

    /// One critic phase followed by one flow update.
    pub fn align_step(&mut self, source: &Dataset, target: &Dataset) -> Result<AlignReport> {
        let mut rep = AlignReport {
            step: self.step + 1,
            ..Default::default()
        };
        let step = rep.step;
        let n = self.cfg.batch_size;
        let bs = self.source.sample(source, n)?;
        let bt = self.target.sample(target, n)?;
        if self.adv_on() || self.dal_on() {
            self.critic_update(&bs, &bt, &mut rep)?;
            for _ in 1..self.cfg.critic_steps {
                let xs = self.source.sample(source, n)?;
                let xt = self.target.sample(target, n)?;
                self.critic_update(&xs, &xt, &mut rep)?;
            }
        }

        let tape = Tape::new();
        tape.freeze(self.critic_s.param_ids());
        tape.freeze(self.critic_t.param_ids());
        tape.freeze(self.dal.param_ids());
        let out_s = self
            .source
            .flow
            .forward(tape.constant(bs.x.clone()))
            .map_err(diverged(step, "nll_s"))?;
        let out_t = self
            .target
            .flow
            .forward(tape.constant(bt.x.clone()))
            .map_err(diverged(step, "nll_t"))?;
        let mut acc = None;
        if self.adv_on() {
            let fake_t = self
                .target
                .flow
                .inverse(out_s.z)
                .map_err(diverged(step, "translate_s2t"))?;
            let fake_s = self
                .source
                .flow
                .inverse(out_t.z)
                .map_err(diverged(step, "translate_t2s"))?;
            let gs = adv_generator_loss(&self.critic_s, fake_s).map_err(diverged(step, "gen_s"))?;
            let gt = adv_generator_loss(&self.critic_t, fake_t).map_err(diverged(step, "gen_t"))?;
            rep.gen_s = finite(step, "gen_s", gs.to_scalar()?)?;
            rep.gen_t = finite(step, "gen_t", gt.to_scalar()?)?;
            acc = weighted(acc, self.cfg.adv_weight, gs.add(&gt)?)?;
        }
        if self.dal_on() {
            let d = dal_loss(&self.dal, out_s.z, out_t.z).map_err(diverged(step, "confusion"))?;
            rep.confusion_s = finite(step, "confusion_s", d.confusion_source.to_scalar()?)?;
            rep.confusion_t = finite(step, "confusion_t", d.confusion_target.to_scalar()?)?;
            acc = weighted(acc, self.cfg.gamma_s, d.confusion_source)?;
            acc = weighted(acc, self.cfg.gamma_t, d.confusion_target)?;
        }
        if self.cfg.lambda_s > 0.0 {
            let nll = nll_bits(&out_s, &bs).map_err(diverged(step, "nll_s"))?;
            rep.nll_s = finite(step, "nll_s", nll.to_scalar()?)?;
            acc = weighted(acc, self.cfg.lambda_s, nll)?;
        }
        if self.cfg.lambda_t > 0.0 {
            let nll = nll_bits(&out_t, &bt).map_err(diverged(step, "nll_t"))?;
            rep.nll_t = finite(step, "nll_t", nll.to_scalar()?)?;
            acc = weighted(acc, self.cfg.lambda_t, nll)?;
        }
        if let Some(total) = acc {
            rep.flow_objective = finite(step, "flow_objective", total.to_scalar()?)?;
            tape.backward(total)
                .map_err(diverged(step, "flow_objective"))?;
            ensure_untouched(&tape, &self.critic_s, "flow step")?;
            ensure_untouched(&tape, &self.critic_t, "flow step")?;
            ensure_untouched(&tape, &self.dal, "flow step")?;
            self.source.flow.accumulate_grads(&tape);
            self.target.flow.accumulate_grads(&tape);
            adam_step(&mut self.source.adam, &mut self.source.flow)?;
            adam_step(&mut self.target.adam, &mut self.target.flow)?;
        }
        self.step = step;
        Ok(rep)
    }

    /// Runs until `self.cfg.steps`, logging and checkpointing into `out`.
    pub fn run(
        &mut self,
        source: &Dataset,
        target: &Dataset,
        out: Option<&Path>,
    ) -> Result<Vec<AlignReport>> {
        let mut log = match out {
            Some(dir) => Some(MetricsLog::open(
                &dir.join("metrics_align.csv"),
                &ALIGN_COLUMNS,
            )?),
            None => None,
        };
        let start = Instant::now();
        let mut reports = Vec::new();
        while self.step < self.cfg.steps {
            let rep = self.align_step(source, target)?;
            let last = rep.step == self.cfg.steps;
            if let Some(log) = &mut log {
                if rep.step % self.cfg.log_every == 0 || last {
                    log.append(rep.step, &rep.values(), start.elapsed().as_secs_f64())?;
                }
            }
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if last || (every > 0 && rep.step % every == 0) {
                    self.to_checkpoint()?.save(&dir.join("align.ckpt"))?;
                }
            }
            reports.push(rep);
        }
        Ok(reports)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            phase: Phase::Align,
            step: self.step,
            tensors: Vec::new(),
            blobs: Vec::new(),
            config: to_toml(&AlignSnapshot {
                arch: self.arch.clone(),
                align: self.cfg.clone(),
            })?,
        };
        ck.push_module(&self.source.flow);
        ck.push_module(&self.target.flow);
        ck.push_module(&self.critic_s);
        ck.push_module(&self.critic_t);
        ck.push_module(&self.dal);
        ck.push_adam("flow_s", &self.source.adam);
        ck.push_adam("flow_t", &self.target.adam);
        ck.push_adam("critic_s", &self.adam_cs);
        ck.push_adam("critic_t", &self.adam_ct);
        ck.push_adam("dal", &self.adam_dal);
        ck.push_rng("batch_s", &self.source.batch_rng);
        ck.push_rng("batch_t", &self.target.batch_rng);
        ck.push_rng("noise_s", &self.source.noise_rng);
        ck.push_rng("noise_t", &self.target.noise_rng);
        Ok(ck)
    }

    /// Restores the full training state, ready to continue.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.phase != Phase::Align {
            return Err(Error::Checkpoint("expected an alignment checkpoint".into()));
        }
        let snap: AlignSnapshot = from_toml(&ck.config)?;
        let (flow_s, flow_t) = build_flows(&snap.arch, snap.align.seed, ck)?;
        let side = |flow: FlowModel, name: &str, b: &str, n: &str| -> Result<FlowSide> {
            Ok(FlowSide {
                flow,
                adam: ck.adam(name)?,
                batch_rng: ck.rng(b)?,
                noise_rng: ck.rng(n)?,
                dequantize: snap.arch.dequantize,
            })
        };
        let s = side(flow_s, "flow_s", "batch_s", "noise_s")?;
        let t = side(flow_t, "flow_t", "batch_t", "noise_t")?;
        let mut tr = Self::assemble(snap.arch, snap.align, s, t)?;
        ck.restore_module(&mut tr.critic_s)?;
        ck.restore_module(&mut tr.critic_t)?;
        ck.restore_module(&mut tr.dal)?;
        tr.adam_cs = ck.adam("critic_s")?;
        tr.adam_ct = ck.adam("critic_t")?;
        tr.adam_dal = ck.adam("dal")?;
        tr.step = ck.step;
        Ok(tr)
    }
}

fn build_flows(arch: &AlignArch, seed: u64, ck: &Checkpoint) -> Result<(FlowModel, FlowModel)> {
    let mut a = FlowModel::new(
        "flow_s",
        arch.flow_source.clone(),
        &mut rng_stream(seed, stream::INIT_FLOW_S),
    )?;
    let mut b = FlowModel::new(
        "flow_t",
        arch.flow_target.clone(),
        &mut rng_stream(seed, stream::INIT_FLOW_T),
    )?;
    ck.restore_module(&mut a)?;
    ck.restore_module(&mut b)?;
    a.mark_initialized();
    b.mark_initialized();
    Ok((a, b))
}

/// Both snapshot kinds store the alignment networks under `arch`.
#[derive(Deserialize)]
struct ArchOnly {
    arch: AlignArch,
}

/// The two flows stored in an alignment or conditional checkpoint.
pub fn load_flows(ck: &Checkpoint) -> Result<(FlowModel, FlowModel, AlignArch)> {
    let snap: ArchOnly = from_toml(&ck.config)?;
    let (a, b) = build_flows(&snap.arch, 0, ck)?;
    Ok((a, b, snap.arch))
}

/// Phase 1 from scratch. With `out`, writes `metrics_align.csv` and
/// `align.ckpt` there.
pub fn train_alignment(
    arch: AlignArch,
    cfg: AlignConfig,
    source: &Dataset,
    target: &Dataset,
    out: Option<&Path>,
) -> Result<AlignTrainer> {
    let mut tr = AlignTrainer::new(arch, cfg, source, target)?;
    tr.run(source, target, out)?;
    Ok(tr)
}
