//! Metrics over trained checkpoints: cycle audits, bits/dim, label and
//! domain probes, PCA projections and silhouettes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condsynth::argmax;
use crate::data::Domain;
use crate::diffmath::{Module, Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::{dequantize, translate, FlowModel, LOGIT_ALPHA};
use crate::nn::{mlp_with, Activation, Sequential};
use crate::trainer::AdamState;

/// Samples per no-grad evaluation chunk.
const EVAL_CHUNK: usize = 512;

/// Minimum held-out accuracy for the oracle probe to be trusted.
pub const ORACLE_MIN_ACCURACY: f64 = 0.95;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundTrip {
    pub max: f64,
    pub mean: f64,
}

impl RoundTrip {
    pub fn between(x: &Tensor, back: &Tensor) -> Result<Self> {
        if x.shape() != back.shape() {
            return Err(Error::ShapeMismatch {
                op: "roundtrip",
                left: x.shape().to_vec(),
                right: back.shape().to_vec(),
            });
        }
        let n = x.len().max(1) as f64;
        let mut out = RoundTrip::default();
        for (a, b) in x.data().iter().zip(back.data()) {
            let d = (a - b).abs();
            out.max = out.max.max(d);
            out.mean += d / n;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CycleAudit {
    /// `x_s -> t -> s`.
    pub source: RoundTrip,
    /// `x_t -> s -> t`.
    pub target: RoundTrip,
}

impl CycleAudit {
    pub fn max(&self) -> f64 {
        self.source.max.max(self.target.max)
    }
}

fn first_n(x: &Tensor, n: usize, op: &'static str) -> Result<Tensor> {
    if n > x.batch() {
        return Err(Error::Invalid(format!(
            "{op}: asked for {n} samples, only {} available",
            x.batch()
        )));
    }
    Ok(x.select(&(0..n).collect::<Vec<_>>()))
}

/// Round-trip errors of both translation compositions on the first `n`
/// samples of each domain.
pub fn cycle_audit(
    flow_s: &FlowModel,
    flow_t: &FlowModel,
    source: &Tensor,
    target: &Tensor,
    n: usize,
) -> Result<CycleAudit> {
    let xs = first_n(source, n, "cycle_audit")?;
    let xt = first_n(target, n, "cycle_audit")?;
    let back_s = translate(flow_t, flow_s, &translate(flow_s, flow_t, &xs)?)?;
    let back_t = translate(flow_s, flow_t, &translate(flow_t, flow_s, &xt)?)?;
    Ok(CycleAudit {
        source: RoundTrip::between(&xs, &back_s)?,
        target: RoundTrip::between(&xt, &back_t)?,
    })
}

/// Mean negative log-likelihood in bits per dimension. Pixel data is
/// dequantized with noise drawn from `seed` and the correction included.
pub fn bits_per_dim(flow: &FlowModel, samples: &Tensor, dequant: bool, seed: u64) -> Result<f64> {
    if samples.batch() == 0 {
        return Err(Error::Invalid("bits_per_dim of an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.batch();
    let d = samples.item_len() as f64;
    let mut total = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = samples.select(&idx);
        let (y, extra) = if dequant {
            let q = dequantize(&x, LOGIT_ALPHA, &mut rng)?;
            let s: f64 = q.log_det.iter().sum();
            (q.y, s)
        } else {
            (x, 0.0)
        };
        total += flow.log_prob_values(&y)?.iter().sum::<f64>() + extra;
    }
    let bpd = -total / (n as f64 * d * std::f64::consts::LN_2);
    if !bpd.is_finite() {
        return Err(Error::NonFinite { op: "bits_per_dim" });
    }
    Ok(bpd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the labeled pool used for fitting; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            steps: 1500,
            batch_size: 128,
            lr: 1e-2,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Small fully connected classifier on standardized, flattened inputs.
#[derive(Clone, Debug)]
pub struct Probe {
    net: Sequential,
    mean: Vec<f64>,
    scale: Vec<f64>,
    classes: usize,
}

fn flatten(x: &Tensor) -> Result<Tensor> {
    x.reshape(vec![x.batch(), x.item_len()])
}

impl Module for Probe {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a crate::diffmath::Parameter)) {
        self.net.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut crate::diffmath::Parameter)) {
        self.net.visit_params_mut(f)
    }
}

impl Probe {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let x = flatten(x)?;
        let (n, d) = (x.batch(), x.item_len());
        if n != labels.len() || n < 2 {
            return Err(Error::Invalid(format!(
                "probe needs matching samples and labels, got {n} and {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.item(i)) {
                *m += v / n as f64;
            }
        }
        for i in 0..n {
            for ((s, m), v) in scale.iter_mut().zip(&mean).zip(x.item(i)) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut probe = Probe {
            net: mlp_with(
                "probe",
                &[d, cfg.hidden, cfg.hidden, classes],
                Activation::Tanh,
                &mut rng,
            ),
            mean,
            scale,
            classes,
        };
        let xs = probe.standardize(&x);
        let mut adam = AdamState::for_module(cfg.lr, &probe.net);
        adam.beta1 = 0.9;
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size.min(n))
                .map(|_| rng.random_range(0..n))
                .collect();
            let xb = xs.select(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let tape = Tape::new();
            let loss = probe
                .net
                .forward(tape.constant(xb))?
                .softmax_cross_entropy(&crate::adversary::one_hot(&yb, classes)?)?;
            tape.backward(loss)?;
            probe.net.accumulate_grads(&tape);
            crate::trainer::adam_step(&mut adam, &mut probe.net)?;
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = x.item_len();
        let mut out = x.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            let k = j % d;
            *v = (*v - self.mean[k]) * self.scale[k];
        }
        out
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let x = flatten(x)?;
        if x.item_len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "probe",
                left: vec![x.item_len()],
                right: vec![self.mean.len()],
            });
        }
        let tape = Tape::no_grad();
        let logits = self
            .net
            .forward(tape.constant(self.standardize(&x)))?
            .value();
        Ok((0..logits.batch())
            .map(|i| argmax(logits.item(i)))
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return Err(Error::Invalid("accuracy needs one label per sample".into()));
        }
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
    }
}

/// Seeded split of `0..n` into fitting and held-out indices.
fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let cut = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let test = idx.split_off(cut);
    (idx, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    /// Held-out accuracy of the probe on real labeled target data.
    pub probe_accuracy: f64,
    /// Fraction of synthesized samples assigned to their conditioning class.
    pub accuracy: f64,
    /// Accuracy under the best one-to-one relabelling of classes. Far above
    /// `accuracy` means classes come out consistent but permuted.
    pub relabeled_accuracy: f64,
    /// False when the probe itself is too weak to grade samples.
    pub valid: bool,
}

/// Trains a probe on the labeled evaluation set only, then grades
/// synthesized samples against their conditioning labels.
pub fn oracle_probe(
    eval_samples: &Tensor,
    eval_labels: &[usize],
    classes: usize,
    synthesized: &Tensor,
    conditions: &[usize],
    cfg: &ProbeConfig,
) -> Result<OracleReport> {
    let (fit, held) = split(eval_samples.batch(), cfg.train_fraction, cfg.seed);
    let sel = |idx: &[usize]| idx.iter().map(|&i| eval_labels[i]).collect::<Vec<_>>();
    if eval_labels.len() != eval_samples.batch() {
        return Err(Error::Invalid(
            "oracle_probe: one label per evaluation sample required".into(),
        ));
    }
    let probe = Probe::fit(&eval_samples.select(&fit), &sel(&fit), classes, cfg)?;
    let probe_accuracy = probe.accuracy(&eval_samples.select(&held), &sel(&held))?;
    let accuracy = probe.accuracy(synthesized, conditions)?;
    let predicted = probe.predict(synthesized)?;
    Ok(OracleReport {
        probe_accuracy,
        accuracy,
        relabeled_accuracy: best_permutation_accuracy(&predicted, conditions, classes),
        valid: probe_accuracy >= ORACLE_MIN_ACCURACY,
    })
}

/// Accuracy of `predicted` against `truth` maximized over all bijections
/// of the class labels. Exhaustive, so meant for small `classes`.
pub fn best_permutation_accuracy(predicted: &[usize], truth: &[usize], classes: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut confusion = vec![0usize; classes * classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[t * classes + p] += 1;
    }
    fn search(row: usize, used: &mut [bool], k: usize, conf: &[usize]) -> usize {
        if row == k {
            return 0;
        }
        let mut best = 0;
        for col in 0..k {
            if !used[col] {
                used[col] = true;
                best = best.max(conf[row * k + col] + search(row + 1, used, k, conf));
                used[col] = false;
            }
        }
        best
    }
    let hits = search(0, &mut vec![false; classes], classes, &confusion);
    hits as f64 / truth.len() as f64
}

/// Held-out accuracy of a fresh probe separating source from target
/// latents. Near one half means the embeddings are aligned.
pub fn alignment_probe(latents_s: &Tensor, latents_t: &Tensor, cfg: &ProbeConfig) -> Result<f64> {
    let n = latents_s.batch().min(latents_t.batch());
    if n < 2 {
        return Err(Error::Invalid(
            "alignment_probe needs at least two latents per domain".into(),
        ));
    }
    let first: Vec<usize> = (0..n).collect();
    let pooled = Tensor::concat_batch(&[
        &flatten(&latents_s.select(&first))?,
        &flatten(&latents_t.select(&first))?,
    ])?;
    let tags: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    let (fit, held) = split(2 * n, cfg.train_fraction, cfg.seed);
    let sel = |idx: &[usize]| idx.iter().map(|&i| tags[i]).collect::<Vec<_>>();
    let probe = Probe::fit(&pooled.select(&fit), &sel(&fit), 2, cfg)?;
    probe.accuracy(&pooled.select(&held), &sel(&held))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(pc1, pc2)` per sample.
    pub coords: Vec<[f64; 2]>,
    /// Variance along each component.
    pub variance: [f64; 2],
    /// Unit loading vectors.
    pub components: [Vec<f64>; 2],
}

/// Top-2 principal components of flattened latents. Each component's
/// largest-magnitude loading is made positive.
pub fn latent_projection(latents: &Tensor) -> Result<Projection> {
    let x = flatten(latents)?;
    let (n, d) = (x.batch(), x.item_len());
    if n < 3 {
        return Err(Error::Invalid(format!(
            "latent_projection needs at least 3 samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.item(i)) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| x.item(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let component = |k: usize| -> (Vec<f64>, f64) {
        let Some(&c) = order.get(k) else {
            return (vec![0.0; d], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        (v, eig.eigenvalues[c].max(0.0))
    };
    let (c1, v1) = component(0);
    let (c2, v2) = component(1);
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&c1), dot(&c2)]
        })
        .collect();
    Ok(Projection {
        coords,
        variance: [v1, v2],
        components: [c1, c2],
    })
}

/// CSV with columns `pc1,pc2,class,domain`; unknown classes are left blank.
pub fn write_projection_csv(
    path: &Path,
    proj: &Projection,
    classes: &[Option<usize>],
    domains: &[Domain],
) -> Result<()> {
    if classes.len() != proj.coords.len() || domains.len() != proj.coords.len() {
        return Err(Error::Invalid(
            "projection tags must match the number of points".into(),
        ));
    }
    let mut s = String::from("pc1,pc2,class,domain\n");
    for ((c, k), d) in proj.coords.iter().zip(classes).zip(domains) {
        let k = k.map_or(String::new(), |k| k.to_string());
        let d = match d {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        writeln!(s, "{:?},{:?},{k},{d}", c[0], c[1]).expect("write to string");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Mean silhouette coefficient of `labels` under Euclidean distance.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let x = flatten(points)?;
    let n = x.batch();
    if n != labels.len() {
        return Err(Error::Invalid(
            "silhouette needs one label per point".into(),
        ));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let sizes = (0..k)
        .map(|c| labels.iter().filter(|&&l| l == c).count())
        .collect::<Vec<_>>();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Invalid(
            "silhouette needs at least two non-empty clusters".into(),
        ));
    }
    let scores = crate::par::map(n, |i| {
        let mut sum = vec![0.0; k];
        let xi = x.item(i);
        for j in 0..n {
            if i != j {
                sum[labels[j]] += xi
                    .iter()
                    .zip(x.item(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            return 0.0;
        }
        let a = sum[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sum[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            (b - a) / m
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Named metrics of one evaluation with the context they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub config: String,
    pub checkpoint: String,
    pub timestamp: u64,
}

impl EvalReport {
    pub fn new(checkpoint: impl Into<String>, config: impl Into<String>) -> Self {
        EvalReport {
            metrics: BTreeMap::new(),
            config: config.into(),
            checkpoint: checkpoint.into(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Invalid(format!(
                "metric `{name}` is not finite: {value}"
            )));
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// `metric,value` rows. Contains no timestamp so identical runs match.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            writeln!(s, "{k},{v:?}").expect("write to string");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "checkpoint: {}\ntimestamp: {}\n\n",
            self.checkpoint, self.timestamp
        );
        let width = self.metrics.keys().map(|k| k.len()).max().unwrap_or(0);
        for (k, v) in &self.metrics {
            writeln!(s, "{k:<width$}  {v:.6}").expect("write to string");
        }
        s.push_str("\nconfig:\n");
        s.push_str(&self.config);
        s
    }

    /// Writes `eval.csv` and `eval.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("eval.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("eval.txt");
        fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

    fn blobs(n: usize, offset: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![n, 2], &mut rng).map(|v| 0.3 * v + offset)
    }

    #[test]
    fn identity_flows_roundtrip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fs = FlowModel::new("a", FlowConfig::vector(2, 4, 8), &mut rng).unwrap();
        let ft = FlowModel::new("b", FlowConfig::vector(2, 4, 8), &mut rng).unwrap();
        let x = blobs(20, 0.0, 1);
        let audit = cycle_audit(&fs, &ft, &x, &x, 20).unwrap();
        assert_eq!(audit.max(), 0.0);
        assert!(cycle_audit(&fs, &ft, &x, &x, 21).is_err());
    }

    #[test]
    fn standard_normal_bits_per_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = FlowModel::new("a", FlowConfig::vector(2, 2, 8), &mut rng).unwrap();
        let x = Tensor::randn(vec![20000, 2], &mut rng);
        let expected =
            0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() / std::f64::consts::LN_2;
        let bpd = bits_per_dim(&flow, &x, false, 0).unwrap();
        assert!((bpd - expected).abs() < 0.05, "{bpd} vs {expected}");
    }

    #[test]
    fn domain_probe_extremes() {
        let cfg = ProbeConfig {
            steps: 300,
            ..Default::default()
        };
        let same = alignment_probe(&blobs(400, 0.0, 1), &blobs(400, 0.0, 2), &cfg).unwrap();
        assert!((same - 0.5).abs() < 0.1, "{same}");
        let apart = alignment_probe(&blobs(400, -3.0, 1), &blobs(400, 3.0, 2), &cfg).unwrap();
        assert!(apart > 0.99, "{apart}");
    }

    #[test]
    fn oracle_on_real_samples_matches_probe_accuracy() {
        let x = Tensor::concat_batch(&[&blobs(300, -2.0, 1), &blobs(300, 2.0, 2)]).unwrap();
        let y: Vec<usize> = (0..600).map(|i| usize::from(i >= 300)).collect();
        let cfg = ProbeConfig {
            steps: 200,
            ..Default::default()
        };
        let (_, held) = split(600, cfg.train_fraction, cfg.seed);
        let held_y: Vec<usize> = held.iter().map(|&i| y[i]).collect();
        let r = oracle_probe(&x, &y, 2, &x.select(&held), &held_y, &cfg).unwrap();
        assert_eq!(r.accuracy, r.probe_accuracy);
        assert!(r.valid);
    }

    #[test]
    fn projection_of_axis_aligned_2d_preserves_distances() {
        let x = Tensor::new(vec![4, 2], vec![3.0, 0.0, -3.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let p = latent_projection(&x).unwrap();
        assert!(p.variance[0] >= p.variance[1]);
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let orig = d([x.item(i)[0], x.item(i)[1]], [x.item(j)[0], x.item(j)[1]]);
                assert!((d(p.coords[i], p.coords[j]) - orig).abs() < 1e-12);
            }
        }
        assert_eq!(p.coords[0], [3.0, 0.0]);
    }

    #[test]
    fn duplicated_points_project_identically() {
        let x = Tensor::new(
            vec![4, 3],
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 0.0, 5.0, -1.0, 2.0, 2.0, 2.0],
        )
        .unwrap();
        let p = latent_projection(&x).unwrap();
        assert_eq!(p.coords[0], p.coords[1]);
        assert!(latent_projection(&x.select(&[0, 1])).is_err());
    }

    #[test]
    fn relabelled_accuracy_undoes_a_cyclic_shift() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let shifted: Vec<usize> = truth.iter().map(|t| (t + 1) % 3).collect();
        assert_eq!(best_permutation_accuracy(&shifted, &truth, 3), 1.0);
        // two of seven cannot be rescued by any relabelling
        let noisy = [1, 2, 2, 2, 0, 0, 1];
        assert!((best_permutation_accuracy(&noisy, &truth, 3) - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn silhouette_hand_value() {
        // Clusters {0, 1} and {4}: a = 1 and b = 4 or 3 for the pair.
        let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 4.0]).unwrap();
        let s = silhouette(&x, &[0, 0, 1]).unwrap();
        let expected = ((4.0 - 1.0) / 4.0 + (3.0 - 1.0) / 3.0 + 0.0) / 3.0;
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_non_finite() {
        let mut r = EvalReport::new("ck", "seed = 0\n");
        r.insert("a", 1.0).unwrap();
        assert!(r.insert("b", f64::NAN).is_err());
        assert_eq!(r.to_csv(), "metric,value\na,1.0\n");
    }
}
