//! Sample-space critics and the latent domain classifier used while
//! aligning the two flows.
//!
//! Sign convention: every loss here is something its owner *minimizes*.
//! The critic minimizes `-[log C(real) + log(1 - C(fake))]`, the flows
//! minimize the non-saturating `-log C(fake)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Module, Parameter, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{mlp_with, Activation, Conv2d, Layer, Sequential};

/// Logits are clamped to this magnitude before the logistic.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Domain tag of the labeled domain; the other domain is `TARGET_TAG`.
pub const SOURCE_TAG: usize = 0;
pub const TARGET_TAG: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticConfig {
    /// Three fully connected layers.
    Vector {
        dim: usize,
        hidden: usize,
        #[serde(default = "tanh")]
        activation: Activation,
    },
    /// Patch discriminator: `blocks` stride-2 convolutions doubling from
    /// `filters`, then a 1-channel convolution giving one logit per patch.
    Patch {
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        blocks: usize,
    },
}

fn tanh() -> Activation {
    Activation::Tanh
}

impl CriticConfig {
    pub fn vector(dim: usize, hidden: usize) -> Self {
        CriticConfig::Vector {
            dim,
            hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn patch(channels: usize, height: usize, width: usize) -> Self {
        CriticConfig::Patch {
            channels,
            height,
            width,
            filters: 16,
            blocks: 3,
        }
    }
}

/// Real/fake discriminator on samples of one domain.
#[derive(Clone, Debug)]
pub struct Critic {
    config: CriticConfig,
    net: Sequential,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(name: &str, config: CriticConfig, rng: &mut R) -> Result<Self> {
        let net = match config {
            CriticConfig::Vector {
                dim,
                hidden,
                activation,
            } => mlp_with(name, &[dim, hidden, hidden, 1], activation, rng),
            CriticConfig::Patch {
                channels,
                height,
                width,
                filters,
                blocks,
            } => {
                let side = 1usize << blocks;
                if blocks == 0 || height % side != 0 || width % side != 0 {
                    return Err(Error::Config(format!(
                        "patch critic with {blocks} stride-2 blocks needs sides divisible by {side}, got {height}×{width}"
                    )));
                }
                let mut layers = Vec::new();
                let mut c = channels;
                for b in 0..blocks {
                    let out = filters << b;
                    layers.push(Layer::Conv(Conv2d::new(
                        &format!("{name}.conv{b}"),
                        c,
                        out,
                        4,
                        2,
                        1,
                        rng,
                    )));
                    layers.push(Layer::Act(Activation::LeakyRelu));
                    c = out;
                }
                layers.push(Layer::Conv(Conv2d::new(
                    &format!("{name}.patch"),
                    c,
                    1,
                    3,
                    1,
                    1,
                    rng,
                )));
                let patches = (height / side) * (width / side);
                layers.push(Layer::Reshape(vec![patches]));
                Sequential::new(layers)
            }
        };
        Ok(Critic { config, net })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    /// `(N, P)` clamped logits, one per patch (`P = 1` for vector critics).
    pub fn logits<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.net.forward(x)?.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    }

    /// Realness probabilities, strictly inside `(0, 1)`.
    pub fn probability<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.logits(x)?.sigmoid()
    }
}

impl Module for Critic {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.net.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params_mut(f)
    }
}

/// `-mean log σ(l)` over every logit.
pub fn real_term<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    logits.sigmoid()?.ln()?.mean()?.neg()
}

/// `-mean log(1 - σ(l))`, computed as `-mean log σ(-l)`.
pub fn fake_term<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    logits.neg()?.sigmoid()?.ln()?.mean()?.neg()
}

pub fn adv_critic_loss<'t>(critic: &Critic, real: Var<'t>, fake: Var<'t>) -> Result<Var<'t>> {
    real_term(critic.logits(real)?)?.add(&fake_term(critic.logits(fake)?)?)
}

/// Non-saturating generator loss `-mean log C(fake)`.
pub fn adv_generator_loss<'t>(critic: &Critic, fake: Var<'t>) -> Result<Var<'t>> {
    real_term(critic.logits(fake)?)
}

/// Two-way classifier over flattened latents: which domain did `z` come from?
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    net: Sequential,
}

impl DomainClassifier {
    pub fn new<R: Rng + ?Sized>(name: &str, latent_dim: usize, hidden: usize, rng: &mut R) -> Self {
        DomainClassifier {
            net: mlp_with(
                name,
                &[latent_dim, hidden, hidden, 2],
                Activation::Tanh,
                rng,
            ),
        }
    }

    /// `(N, 2)` logits.
    pub fn logits<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.net.forward(z)
    }

    /// `(N, 2)` posterior; rows sum to one.
    pub fn posterior(&self, z: &Tensor) -> Result<Tensor> {
        let tape = crate::diffmath::Tape::no_grad();
        let lp = self.logits(tape.constant(z.clone()))?.log_softmax()?;
        Ok(lp.value().map(f64::exp))
    }
}

impl Module for DomainClassifier {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.net.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params_mut(f)
    }
}

pub struct DalLoss<'t> {
    /// Cross-entropy of the true domain tags over both batches pooled.
    pub classifier: Var<'t>,
    /// Cross-entropy of the source latents against the uniform tag distribution.
    pub confusion_source: Var<'t>,
    pub confusion_target: Var<'t>,
    sizes: (usize, usize),
}

impl<'t> DalLoss<'t> {
    /// Pooled confusion over both batches, weighted by batch size.
    pub fn confusion(&self) -> Result<Var<'t>> {
        let ns = self.sizes.0 as f64;
        let nt = self.sizes.1 as f64;
        self.confusion_source
            .mul_scalar(ns / (ns + nt))?
            .add(&self.confusion_target.mul_scalar(nt / (ns + nt))?)
    }
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

pub fn dal_loss<'t>(
    classifier: &DomainClassifier,
    z_s: Var<'t>,
    z_t: Var<'t>,
) -> Result<DalLoss<'t>> {
    let (ns, nt) = (z_s.shape()[0], z_t.shape()[0]);
    if ns == 0 || nt == 0 {
        return Err(Error::Invalid("domain loss needs non-empty batches".into()));
    }
    let ls = classifier.logits(z_s)?;
    let lt = classifier.logits(z_t)?;
    let tags: Vec<usize> = std::iter::repeat_n(SOURCE_TAG, ns)
        .chain(std::iter::repeat_n(TARGET_TAG, nt))
        .collect();
    let classifier_loss = Var::concat(&[ls, lt], 0)?.softmax_cross_entropy(&one_hot(&tags, 2)?)?;
    Ok(DalLoss {
        classifier: classifier_loss,
        confusion_source: ls.softmax_cross_entropy(&Tensor::full(vec![ns, 2], 0.5))?,
        confusion_target: lt.softmax_cross_entropy(&Tensor::full(vec![nt, 2], 0.5))?,
        sizes: (ns, nt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_critic() -> Critic {
        let mut c = Critic::new(
            "c",
            CriticConfig::vector(2, 4),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        c.visit_params_mut(&mut |p| p.value = Tensor::zeros(p.shape().to_vec()));
        c
    }

    #[test]
    fn uninformed_critic_losses() {
        let c = zero_critic();
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![3, 2]));
        let l = adv_critic_loss(&c, x, x).unwrap().to_scalar().unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let g = adv_generator_loss(&c, x).unwrap().to_scalar().unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_critic_hits_clamp_floor() {
        let tape = Tape::new();
        let hi = tape
            .constant(Tensor::full(vec![4, 1], 1e3))
            .clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            .unwrap();
        let lo = tape
            .constant(Tensor::full(vec![4, 1], -1e3))
            .clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
            .unwrap();
        let l = real_term(hi)
            .unwrap()
            .add(&fake_term(lo).unwrap())
            .unwrap()
            .to_scalar()
            .unwrap();
        let floor = -2.0 * crate::diffmath::sigmoid(LOGIT_CLAMP).ln();
        assert!((l - floor).abs() < 1e-15 && l < 1e-6);
    }

    #[test]
    fn patch_critic_emits_one_logit_per_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Critic::new("pc", CriticConfig::patch(1, 16, 16), &mut rng).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::randn(vec![2, 1, 16, 16], &mut rng));
        assert_eq!(c.logits(x).unwrap().shape(), vec![2, 4]);
        assert_eq!(c.params()[0].shape(), &[16, 1, 4, 4]);
    }

    #[test]
    fn uniform_domain_classifier_gives_log_two() {
        let mut d = DomainClassifier::new("d", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        d.visit_params_mut(&mut |p| p.value = Tensor::zeros(p.shape().to_vec()));
        let tape = Tape::new();
        let zs = tape.constant(Tensor::ones(vec![2, 3]));
        let zt = tape.constant(Tensor::zeros(vec![5, 3]));
        let l = dal_loss(&d, zs, zt).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((l.classifier.to_scalar().unwrap() - ln2).abs() < 1e-12);
        assert!((l.confusion().unwrap().to_scalar().unwrap() - ln2).abs() < 1e-12);
    }
}
