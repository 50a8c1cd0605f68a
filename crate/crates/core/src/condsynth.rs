//! Class-conditional generation in the shared latent space.
//!
//! An encoder `E(c, ε)` produces latents; a critic with an auxiliary class
//! head judges them against embeddings of labeled source samples. Samples
//! for the target domain are `F_t⁻¹(E(c, ε))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{fake_term, one_hot, real_term, LOGIT_CLAMP};
use crate::diffmath::{Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{mlp_with, Activation, Conv2d, ConvTranspose2d, Layer, Linear, Sequential};
use crate::trainer::CondConfig;

/// A single categorical condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConditionVector {
    class: usize,
    classes: usize,
}

impl ConditionVector {
    pub fn new(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Invalid(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        Ok(ConditionVector { class, classes })
    }

    pub fn from_one_hot(v: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = v
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == 1.0)
            .map(|(i, _)| i)
            .collect();
        let zeros = v.iter().filter(|&&x| x == 0.0).count();
        if ones.len() != 1 || zeros + 1 != v.len() {
            return Err(Error::Invalid(format!("not a one-hot vector: {v:?}")));
        }
        Self::new(ones[0], v.len())
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.class] = 1.0;
        v
    }
}

fn check_one_hot_rows(c: &Tensor) -> Result<()> {
    if c.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "encode",
            shape: c.shape().to_vec(),
            reason: "conditions must be (N, K)".into(),
        });
    }
    for i in 0..c.batch() {
        ConditionVector::from_one_hot(c.item(i))?;
    }
    Ok(())
}

/// One transposed-convolution stage of the image encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpStage {
    /// Output channels; the last stage's value is ignored and replaced by
    /// the latent image's channel count.
    pub channels: usize,
    /// 2 doubles the resolution (kernel 4, stride 2), 1 keeps it (kernel 3).
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    /// Four fully connected layers.
    Vector {
        classes: usize,
        noise_dim: usize,
        hidden: usize,
        latent_dim: usize,
    },
    /// One fully connected layer to `fc_channels` feature maps, then
    /// transposed convolutions up to the flow's input layout.
    Image {
        classes: usize,
        noise_dim: usize,
        channels: usize,
        height: usize,
        width: usize,
        fc_channels: usize,
        stages: Vec<UpStage>,
    },
}

impl EncoderConfig {
    pub fn vector(classes: usize, latent_dim: usize) -> Self {
        EncoderConfig::Vector {
            classes,
            noise_dim: 8,
            hidden: 64,
            latent_dim,
        }
    }

    /// Full-size image encoder: 256 maps, then 1024, 512, 256, 128, 64,
    /// 32, 16 channels at scales 2, 2, 2, 2, 2, 1, 1, 1.
    pub fn image(classes: usize, channels: usize, height: usize, width: usize) -> Self {
        let widths = [1024, 512, 256, 128, 64, 32, 16, channels];
        let scales = [2, 2, 2, 2, 2, 1, 1, 1];
        EncoderConfig::Image {
            classes,
            noise_dim: 64,
            channels,
            height,
            width,
            fc_channels: 256,
            stages: widths
                .iter()
                .zip(scales)
                .map(|(&channels, scale)| UpStage { channels, scale })
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            EncoderConfig::Vector { classes, .. } | EncoderConfig::Image { classes, .. } => {
                *classes
            }
        }
    }

    pub fn noise_dim(&self) -> usize {
        match self {
            EncoderConfig::Vector { noise_dim, .. } | EncoderConfig::Image { noise_dim, .. } => {
                *noise_dim
            }
        }
    }

    pub fn latent_dim(&self) -> usize {
        match *self {
            EncoderConfig::Vector { latent_dim, .. } => latent_dim,
            EncoderConfig::Image {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }
}

/// `E(c, ε)`: one-hot condition and noise to a flattened flow latent.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    config: EncoderConfig,
    net: Sequential,
}

impl ConditionEncoder {
    pub fn new<R: Rng + ?Sized>(name: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let net = match &config {
            EncoderConfig::Vector {
                classes,
                noise_dim,
                hidden,
                latent_dim,
            } => mlp_with(
                name,
                &[classes + noise_dim, *hidden, *hidden, *hidden, *latent_dim],
                Activation::Tanh,
                rng,
            ),
            EncoderConfig::Image {
                classes,
                noise_dim,
                channels,
                height,
                width,
                fc_channels,
                stages,
            } => {
                let up: usize = stages.iter().map(|s| s.scale).product();
                if stages.is_empty() || stages.iter().any(|s| s.scale != 1 && s.scale != 2) {
                    return Err(Error::Config("encoder stages need scale 1 or 2".into()));
                }
                if height % up != 0 || width % up != 0 {
                    return Err(Error::Config(format!(
                        "encoder upsamples by {up}, which does not divide {height}×{width}"
                    )));
                }
                let (h0, w0) = (height / up, width / up);
                let mut layers = vec![
                    Layer::Linear(Linear::new(
                        &format!("{name}.fc"),
                        classes + noise_dim,
                        fc_channels * h0 * w0,
                        rng,
                    )),
                    Layer::Reshape(vec![*fc_channels, h0, w0]),
                ];
                let mut c = *fc_channels;
                for (i, s) in stages.iter().enumerate() {
                    layers.push(Layer::Act(Activation::LeakyRelu));
                    let last = i + 1 == stages.len();
                    let out = if last { *channels } else { s.channels };
                    let (k, p) = if s.scale == 2 { (4, 1) } else { (3, 1) };
                    layers.push(Layer::ConvTranspose(ConvTranspose2d::new(
                        &format!("{name}.up{i}"),
                        c,
                        out,
                        k,
                        s.scale,
                        p,
                        rng,
                    )));
                    c = out;
                }
                layers.push(Layer::Reshape(vec![channels * height * width]));
                Sequential::new(layers)
            }
        };
        Ok(ConditionEncoder { config, net })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn noise_dim(&self) -> usize {
        self.config.noise_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    /// `(N, K)` one-hot conditions and `(N, noise_dim)` noise to `(N, latent_dim)`.
    pub fn encode<'t>(&self, conditions: &Tensor, noise: Var<'t>) -> Result<Var<'t>> {
        check_one_hot_rows(conditions)?;
        let (n, k) = (conditions.shape()[0], conditions.shape()[1]);
        if k != self.classes() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: conditions.shape().to_vec(),
                right: vec![n, self.classes()],
            });
        }
        if noise.shape() != [n, self.noise_dim()] {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: noise.shape(),
                right: vec![n, self.noise_dim()],
            });
        }
        let c = noise.tape().constant(conditions.clone());
        self.net.forward(Var::concat(&[c, noise], 1)?)
    }

    /// Convenience wrapper over [`encode`](Self::encode) for class indices.
    pub fn encode_labels(&self, labels: &[usize], noise: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let z = self.encode(
            &one_hot(labels, self.classes())?,
            tape.constant(noise.clone()),
        )?;
        Ok((*z.value()).clone())
    }
}

impl Module for ConditionEncoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.net.visit_params(f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params_mut(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCriticConfig {
    Vector {
        latent_dim: usize,
        hidden: usize,
        classes: usize,
    },
    /// Latent reshaped to the image layout, then stride-2 convolutions.
    Image {
        channels: usize,
        height: usize,
        width: usize,
        trunk: Vec<usize>,
        classes: usize,
    },
}

impl LatentCriticConfig {
    pub fn vector(latent_dim: usize, classes: usize) -> Self {
        LatentCriticConfig::Vector {
            latent_dim,
            hidden: 64,
            classes,
        }
    }

    pub fn image(classes: usize, channels: usize, height: usize, width: usize) -> Self {
        LatentCriticConfig::Image {
            channels,
            height,
            width,
            trunk: vec![64, 128, 256, 512],
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            LatentCriticConfig::Vector { classes, .. }
            | LatentCriticConfig::Image { classes, .. } => *classes,
        }
    }
}

/// Latent critic and auxiliary classifier sharing one trunk.
#[derive(Clone, Debug)]
pub struct LatentCriticClassifier {
    config: LatentCriticConfig,
    pub trunk: Sequential,
    pub head_real: Linear,
    pub head_class: Linear,
}

pub struct CriticHeads<'t> {
    /// `(N, 1)` clamped realness logits.
    pub real: Var<'t>,
    /// `(N, K)` class logits.
    pub class: Var<'t>,
}

impl LatentCriticClassifier {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        config: LatentCriticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (trunk, features) = match &config {
            LatentCriticConfig::Vector {
                latent_dim, hidden, ..
            } => {
                let mut t = mlp_with(
                    &format!("{name}.trunk"),
                    &[*latent_dim, *hidden, *hidden],
                    Activation::Tanh,
                    rng,
                );
                t.layers.push(Layer::Act(Activation::Tanh));
                (t, *hidden)
            }
            LatentCriticConfig::Image {
                channels,
                height,
                width,
                trunk,
                ..
            } => {
                let side = 1usize << trunk.len();
                if trunk.is_empty() || height % side != 0 || width % side != 0 {
                    return Err(Error::Config(format!(
                        "{} stride-2 trunk layers do not divide {height}×{width}",
                        trunk.len()
                    )));
                }
                let mut layers = vec![Layer::Reshape(vec![*channels, *height, *width])];
                let mut c = *channels;
                for (i, &out) in trunk.iter().enumerate() {
                    layers.push(Layer::Conv(Conv2d::new(
                        &format!("{name}.trunk.conv{i}"),
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
                let features = c * (height / side) * (width / side);
                layers.push(Layer::Reshape(vec![features]));
                (Sequential::new(layers), features)
            }
        };
        let k = config.classes();
        Ok(LatentCriticClassifier {
            head_real: Linear::new(&format!("{name}.head_real"), features, 1, rng),
            head_class: Linear::new(&format!("{name}.head_class"), features, k, rng),
            trunk,
            config,
        })
    }

    pub fn config(&self) -> &LatentCriticConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes()
    }

    pub fn heads<'t>(&self, z: Var<'t>) -> Result<CriticHeads<'t>> {
        let h = self.trunk.forward(z)?;
        Ok(CriticHeads {
            real: self
                .head_real
                .forward(h)?
                .clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?,
            class: self.head_class.forward(h)?,
        })
    }

    /// `(N, K)` class posterior `q(c | z)`.
    pub fn class_posterior(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let lp = self.heads(tape.constant(z.clone()))?.class.log_softmax()?;
        Ok(lp.value().map(f64::exp))
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let p = self.class_posterior(z)?;
        Ok((0..p.batch()).map(|i| argmax(p.item(i))).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Module for LatentCriticClassifier {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.trunk.visit_params(f);
        self.head_real.visit_params(f);
        self.head_class.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.trunk.visit_params_mut(f);
        self.head_real.visit_params_mut(f);
        self.head_class.visit_params_mut(f);
    }
}

/// `-mean log C(E(c, ε))`.
pub fn encoder_loss<'t>(critic: &LatentCriticClassifier, fake_z: Var<'t>) -> Result<Var<'t>> {
    real_term(critic.heads(fake_z)?.real)
}

/// `-[mean log C(real) + mean log(1 - C(fake))]`.
pub fn latent_critic_loss<'t>(
    critic: &LatentCriticClassifier,
    fake_z: Var<'t>,
    real_z: Var<'t>,
) -> Result<Var<'t>> {
    real_term(critic.heads(real_z)?.real)?.add(&fake_term(critic.heads(fake_z)?.real)?)
}

/// Class cross-entropy of one batch.
pub fn class_term<'t>(
    critic: &LatentCriticClassifier,
    z: Var<'t>,
    labels: &[usize],
) -> Result<Var<'t>> {
    if labels.len() != z.shape()[0] {
        return Err(Error::Invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            z.shape()[0]
        )));
    }
    critic
        .heads(z)?
        .class
        .softmax_cross_entropy(&one_hot(labels, critic.classes())?)
}

/// Cross-entropy on generated latents plus cross-entropy on real ones.
pub fn classifier_loss<'t>(
    critic: &LatentCriticClassifier,
    fake_z: Var<'t>,
    real_z: Var<'t>,
    fake_labels: &[usize],
    real_labels: &[usize],
) -> Result<Var<'t>> {
    class_term(critic, fake_z, fake_labels)?.add(&class_term(critic, real_z, real_labels)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondParts {
    pub encoder: f64,
    pub critic: f64,
    pub classifier: f64,
}

/// `β_E·L_E + β_Cr·L_CRITIC + β_Cl·L_CLASSIFIER`.
pub fn conditional_total_loss(cfg: &CondConfig, parts: CondParts) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.beta_e * parts.encoder + cfg.beta_cr * parts.critic + cfg.beta_cl * parts.classifier)
}

fn weighted<'t>(
    acc: Option<Var<'t>>,
    w: f64,
    term: impl FnOnce() -> Result<Var<'t>>,
) -> Result<Option<Var<'t>>> {
    if w == 0.0 {
        return Ok(acc);
    }
    let t = term()?.mul_scalar(w)?;
    Ok(Some(match acc {
        Some(a) => a.add(&t)?,
        None => t,
    }))
}

/// Encoder side: `β_E·L_E + β_Cl·CE(fake)`. `None` when every weight is zero.
pub fn encoder_objective<'t>(
    cfg: &CondConfig,
    critic: &LatentCriticClassifier,
    fake_z: Var<'t>,
    fake_labels: &[usize],
) -> Result<Option<Var<'t>>> {
    let acc = weighted(None, cfg.beta_e, || encoder_loss(critic, fake_z))?;
    weighted(acc, cfg.beta_cl, || class_term(critic, fake_z, fake_labels))
}

/// Critic side: `β_Cr·L_CRITIC + β_Cl·L_CLASSIFIER`.
pub fn critic_objective<'t>(
    cfg: &CondConfig,
    critic: &LatentCriticClassifier,
    fake_z: Var<'t>,
    real_z: Var<'t>,
    fake_labels: &[usize],
    real_labels: &[usize],
) -> Result<Option<Var<'t>>> {
    let acc = weighted(None, cfg.beta_cr, || {
        latent_critic_loss(critic, fake_z, real_z)
    })?;
    weighted(acc, cfg.beta_cl, || {
        classifier_loss(critic, fake_z, real_z, fake_labels, real_labels)
    })
}

/// Draws `n` samples of class `class` in the target domain: `F_t⁻¹(E(c, ε))`.
pub fn synthesize(
    encoder: &ConditionEncoder,
    target_flow: &FlowModel,
    class: usize,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    let c = ConditionVector::new(class, encoder.classes())?;
    if encoder.latent_dim() != target_flow.latent_dim() {
        return Err(Error::ShapeMismatch {
            op: "synthesize",
            left: vec![encoder.latent_dim()],
            right: vec![target_flow.latent_dim()],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::randn(vec![n, encoder.noise_dim()], &mut rng);
    let z = encoder.encode_labels(&vec![c.class(); n], &noise)?;
    target_flow.decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zeroed(mut c: LatentCriticClassifier) -> LatentCriticClassifier {
        c.visit_params_mut(&mut |p| p.value = Tensor::zeros(p.shape().to_vec()));
        c
    }

    #[test]
    fn one_hot_validation() {
        assert_eq!(
            ConditionVector::from_one_hot(&[0.0, 1.0, 0.0])
                .unwrap()
                .class(),
            1
        );
        assert!(ConditionVector::from_one_hot(&[1.0, 1.0, 0.0]).is_err());
        assert!(ConditionVector::from_one_hot(&[0.5, 0.5]).is_err());
        assert!(ConditionVector::new(3, 3).is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let e = ConditionEncoder::new("e", EncoderConfig::vector(3, 2), &mut rng(0)).unwrap();
        let noise = Tensor::randn(vec![4, 8], &mut rng(1));
        let a = e.encode_labels(&[0, 0, 1, 2], &noise).unwrap();
        assert_eq!(a.shape(), &[4, 2]);
        assert_eq!(a, e.encode_labels(&[0, 0, 1, 2], &noise).unwrap());
        assert_ne!(a.item(0), a.item(1));
    }

    #[test]
    fn small_image_encoder_matches_flow_layout() {
        let cfg = EncoderConfig::Image {
            classes: 10,
            noise_dim: 4,
            channels: 1,
            height: 8,
            width: 8,
            fc_channels: 4,
            stages: vec![
                UpStage {
                    channels: 4,
                    scale: 2,
                },
                UpStage {
                    channels: 4,
                    scale: 2,
                },
                UpStage {
                    channels: 1,
                    scale: 1,
                },
            ],
        };
        let e = ConditionEncoder::new("e", cfg, &mut rng(0)).unwrap();
        let z = e
            .encode_labels(&[3, 7], &Tensor::randn(vec![2, 4], &mut rng(1)))
            .unwrap();
        assert_eq!(z.shape(), &[2, 64]);
    }

    #[test]
    fn uninformed_heads() {
        let c = zeroed(
            LatentCriticClassifier::new("c", LatentCriticConfig::vector(2, 10), &mut rng(0))
                .unwrap(),
        );
        let tape = Tape::new();
        let z = tape.constant(Tensor::ones(vec![3, 2]));
        let ln2 = std::f64::consts::LN_2;
        assert!((encoder_loss(&c, z).unwrap().to_scalar().unwrap() - ln2).abs() < 1e-12);
        assert!(
            (latent_critic_loss(&c, z, z).unwrap().to_scalar().unwrap() - 2.0 * ln2).abs() < 1e-12
        );
        let ce = class_term(&c, z, &[0, 4, 9]).unwrap().to_scalar().unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert!(class_term(&c, z, &[0, 1]).is_err());
    }

    #[test]
    fn weighted_total() {
        let cfg = CondConfig::default();
        let parts = CondParts {
            encoder: 0.7,
            critic: 1.4,
            classifier: 2.3,
        };
        assert!((conditional_total_loss(&cfg, parts).unwrap() - 4.4).abs() < 1e-12);
        let bad = CondConfig {
            beta_cr: -1.0,
            ..CondConfig::default()
        };
        assert!(conditional_total_loss(&bad, parts).is_err());
    }

    #[test]
    fn synthesize_through_identity_flow_returns_encoder_latents() {
        let e = ConditionEncoder::new("e", EncoderConfig::vector(3, 2), &mut rng(0)).unwrap();
        let f = FlowModel::new("f", FlowConfig::vector(2, 2, 8), &mut rng(1)).unwrap();
        let x = synthesize(&e, &f, 2, 5, 7).unwrap();
        let noise = Tensor::randn(vec![5, 8], &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(x, e.encode_labels(&[2; 5], &noise).unwrap());
        assert_eq!(x, synthesize(&e, &f, 2, 5, 7).unwrap());
        assert!(synthesize(&e, &f, 3, 5, 7).is_err());
    }
}
