//! Affine-coupling normalizing flows.
//!
//! A [`FlowModel`] is a bijection `F: x -> z` onto a standard normal latent
//! space. The log-Jacobian is accumulated from the per-layer log-scales, so
//! `log p(x) = log N(F(x); 0, I) + log|det dF/dx|` is exact.
//!
//! Image flows use the multi-scale layout: checkerboard couplings, a
//! squeeze, channel couplings, then half the channels are factored out.
//! The flattened latent concatenates the factored pieces in scale order
//! followed by the final-scale output, each piece in channel, row, column
//! order.

mod coupling;
pub mod dequant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use coupling::{CouplingLayer, MaskKind, NetSpec};
pub use dequant::{dequantize, dequantize_with_noise, quantize, Dequantized, LOGIT_ALPHA};

use crate::diffmath::{Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Activation;

pub const DEFAULT_SCALE_CLAMP: f64 = 2.0;

/// Flow architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowConfig {
    /// Low-dimensional data: alternating-half couplings with fully
    /// connected scale/shift nets.
    Vector {
        dim: usize,
        couplings: usize,
        hidden: usize,
        #[serde(default = "default_depth")]
        depth: usize,
    },
    /// Multi-scale image flow, `(scales, channels, blocks)` as in RealNVP.
    Image {
        channels: usize,
        height: usize,
        width: usize,
        scales: usize,
        hidden_channels: usize,
        blocks: usize,
    },
}

fn default_depth() -> usize {
    2
}

impl FlowConfig {
    pub fn vector(dim: usize, couplings: usize, hidden: usize) -> Self {
        FlowConfig::Vector {
            dim,
            couplings,
            hidden,
            depth: default_depth(),
        }
    }

    /// RealNVP(2, 64, 8) on single-channel 32×32 images.
    pub fn image_default() -> Self {
        FlowConfig::Image {
            channels: 1,
            height: 32,
            width: 32,
            scales: 2,
            hidden_channels: 64,
            blocks: 8,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            FlowConfig::Vector { dim, .. } => vec![dim],
            FlowConfig::Image {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
        }
    }

    pub fn dim(&self) -> usize {
        self.input_shape().iter().product()
    }
}

#[derive(Clone, Debug)]
enum Step {
    Coupling(CouplingLayer),
    Squeeze,
    /// Split off the first half of the channels as a finished latent piece.
    FactorOut,
}

/// Latent codes with the log-determinant of the map that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    /// `(N, latent_dim)`
    pub z: Tensor,
    pub log_det: Option<Vec<f64>>,
}

pub struct FlowOutput<'t> {
    /// `(N, latent_dim)` flattened latent.
    pub z: Var<'t>,
    /// `(N)` log|det ∂F/∂x|.
    pub log_det: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    config: FlowConfig,
    steps: Vec<Step>,
    /// Per-item shapes of the latent pieces, in flattening order.
    pieces: Vec<Vec<usize>>,
}

fn at_layer(layer: usize, context: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::Domain { .. } => Error::FlowNonFinite { layer, context },
        other => other,
    }
}

fn flat(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(name: &str, config: FlowConfig, rng: &mut R) -> Result<Self> {
        Self::with_clamp(name, config, DEFAULT_SCALE_CLAMP, rng)
    }

    pub fn with_clamp<R: Rng + ?Sized>(
        name: &str,
        config: FlowConfig,
        scale_clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(scale_clamp > 0.0) {
            return Err(Error::Config(format!(
                "scale clamp must be positive, got {scale_clamp}"
            )));
        }
        let mut steps = Vec::new();
        let mut pieces = Vec::new();
        match config {
            FlowConfig::Vector {
                dim,
                couplings,
                hidden,
                depth,
            } => {
                if couplings == 0 {
                    return Err(Error::Config("a flow needs at least one coupling".into()));
                }
                let spec = NetSpec {
                    hidden,
                    depth,
                    activation: Activation::Tanh,
                };
                for i in 0..couplings {
                    let kind = MaskKind::Halves {
                        parity: (i % 2) as u8,
                    };
                    steps.push(Step::Coupling(CouplingLayer::new(
                        &format!("{name}.coupling{i}"),
                        kind,
                        &[dim],
                        &spec,
                        scale_clamp,
                        rng,
                    )?));
                }
                pieces.push(vec![dim]);
            }
            FlowConfig::Image {
                channels,
                height,
                width,
                scales,
                hidden_channels,
                blocks,
            } => {
                if scales == 0 {
                    return Err(Error::Config(
                        "an image flow needs at least one scale".into(),
                    ));
                }
                let side = 1usize << (scales - 1);
                if height % side != 0 || width % side != 0 {
                    return Err(Error::Config(format!(
                        "{height}×{width} images cannot be squeezed {} times",
                        scales - 1
                    )));
                }
                let spec = NetSpec {
                    hidden: hidden_channels,
                    depth: blocks,
                    activation: Activation::LeakyRelu,
                };
                let (mut c, mut h, mut w) = (channels, height, width);
                let mut k = 0;
                let mut coupling =
                    |kind: MaskKind, shape: [usize; 3], rng: &mut R| -> Result<Step> {
                        let layer = CouplingLayer::new(
                            &format!("{name}.coupling{k}"),
                            kind,
                            &shape,
                            &spec,
                            scale_clamp,
                            rng,
                        )?;
                        k += 1;
                        Ok(Step::Coupling(layer))
                    };
                for s in 0..scales {
                    let last = s + 1 == scales;
                    let n_checker = if last { 4 } else { 3 };
                    for i in 0..n_checker {
                        steps.push(coupling(
                            MaskKind::Checkerboard {
                                parity: (i % 2) as u8,
                            },
                            [c, h, w],
                            rng,
                        )?);
                    }
                    if last {
                        break;
                    }
                    steps.push(Step::Squeeze);
                    c *= 4;
                    h /= 2;
                    w /= 2;
                    for i in 0..3 {
                        steps.push(coupling(
                            MaskKind::Channel {
                                parity: (i % 2) as u8,
                            },
                            [c, h, w],
                            rng,
                        )?);
                    }
                    steps.push(Step::FactorOut);
                    pieces.push(vec![c / 2, h, w]);
                    c /= 2;
                }
                pieces.push(vec![c, h, w]);
            }
        }
        Ok(FlowModel {
            config,
            steps,
            pieces,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.config.input_shape()
    }

    pub fn latent_dim(&self) -> usize {
        self.pieces.iter().map(|p| flat(p)).sum()
    }

    pub fn num_couplings(&self) -> usize {
        self.couplings().count()
    }

    pub fn couplings(&self) -> impl Iterator<Item = &CouplingLayer> {
        self.steps.iter().filter_map(|s| match s {
            Step::Coupling(c) => Some(c),
            _ => None,
        })
    }

    pub fn couplings_mut(&mut self) -> impl Iterator<Item = &mut CouplingLayer> {
        self.steps.iter_mut().filter_map(|s| match s {
            Step::Coupling(c) => Some(c),
            _ => None,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let item = self.input_shape();
        if shape.len() != item.len() + 1 || shape[1..] != item[..] {
            return Err(Error::ShapeMismatch {
                op: "flow_forward",
                left: shape.to_vec(),
                right: item,
            });
        }
        Ok(())
    }

    /// `z = F(x)` together with the per-sample log-determinant.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<FlowOutput<'t>> {
        self.check_input(&x.shape())?;
        let tape = x.tape();
        let n = x.shape()[0];
        let mut h = x;
        let mut log_det = tape.constant(Tensor::zeros(vec![n]));
        let mut done: Vec<Var<'t>> = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            let wrap = at_layer(i, "forward");
            match step {
                Step::Coupling(c) => {
                    let (y, ld) = c.forward(h).map_err(&wrap)?;
                    h = y;
                    log_det = log_det.add(&ld).map_err(&wrap)?;
                }
                Step::Squeeze => h = h.squeeze2d()?,
                Step::FactorOut => {
                    let c = h.shape()[1];
                    let out = h.slice(1, 0, c / 2)?;
                    done.push(out.reshape(vec![n, flat(&out.shape()[1..])])?);
                    h = h.slice(1, c / 2, c - c / 2)?;
                }
            }
        }
        let tail = h.reshape(vec![n, flat(&h.shape()[1..])])?;
        done.push(tail);
        let z = if done.len() == 1 {
            done[0]
        } else {
            Var::concat(&done, 1)?
        };
        Ok(FlowOutput { z, log_det })
    }

    /// `x = F⁻¹(z)` for flattened latents `(N, latent_dim)`.
    pub fn inverse<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: "flow_inverse",
                left: zs,
                right: vec![self.latent_dim()],
            });
        }
        let n = zs[0];
        let mut offsets = Vec::with_capacity(self.pieces.len());
        let mut off = 0;
        for p in &self.pieces {
            offsets.push(off);
            off += flat(p);
        }
        let piece = |k: usize| -> Result<Var<'t>> {
            let p = &self.pieces[k];
            let mut shape = vec![n];
            shape.extend_from_slice(p);
            z.slice(1, offsets[k], flat(p))?.reshape(shape)
        };
        let mut next_piece = self.pieces.len() - 1;
        let mut h = piece(next_piece)?;
        for (i, step) in self.steps.iter().enumerate().rev() {
            let wrap = at_layer(i, "inverse");
            match step {
                Step::Coupling(c) => h = c.inverse(h).map_err(&wrap)?,
                Step::Squeeze => h = h.unsqueeze2d()?,
                Step::FactorOut => {
                    next_piece -= 1;
                    h = Var::concat(&[piece(next_piece)?, h], 1)?;
                }
            }
        }
        Ok(h)
    }

    /// Per-sample `log p(x)` under the standard normal prior.
    pub fn log_prob<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let out = self.forward(x)?;
        standard_normal_log_density(out.z)?.add(&out.log_det)
    }

    /// Initializes every normalization layer from one batch. Layers that
    /// were already initialized are left alone.
    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for step in &mut self.steps {
            let tape = Tape::no_grad();
            match step {
                Step::Coupling(c) => {
                    let input = c.net_input(&h)?;
                    c.net.data_init(&input)?;
                    let (y, _) = c.forward(tape.constant(h))?;
                    h = (*y.value()).clone();
                }
                Step::Squeeze => h = (*tape.constant(h).squeeze2d()?.value()).clone(),
                Step::FactorOut => {
                    let ch = h.shape()[1];
                    h = (*tape.constant(h).slice(1, ch / 2, ch - ch / 2)?.value()).clone();
                }
            }
        }
        Ok(())
    }

    pub fn mark_initialized(&mut self) {
        for c in self.couplings_mut() {
            c.net.mark_initialized();
        }
    }

    pub fn encode(&self, x: &Tensor) -> Result<LatentBatch> {
        let mut log_det = Vec::with_capacity(x.batch());
        let z = in_chunks(x, |c| {
            let tape = Tape::no_grad();
            let out = self.forward(tape.constant(c.clone()))?;
            log_det.extend_from_slice(out.log_det.value().data());
            Ok((*out.z.value()).clone())
        })?;
        Ok(LatentBatch {
            z,
            log_det: Some(log_det),
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        in_chunks(z, |c| {
            let tape = Tape::no_grad();
            Ok((*self.inverse(tape.constant(c.clone()))?.value()).clone())
        })
    }

    pub fn log_prob_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.batch());
        in_chunks(x, |c| {
            let tape = Tape::no_grad();
            let lp = (*self.log_prob(tape.constant(c.clone()))?.value()).clone();
            out.extend_from_slice(lp.data());
            Ok(lp)
        })?;
        Ok(out)
    }

    /// Reshapes flat latents to the per-item shape of each latent piece,
    /// for visual inspection.
    pub fn latent_pieces(&self) -> &[Vec<usize>] {
        &self.pieces
    }
}

impl Module for FlowModel {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for c in self.couplings() {
            c.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for c in self.couplings_mut() {
            c.visit_params_mut(f);
        }
    }
}

/// `log N(z; 0, I)` per row of a `(N, D)` batch.
pub fn standard_normal_log_density<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let d = z.shape()[1..].iter().product::<usize>() as f64;
    z.square()?
        .sum_per_item()?
        .mul_scalar(-0.5)?
        .add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

fn check_compatible(src: &FlowModel, dst: &FlowModel) -> Result<()> {
    if src.latent_dim() != dst.latent_dim() || src.pieces != dst.pieces {
        return Err(Error::ShapeMismatch {
            op: "translate",
            left: vec![src.latent_dim()],
            right: vec![dst.latent_dim()],
        });
    }
    Ok(())
}

/// `dst⁻¹(src(x))`, differentiable through both flows.
pub fn translate_var<'t>(src: &FlowModel, dst: &FlowModel, x: Var<'t>) -> Result<Var<'t>> {
    check_compatible(src, dst)?;
    dst.inverse(src.forward(x)?.z)
}

/// Cross-domain translation `dst⁻¹ ∘ src`.
pub fn translate(src: &FlowModel, dst: &FlowModel, x: &Tensor) -> Result<Tensor> {
    in_chunks(x, |c| {
        let tape = Tape::no_grad();
        Ok((*translate_var(src, dst, tape.constant(c.clone()))?.value()).clone())
    })
}

/// Items per no-grad pass. Tapes keep every intermediate value alive, so
/// large batches are pushed through in pieces; items never interact once
/// the normalization layers are initialized.
pub const INFERENCE_CHUNK: usize = 256;

/// Applies `f` to consecutive batch slices and concatenates the results.
pub fn in_chunks(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.batch();
    if n <= INFERENCE_CHUNK {
        return f(x);
    }
    let parts = (0..n)
        .step_by(INFERENCE_CHUNK)
        .map(|s| f(&x.select(&(s..(s + INFERENCE_CHUNK).min(n)).collect::<Vec<_>>())))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Makes every coupling output non-zero so the flow is not the identity.
    pub(crate) fn randomize(flow: &mut FlowModel, seed: u64, scale: f64) {
        let mut r = rng(seed);
        flow.visit_params_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v += scale
                    * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r);
            }
        });
    }

    #[test]
    fn fresh_flow_is_identity() {
        let flow = FlowModel::new("f", FlowConfig::vector(4, 4, 16), &mut rng(0)).unwrap();
        let x = Tensor::randn(vec![5, 4], &mut rng(1));
        let out = flow.encode(&x).unwrap();
        assert_eq!(out.z, x);
        assert!(out.log_det.unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(flow.decode(&x).unwrap(), x);
    }

    #[test]
    fn identity_log_prob_at_origin() {
        let flow = FlowModel::new("f", FlowConfig::vector(2, 2, 8), &mut rng(0)).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let lp = flow.log_prob_values(&x).unwrap();
        let l2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((lp[0] + l2pi).abs() < 1e-12);
        assert!((lp[1] + l2pi + 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_affine_coupling_closed_form() {
        // zero weights, head bias set so log-scale = s0 and shift = t0
        let (s0, t0) = (0.7, -1.3);
        let mut flow = FlowModel::new("f", FlowConfig::vector(2, 1, 4), &mut rng(0)).unwrap();
        {
            let c = flow.couplings_mut().next().unwrap();
            c.visit_params_mut(&mut |p| {
                for v in p.value.data_mut() {
                    *v = 0.0;
                }
            });
            let raw = DEFAULT_SCALE_CLAMP * (s0 / DEFAULT_SCALE_CLAMP).atanh();
            let head = match c.net.layers.last_mut().unwrap() {
                crate::nn::Layer::Linear(l) => l,
                _ => unreachable!(),
            };
            // outputs: [s_a, s_b, t_a, t_b]; only the b half is transformed
            head.bias
                .value
                .data_mut()
                .copy_from_slice(&[9.0, raw, 9.0, t0]);
        }
        let x = Tensor::new(vec![1, 2], vec![0.4, 2.5]).unwrap();
        let out = flow.encode(&x).unwrap();
        assert!((out.z.data()[0] - 0.4).abs() < 1e-15);
        assert!((out.z.data()[1] - (2.5 * s0.exp() + t0)).abs() < 1e-12);
        assert!((out.log_det.unwrap()[0] - s0).abs() < 1e-12);
        let back = flow.decode(&out.z).unwrap();
        assert!((back.data()[1] - (out.z.data()[1] - t0) * (-s0).exp()).abs() < 1e-12);
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn image_flow_latent_dim_matches_input() {
        let cfg = FlowConfig::Image {
            channels: 1,
            height: 8,
            width: 8,
            scales: 2,
            hidden_channels: 4,
            blocks: 1,
        };
        let mut flow = FlowModel::new("img", cfg, &mut rng(3)).unwrap();
        assert_eq!(flow.latent_dim(), 64);
        assert_eq!(flow.latent_pieces(), &[vec![2, 4, 4], vec![2, 4, 4]]);
        randomize(&mut flow, 5, 0.05);
        let x = Tensor::randn(vec![3, 1, 8, 8], &mut rng(4));
        let z = flow.encode(&x).unwrap().z;
        assert_eq!(z.shape(), &[3, 64]);
        let back = flow.decode(&z).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn translate_rejects_layout_mismatch() {
        let a = FlowModel::new("a", FlowConfig::vector(2, 2, 4), &mut rng(0)).unwrap();
        let b = FlowModel::new("b", FlowConfig::vector(3, 2, 4), &mut rng(0)).unwrap();
        let x = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            translate(&a, &b, &x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let a = FlowModel::new("a", FlowConfig::vector(2, 2, 4), &mut rng(0)).unwrap();
        assert!(a.encode(&Tensor::zeros(vec![3, 5])).is_err());
    }
}
