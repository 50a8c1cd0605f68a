use rand::Rng;

use crate::diffmath::{Module, Parameter, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{ActNorm, Activation, Conv2d, Layer, Linear, Sequential};

/// Which coordinates a coupling layer leaves untouched.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Vector data: parity 0 keeps the first half, parity 1 the second.
    Halves { parity: u8 },
    /// Images: spatial checkerboard, parity selects the kept color.
    Checkerboard { parity: u8 },
    /// Images: parity 0 keeps the first half of the channels.
    Channel { parity: u8 },
}

/// Affine coupling: kept coordinates pass through and parameterize a
/// scale and shift of the others. The log-scale is bounded by
/// `scale_clamp · tanh(raw / scale_clamp)`.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    pub kind: MaskKind,
    /// Per-item binary mask (1 = kept) for `Halves` and `Checkerboard`.
    mask: Option<Tensor>,
    /// Per-item shape of the data this layer sees.
    item_shape: Vec<usize>,
    pub net: Sequential,
    pub scale_clamp: f64,
}

#[derive(Clone, Debug)]
pub struct NetSpec {
    pub hidden: usize,
    /// Hidden layers for vector nets, residual blocks for image nets.
    pub depth: usize,
    pub activation: Activation,
}

fn halves_mask(dim: usize, parity: u8) -> Tensor {
    let first = dim.div_ceil(2);
    let data = (0..dim)
        .map(|i| {
            if (i < first) == (parity == 0) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_parts(vec![dim], data)
}

fn checkerboard_mask(c: usize, h: usize, w: usize, parity: u8) -> Tensor {
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for y in 0..h {
            for x in 0..w {
                data.push(if (x + y) % 2 == parity as usize {
                    1.0
                } else {
                    0.0
                });
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], data)
}

impl CouplingLayer {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        kind: MaskKind,
        item_shape: &[usize],
        spec: &NetSpec,
        scale_clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidShape {
            op: "coupling",
            shape: item_shape.to_vec(),
            reason: reason.into(),
        };
        let (mask, net) = match kind {
            MaskKind::Halves { parity } => {
                let [dim] = item_shape else {
                    return Err(bad("halves mask needs vector items"));
                };
                if *dim < 2 {
                    return Err(bad("need at least two coordinates to couple"));
                }
                let mut layers = Vec::new();
                let mut width = *dim;
                for i in 0..spec.depth {
                    layers.push(Layer::Linear(Linear::new(
                        &format!("{name}.fc{i}"),
                        width,
                        spec.hidden,
                        rng,
                    )));
                    layers.push(Layer::ActNorm(ActNorm::new(
                        &format!("{name}.norm{i}"),
                        spec.hidden,
                    )));
                    layers.push(Layer::Act(spec.activation));
                    width = spec.hidden;
                }
                layers.push(Layer::Linear(Linear::zeroed(
                    &format!("{name}.out"),
                    width,
                    2 * dim,
                )));
                (Some(halves_mask(*dim, parity)), Sequential::new(layers))
            }
            MaskKind::Checkerboard { parity } => {
                let [c, h, w] = item_shape else {
                    return Err(bad("checkerboard mask needs (C, H, W) items"));
                };
                if h * w < 2 {
                    return Err(bad("checkerboard needs at least two pixels"));
                }
                let net = resnet(name, *c, 2 * c, spec, rng);
                (Some(checkerboard_mask(*c, *h, *w, parity)), net)
            }
            MaskKind::Channel { .. } => {
                let [c, _, _] = item_shape else {
                    return Err(bad("channel mask needs (C, H, W) items"));
                };
                if *c < 2 || c % 2 != 0 {
                    return Err(bad("channel coupling needs an even channel count"));
                }
                (None, resnet(name, c / 2, *c, spec, rng))
            }
        };
        Ok(CouplingLayer {
            kind,
            mask,
            item_shape: item_shape.to_vec(),
            net,
            scale_clamp,
        })
    }

    fn bound_scale<'t>(&self, raw: Var<'t>) -> Result<Var<'t>> {
        raw.mul_scalar(1.0 / self.scale_clamp)?
            .tanh()?
            .mul_scalar(self.scale_clamp)
    }

    /// `(log_scale, shift)` for the transformed part, given the kept part.
    fn scale_shift<'t>(&self, kept: Var<'t>, channels: usize) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.net.forward(kept)?;
        let raw = h.slice(1, 0, channels)?;
        let shift = h.slice(1, channels, channels)?;
        Ok((self.bound_scale(raw)?, shift))
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        match &self.mask {
            Some(mask) => {
                let inv = mask.map(|m| 1.0 - m);
                let kept = x.apply_mask(mask)?;
                let (s, t) = self.scale_shift(kept, self.item_shape[0])?;
                let s = s.apply_mask(&inv)?;
                let t = t.apply_mask(&inv)?;
                let moved = x.apply_mask(&inv)?.mul(&s.exp()?)?.add(&t)?;
                Ok((kept.add(&moved)?, s.sum_per_item()?))
            }
            None => {
                let half = self.item_shape[0] / 2;
                let (a, b) = self.channel_split(x, half)?;
                let (s, t) = self.scale_shift(a, half)?;
                let b = b.mul(&s.exp()?)?.add(&t)?;
                Ok((self.channel_join(a, b)?, s.sum_per_item()?))
            }
        }
    }

    pub fn inverse<'t>(&self, y: Var<'t>) -> Result<Var<'t>> {
        match &self.mask {
            Some(mask) => {
                let inv = mask.map(|m| 1.0 - m);
                let kept = y.apply_mask(mask)?;
                let (s, t) = self.scale_shift(kept, self.item_shape[0])?;
                let s = s.apply_mask(&inv)?;
                let t = t.apply_mask(&inv)?;
                let moved = y.sub(&t)?.apply_mask(&inv)?.mul(&s.neg()?.exp()?)?;
                kept.add(&moved)
            }
            None => {
                let half = self.item_shape[0] / 2;
                let (a, b) = self.channel_split(y, half)?;
                let (s, t) = self.scale_shift(a, half)?;
                let b = b.sub(&t)?.mul(&s.neg()?.exp()?)?;
                self.channel_join(a, b)
            }
        }
    }

    /// `(kept, transformed)` channel halves.
    fn channel_split<'t>(&self, x: Var<'t>, half: usize) -> Result<(Var<'t>, Var<'t>)> {
        let lo = x.slice(1, 0, half)?;
        let hi = x.slice(1, half, half)?;
        Ok(match self.kind {
            MaskKind::Channel { parity: 0 } => (lo, hi),
            _ => (hi, lo),
        })
    }

    fn channel_join<'t>(&self, kept: Var<'t>, moved: Var<'t>) -> Result<Var<'t>> {
        match self.kind {
            MaskKind::Channel { parity: 0 } => Var::concat(&[kept, moved], 1),
            _ => Var::concat(&[moved, kept], 1),
        }
    }

    /// Kept-coordinate input the scale/shift net sees for `x`.
    pub(crate) fn net_input(&self, x: &Tensor) -> Result<Tensor> {
        let tape = crate::diffmath::Tape::no_grad();
        let v = tape.constant(x.clone());
        let kept = match &self.mask {
            Some(mask) => v.apply_mask(mask)?,
            None => self.channel_split(v, self.item_shape[0] / 2)?.0,
        };
        Ok((*kept.value()).clone())
    }
}

impl Module for CouplingLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.net.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.net.visit_params_mut(f);
    }
}

/// Convolutional scale/shift net: stem, residual blocks, zero-initialized head.
fn resnet<R: Rng + ?Sized>(
    name: &str,
    input: usize,
    output: usize,
    spec: &NetSpec,
    rng: &mut R,
) -> Sequential {
    let hid = spec.hidden;
    let mut layers = vec![Layer::Conv(Conv2d::new(
        &format!("{name}.stem"),
        input,
        hid,
        3,
        1,
        1,
        rng,
    ))];
    for b in 0..spec.depth {
        let p = format!("{name}.block{b}");
        layers.push(Layer::Residual(Sequential::new(vec![
            Layer::ActNorm(ActNorm::new(&format!("{p}.norm0"), hid)),
            Layer::Act(spec.activation),
            Layer::Conv(Conv2d::new(&format!("{p}.conv0"), hid, hid, 3, 1, 1, rng)),
            Layer::ActNorm(ActNorm::new(&format!("{p}.norm1"), hid)),
            Layer::Act(spec.activation),
            Layer::Conv(Conv2d::new(&format!("{p}.conv1"), hid, hid, 3, 1, 1, rng)),
        ])));
    }
    layers.push(Layer::ActNorm(ActNorm::new(
        &format!("{name}.norm_out"),
        hid,
    )));
    layers.push(Layer::Act(spec.activation));
    layers.push(Layer::Conv(Conv2d::zeroed(
        &format!("{name}.head"),
        hid,
        output,
        3,
        1,
        1,
    )));
    Sequential::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_partition_coordinates() {
        for dim in 2..9 {
            let a = halves_mask(dim, 0);
            let b = halves_mask(dim, 1);
            let kept: f64 = a.sum();
            assert!(kept >= 1.0 && kept < dim as f64);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x + y, 1.0);
            }
        }
        let c = checkerboard_mask(1, 4, 4, 0);
        assert_eq!(c.sum(), 8.0);
    }
}
