//! Differentiable primitives on [`Var`].

use super::kernels::{self, ConvGeom, View};
use super::tape::{BackwardFn, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    // innermost axis in a tight loop, odometer over the rest
    let inner = out[nd - 1];
    let (step_a, step_b) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for k in 0..inner {
            f(o + k, ia + k * step_a, ib + k * step_b);
        }
        o += inner;
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let strides = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![0.0; target.iter().product()];
    for_each_broadcast(out, &strides, &zeros, |o, it, _| acc[it] += grad[o]);
    acc
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<'t> Var<'t> {
    fn binary(&self, other: &Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let mut data = vec![0.0; out_shape.iter().product()];
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
            data
        };
        let os = out_shape.clone();
        let backward: BackwardFn = Box::new(move |g, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            match kind {
                Binary::Add => vec![
                    Some(reduce_to(g, &os, a.shape())),
                    Some(reduce_to(g, &os, b.shape())),
                ],
                Binary::Sub => {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    vec![
                        Some(reduce_to(g, &os, a.shape())),
                        Some(reduce_to(&neg, &os, b.shape())),
                    ]
                }
                Binary::Mul => {
                    if a.shape() == b.shape() {
                        let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                        let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                        return vec![Some(ga), Some(gb)];
                    }
                    let mut ga = vec![0.0; g.len()];
                    let mut gb = vec![0.0; g.len()];
                    let sa = broadcast_strides(a.shape(), &os);
                    let sb = broadcast_strides(b.shape(), &os);
                    let (ad, bd) = (a.data(), b.data());
                    for_each_broadcast(&os, &sa, &sb, |o, i, j| {
                        ga[o] = g[o] * bd[j];
                        gb[o] = g[o] * ad[i];
                    });
                    vec![
                        Some(reduce_to(&ga, &os, a.shape())),
                        Some(reduce_to(&gb, &os, b.shape())),
                    ]
                }
            }
        });
        self.tape.record(
            op,
            &[*self, *other],
            Tensor::from_parts(out_shape, data),
            backward,
        )
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    /// Multiplies by a constant (typically binary) mask.
    pub fn apply_mask(&self, mask: &Tensor) -> Result<Var<'t>> {
        let m = self.tape.constant(mask.clone());
        self.mul(&m)
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f);
        let backward: BackwardFn = Box::new(move |g, inputs, out| {
            let gx = g
                .iter()
                .zip(inputs[0].data())
                .zip(out.data())
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(gx)]
        });
        self.tape.record(op, &[*self], y, backward)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                reason: format!("log of non-positive value {bad}"),
            });
        }
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Var<'t>> {
        let x = self.value();
        let backward: BackwardFn = Box::new(|g, inputs, _| vec![Some(vec![g[0]; inputs[0].len()])]);
        self.tape
            .record("sum", &[*self], Tensor::scalar(x.sum()), backward)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.len() as f64;
        let backward: BackwardFn =
            Box::new(move |g, inputs, _| vec![Some(vec![g[0] / n; inputs[0].len()])]);
        self.tape
            .record("mean", &[*self], Tensor::scalar(x.sum() / n), backward)
    }

    /// Sums everything but the leading axis: `(N, ...) -> (N)`.
    pub fn sum_per_item(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = x.batch();
        let k = x.item_len();
        let data = (0..n).map(|i| x.item(i).iter().sum()).collect();
        let backward: BackwardFn = Box::new(move |g, _, _| {
            let mut gx = Vec::with_capacity(n * k);
            for gi in g {
                gx.extend(std::iter::repeat_n(*gi, k));
            }
            vec![Some(gx)]
        });
        self.tape.record(
            "sum_per_item",
            &[*self],
            Tensor::from_parts(vec![n], data),
            backward,
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let backward: BackwardFn = Box::new(|g, _, _| vec![Some(g.to_vec())]);
        self.tape.record("reshape", &[*self], y, backward)
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let c = kernels::matmul(a.data(), b.data(), m, k, n);
        let backward: BackwardFn = Box::new(move |g, inputs, _| {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = kernels::gemm(View::rows(g, n), View::transposed(b, n), m, n, k);
            let gb = kernels::gemm(View::transposed(a, k), View::rows(g, n), k, m, n);
            vec![Some(ga), Some(gb)]
        });
        self.tape.record(
            "matmul",
            &[*self, *other],
            Tensor::from_parts(vec![m, n], c),
            backward,
        )
    }

    /// 2-D convolution with square kernel, stride and zero padding.
    /// `self: (N, C, H, W)`, `weight: (O, C, k, k)`.
    pub fn conv2d(&self, weight: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let g = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
        };
        if xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[2] {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs.to_vec(),
                reason: format!("kernel {} larger than padded input", ws[2]),
            });
        }
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = g.out_hw();
        let y = kernels::conv2d(x.data(), w.data(), n, o, &g);
        let backward: BackwardFn = Box::new(move |gout, inputs, _| {
            let (gx, gw) =
                kernels::conv2d_backward(inputs[0].data(), inputs[1].data(), gout, n, o, &g);
            vec![Some(gx), Some(gw)]
        });
        self.tape.record(
            "conv2d",
            &[*self, *weight],
            Tensor::from_parts(vec![n, o, ho, wo], y),
            backward,
        )
    }

    /// Transposed convolution (fractionally strided upsampling).
    /// `self: (N, C, H, W)`, `weight: (C, O, k, k)`; output side is
    /// `(H - 1)·stride - 2·padding + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'t>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let k = ws[2];
        let ho = ((xs[2] - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&h| h > 0)
            .ok_or_else(|| Error::InvalidShape {
                op: "conv_transpose2d",
                shape: xs.to_vec(),
                reason: "padding removes the whole output".into(),
            })?;
        let wo = (xs[3] - 1) * stride + k - 2 * padding;
        let g = ConvGeom {
            channels: ws[1],
            height: ho,
            width: wo,
            kernel: k,
            stride,
            padding,
        };
        let (n, c) = (xs[0], xs[1]);
        let y = kernels::conv_transpose2d(x.data(), w.data(), n, c, &g);
        let backward: BackwardFn = Box::new(move |gout, inputs, _| {
            let (gx, gw) = kernels::conv_transpose2d_backward(
                inputs[0].data(),
                inputs[1].data(),
                gout,
                n,
                c,
                &g,
            );
            vec![Some(gx), Some(gw)]
        });
        self.tape.record(
            "conv_transpose2d",
            &[*self, *weight],
            Tensor::from_parts(vec![n, ws[1], ho, wo], y),
            backward,
        )
    }

    /// Per-channel affine map `y = x·scale[c] + bias[c]` along axis 1.
    pub fn channel_affine(&self, scale: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (s, b) = (scale.value(), bias.value());
        let xs = x.shape();
        if xs.len() < 2 || s.shape() != [xs[1]] || b.shape() != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: xs.to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let mut y = x.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                let (sv, bv) = (s.data()[ch], b.data()[ch]);
                for v in &mut y[base..base + inner] {
                    *v = *v * sv + bv;
                }
            }
        }
        let backward: BackwardFn = Box::new(move |g, inputs, _| {
            let (x, s) = (inputs[0].data(), inputs[1].data());
            let mut gx = vec![0.0; g.len()];
            let mut gs = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * inner;
                    for j in base..base + inner {
                        gx[j] = g[j] * s[ch];
                        gs[ch] += g[j] * x[j];
                        gb[ch] += g[j];
                    }
                }
            }
            vec![Some(gx), Some(gs), Some(gb)]
        });
        self.tape.record(
            "channel_affine",
            &[*self, *scale, *bias],
            Tensor::from_parts(xs.to_vec(), y),
            backward,
        )
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ex = extents.clone();
        let backward: BackwardFn = Box::new(move |g, _, _| {
            let mut grads: Vec<Vec<f64>> = ex
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&ex) {
                    gi.extend_from_slice(&g[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        });
        first
            .tape
            .record("concat", parts, Tensor::from_parts(shape, data), backward)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: xs,
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let ext = xs[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * ext + start) * inner;
            data.extend_from_slice(&x.data()[b..b + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let backward: BackwardFn = Box::new(move |g, _, _| {
            let mut gx = vec![0.0; outer * ext * inner];
            for o in 0..outer {
                let b = (o * ext + start) * inner;
                gx[b..b + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        });
        self.tape
            .record("slice", &[*self], Tensor::from_parts(shape, data), backward)
    }

    /// Space-to-depth: `(N, C, H, W) -> (N, 4C, H/2, W/2)`.
    ///
    /// Output channel `4c + 2dy + dx` holds pixel `(2y + dy, 2x + dx)` of
    /// input channel `c`.
    pub fn squeeze2d(&self) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "squeeze2d",
                shape: xs,
                reason: "needs (N, C, H, W) with even H and W".into(),
            });
        }
        let perm = squeeze_perm(&xs);
        let data = perm.iter().map(|&src| x.data()[src]).collect();
        let backward: BackwardFn = Box::new(move |g, _, _| {
            let mut gx = vec![0.0; g.len()];
            for (o, &src) in perm.iter().enumerate() {
                gx[src] = g[o];
            }
            vec![Some(gx)]
        });
        let out = vec![xs[0], xs[1] * 4, xs[2] / 2, xs[3] / 2];
        self.tape.record(
            "squeeze2d",
            &[*self],
            Tensor::from_parts(out, data),
            backward,
        )
    }

    /// Inverse of [`Var::squeeze2d`].
    pub fn unsqueeze2d(&self) -> Result<Var<'t>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 || xs[1] % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "unsqueeze2d",
                shape: xs,
                reason: "needs (N, 4C, H, W)".into(),
            });
        }
        let big = vec![xs[0], xs[1] / 4, xs[2] * 2, xs[3] * 2];
        let perm = squeeze_perm(&big);
        let mut data = vec![0.0; x.len()];
        for (o, &dst) in perm.iter().enumerate() {
            data[dst] = x.data()[o];
        }
        let backward: BackwardFn = Box::new(move |g, _, _| {
            let gx = perm.iter().map(|&dst| g[dst]).collect();
            vec![Some(gx)]
        });
        self.tape.record(
            "unsqueeze2d",
            &[*self],
            Tensor::from_parts(big, data),
            backward,
        )
    }

    /// Row-wise log-softmax of a `(N, K)` matrix.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = rows_cols("log_softmax", &x)?;
        let mut y = vec![0.0; n * k];
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                y[i * k + j] = row[j] - lse;
            }
        }
        let backward: BackwardFn = Box::new(move |g, _, out| {
            let y = out.data();
            let mut gx = vec![0.0; n * k];
            for i in 0..n {
                let gs: f64 = g[i * k..(i + 1) * k].iter().sum();
                for j in 0..k {
                    gx[i * k + j] = g[i * k + j] - y[i * k + j].exp() * gs;
                }
            }
            vec![Some(gx)]
        });
        self.tape.record(
            "log_softmax",
            &[*self],
            Tensor::from_parts(vec![n, k], y),
            backward,
        )
    }

    /// Fused softmax + cross-entropy against target distributions
    /// (rows of `targets` sum to one). Returns the mean over rows.
    pub fn softmax_cross_entropy(&self, targets: &Tensor) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = rows_cols("softmax_cross_entropy", &x)?;
        if targets.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: x.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                let lp = row[j] - lse;
                probs[i * k + j] = lp.exp();
                loss -= targets.data()[i * k + j] * lp;
            }
        }
        loss /= n as f64;
        let t = targets.clone();
        let row_mass: Vec<f64> = (0..n)
            .map(|i| t.data()[i * k..(i + 1) * k].iter().sum())
            .collect();
        let backward: BackwardFn = Box::new(move |g, _, _| {
            let scale = g[0] / n as f64;
            let gx = probs
                .iter()
                .enumerate()
                .map(|(idx, p)| scale * (p * row_mass[idx / k] - t.data()[idx]))
                .collect();
            vec![Some(gx)]
        });
        self.tape.record(
            "softmax_cross_entropy",
            &[*self],
            Tensor::scalar(loss),
            backward,
        )
    }
}

fn rows_cols(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expects a (N, K) matrix".into(),
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Source index in the `(N, C, H, W)` tensor for each squeezed output slot.
fn squeeze_perm(xs: &[usize]) -> Vec<usize> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut perm = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            perm.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * x + dx);
                        }
                    }
                }
            }
        }
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn add_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.variable(t(&[2], &[0.5, -0.5]));
        let l = x.add(&b).unwrap().sum().unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3., 3.]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., -2., 3.5, 4.]));
        assert_eq!(i.matmul(&m).unwrap().value().data(), &[1., -2., 3.5, 4.]);
    }

    #[test]
    fn conv_ones_interior_is_nine() {
        let tape = Tape::new();
        let img = tape.constant(Tensor::ones(vec![1, 1, 5, 5]));
        let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = img.conv2d(&k, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.data()[r * 5 + c], 9.0);
            }
        }
        // corners see a 2×2 window, edges a 2×3 one
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn sum_of_square_grad() {
        let tape = Tape::new();
        let w = tape.variable(t(&[1], &[3.]));
        let l = w.mul(&w).unwrap().sum().unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[6.]);
    }

    #[test]
    fn mean_grad_is_uniform() {
        let tape = Tape::new();
        let x = tape.variable(t(&[4], &[1., -2., 5., 0.]));
        let l = x.mean().unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn ln_of_negative_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(x.ln(), Err(Error::Domain { .. })));
    }

    #[test]
    fn exp_overflow_is_finite_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        assert!(matches!(x.exp(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn squeeze_roundtrip() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 1, 4, 4], &data));
        let s = x.squeeze2d().unwrap();
        assert_eq!(s.shape(), vec![2, 4, 2, 2]);
        // first channel takes the even-row, even-column pixels
        assert_eq!(&s.value().data()[..4], &[0., 2., 8., 10.]);
        let back = s.unsqueeze2d().unwrap();
        assert_eq!(back.value().data(), &data[..]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        assert_eq!(
            c.value().data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
        let back = c.slice(1, 1, 2).unwrap();
        assert_eq!(back.value().data(), b.value().data());
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 10]));
        let mut target = Tensor::zeros(vec![3, 10]);
        for i in 0..3 {
            target.data_mut()[i * 10 + i] = 1.0;
        }
        let l = logits
            .softmax_cross_entropy(&target)
            .unwrap()
            .to_scalar()
            .unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }
}
