use crate::diffmath::{Module, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one module, in its parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Moments shaped like `module`'s parameters.
    pub fn for_module<M: Module + ?Sized>(lr: f64, module: &M) -> Self {
        let mut s = Self::new(lr);
        for p in module.params() {
            s.m.push(Tensor::zeros(p.shape().to_vec()));
            s.v.push(Tensor::zeros(p.shape().to_vec()));
        }
        s
    }

    /// One bias-corrected update of `values` given `grads`.
    pub fn update(&mut self, values: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if values.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameters but {} gradients",
                values.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() && self.step == 0 {
            self.m = values
                .iter()
                .map(|v| Tensor::zeros(v.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != values.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                values.len()
            )));
        }
        for (i, (val, g)) in values.iter().zip(grads).enumerate() {
            for other in [g.shape(), self.m[i].shape()] {
                if val.shape() != other {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        left: val.shape().to_vec(),
                        right: other.to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (val, g)) in values.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in val.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies the accumulated `grad` slots of `module` and clears them.
/// Parameters without a gradient count as zero gradient.
pub fn adam_step<M: Module + ?Sized>(state: &mut AdamState, module: &mut M) -> Result<()> {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    module.visit_params_mut(&mut |p| {
        let g = p
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        grads.push(g);
        values.push(p.value.clone());
    });
    let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
    let grefs: Vec<&Tensor> = grads.iter().collect();
    state.update(&mut refs, &grefs)?;
    let mut it = values.into_iter();
    module.visit_params_mut(&mut |p| p.value = it.next().expect("parameter count is stable"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{Parameter, Tape};

    struct One(Parameter);
    impl Module for One {
        fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut w = Tensor::from_slice(&[1.0, -2.0]).unwrap();
        let g = Tensor::from_slice(&[0.3, -4.0]).unwrap();
        let mut s = AdamState::new(0.01);
        s.update(&mut [&mut w], &[&g]).unwrap();
        for (i, (&w0, &gi)) in [1.0f64, -2.0].iter().zip(g.data()).enumerate() {
            let expect = w0 - 0.01 * gi / (gi.abs() + ADAM_EPS);
            assert!((w.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = Tensor::from_slice(&[1.5]).unwrap();
        let mut s = AdamState::new(0.1);
        s.update(&mut [&mut w], &[&Tensor::zeros(vec![1])]).unwrap();
        assert_eq!(w.data(), &[1.5]);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut m = One(Parameter::new("w", Tensor::from_slice(&[0.0]).unwrap()));
        let mut s = AdamState::for_module(0.1, &m);
        for _ in 0..100 {
            let tape = Tape::new();
            let w = tape.param(&m.0);
            let loss = w.add_scalar(-3.0).unwrap().square().unwrap().sum().unwrap();
            tape.backward(loss).unwrap();
            m.accumulate_grads(&tape);
            adam_step(&mut s, &mut m).unwrap();
        }
        assert!((m.0.value.data()[0] - 3.0).abs() < 0.1, "{:?}", m.0.value);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = Tensor::from_slice(&[1.0, 2.0]).unwrap();
        let mut s = AdamState::new(0.1);
        assert!(s.update(&mut [&mut w], &[&Tensor::zeros(vec![3])]).is_err());
    }
}
