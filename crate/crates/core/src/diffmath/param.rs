use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::Tape;
use super::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor with a stable name inside its network.
///
/// Cloning yields a parameter with a fresh identity, so a cloned network
/// never aliases the original on a shared tape.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Parameter {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Anything that owns parameters. Visiting order must be deterministic.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.params().iter().map(|p| p.id()).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.grad = None);
    }

    /// Adds the tape's gradients into each parameter's `grad` slot.
    /// Parameters the loss does not reach receive an explicit zero.
    fn accumulate_grads(&mut self, tape: &Tape) {
        self.visit_params_mut(&mut |p| {
            let g = tape
                .param_grad(p.id())
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g),
            }
        });
    }

    /// Copies parameter values, in visiting order.
    fn snapshot(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }
}
