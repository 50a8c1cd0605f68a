//! Central-difference gradient checking.

use super::param::Module;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

/// Largest `|analytic - numeric| / max(1, |analytic|)` over coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Send + Sync,
{
    par::map(point.len(), |i| {
        let mut p = point.to_vec();
        p[i] = point[i] + step;
        let hi = f(&p)?;
        p[i] = point[i] - step;
        let lo = f(&p)?;
        Ok((hi - lo) / (2.0 * step))
    })
    .into_iter()
    .collect()
}

fn ensure_deterministic(first: f64, second: f64) -> Result<()> {
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    Ok(())
}

/// Compares the tape gradient of `function` at `point` with central
/// differences. The function must return a scalar.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Send + Sync,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |x: &[f64]| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = tape.constant(Tensor::new(point.shape().to_vec(), x.to_vec())?);
        function(v)?.to_scalar()
    };
    ensure_deterministic(eval(point.data())?, eval(point.data())?)?;

    let tape = Tape::new();
    let x = tape.variable(point.clone());
    let y = function(x)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));
    let numeric = numeric_gradient(eval, point.data(), step)?;
    Ok(relative_error(analytic.data(), &numeric))
}

/// Gradient check over the parameters of a module.
///
/// `loss` builds a scalar on the given tape using the module's parameters.
/// When `max_coords` is set, only that many coordinates (evenly strided
/// across the flattened parameter vector) are perturbed.
pub fn grad_check_module<M, F>(
    module: &M,
    loss: F,
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    M: Module + Clone + Send + Sync,
    F: for<'t> Fn(&M, &'t Tape) -> Result<Var<'t>> + Send + Sync,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let tape = Tape::new();
    let y = loss(module, &tape)?;
    tape.backward(y)?;
    let mut analytic = Vec::new();
    let mut shapes = Vec::new();
    for p in module.params() {
        let g = tape
            .param_grad(p.id())
            .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        analytic.extend_from_slice(g.data());
        shapes.push(p.value.len());
    }
    let total = analytic.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < total => (0..m).map(|i| i * total / m).collect(),
        _ => (0..total).collect(),
    };

    let eval_at = |coord: usize, delta: f64| -> Result<f64> {
        let mut m = module.clone();
        let mut offset = 0;
        let mut done = false;
        m.visit_params_mut(&mut |p| {
            let n = p.value.len();
            if !done && coord < offset + n {
                p.value.data_mut()[coord - offset] += delta;
                done = true;
            }
            offset += n;
        });
        let tape = Tape::no_grad();
        loss(&m, &tape)?.to_scalar()
    };
    ensure_deterministic(eval_at(0, 0.0)?, eval_at(0, 0.0)?)?;

    let numeric: Vec<f64> = par::map(coords.len(), |i| -> Result<f64> {
        let c = coords[i];
        Ok((eval_at(c, step)? - eval_at(c, -step)?) / (2.0 * step))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    Ok(relative_error(&picked, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let e = grad_check(|x| x.square()?.sum(), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn sum_exp_on_random_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(vec![4], -1.0, 1.0, &mut rng);
        let e = grad_check(|x| x.exp()?.sum(), &x, 1e-5).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // d/dx sin(x) deliberately reported as sin(x)
        fn bad(x: Var<'_>) -> Result<Var<'_>> {
            let v = x.value();
            let y = v.map(f64::sin);
            let node = x.tape().record(
                "bad_sin",
                &[x],
                y,
                Box::new(|g, inputs, _| {
                    vec![Some(
                        g.iter()
                            .zip(inputs[0].data())
                            .map(|(g, x)| g * x.sin())
                            .collect(),
                    )]
                }),
            )?;
            node.sum()
        }
        let e = grad_check(bad, &Tensor::from_slice(&[0.3, -1.2, 2.0]).unwrap(), 1e-5).unwrap();
        assert!(e > 1e-2, "{e}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        static CALLS: AtomicU64 = AtomicU64::new(0);
        fn f(x: Var<'_>) -> Result<Var<'_>> {
            let c = CALLS.fetch_add(1, Ordering::SeqCst) as f64;
            x.add_scalar(c)?.sum()
        }
        assert!(matches!(
            grad_check(f, &Tensor::scalar(1.0), 1e-5),
            Err(Error::NonDeterministic { .. })
        ));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        assert!(grad_check(|x| x.sum(), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
