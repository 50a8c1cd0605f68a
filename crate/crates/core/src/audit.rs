//! Finite-difference audit of every differentiable primitive and training
//! loss. Each check draws its inputs from a seed and reports the largest
//! relative error between tape and central-difference gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adversary::{
    adv_critic_loss, adv_generator_loss, dal_loss, Critic, CriticConfig, DomainClassifier,
};
use crate::condsynth::{
    classifier_loss, encoder_loss, latent_critic_loss, ConditionEncoder, EncoderConfig,
    LatentCriticClassifier, LatentCriticConfig,
};
use crate::diffmath::{grad_check, grad_check_module, Module, Tape, Tensor, Var};
use crate::error::Result;
use crate::flow::{standard_normal_log_density, translate_var, FlowConfig, FlowModel};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;

const PRIMITIVE_STEP: f64 = 1e-5;
/// Smaller step for composites so kinks of leaky units are rarely straddled.
const LOSS_STEP: f64 = 1e-6;
/// Parameter coordinates perturbed per module check.
const MODULE_COORDS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Primitive,
    Loss,
}

impl CheckKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CheckKind::Primitive => PRIMITIVE_TOLERANCE,
            CheckKind::Loss => LOSS_TOLERANCE,
        }
    }
}

pub struct Check {
    pub name: &'static str,
    pub kind: CheckKind,
    pub run: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub name: &'static str,
    pub kind: CheckKind,
    pub worst: f64,
    pub worst_seed: u64,
    pub seeds: u64,
}

impl AuditRow {
    pub fn passed(&self) -> bool {
        self.worst < self.kind.tolerance()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), r)
}

/// Values bounded away from zero by `gap`, for ops with a kink there.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    randn(shape, r).map(|v| v.signum() * (gap + v.abs()))
}

/// Checks `x -> Σ w ⊙ op(x)` with a random weighting `w`.
fn check_op<F>(point: Tensor, r: &mut ChaCha8Rng, op: F) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Send + Sync,
{
    let shape = {
        let tape = Tape::no_grad();
        op(tape.constant(point.clone()))?.shape()
    };
    let w = Tensor::randn(shape, r);
    grad_check(
        move |x| {
            let wv = x.tape().constant(w.clone());
            op(x)?.mul(&wv)?.sum()
        },
        &point,
        PRIMITIVE_STEP,
    )
}

fn perturb<M: Module>(m: &mut M, scale: f64, r: &mut ChaCha8Rng) {
    m.visit_params_mut(&mut |p| {
        for v in p.value.data_mut() {
            let e: f64 = StandardNormal.sample(r);
            *v += scale * e;
        }
    });
}

macro_rules! unary {
    ($name:literal, $gen:expr, $op:expr) => {
        Check {
            name: $name,
            kind: CheckKind::Primitive,
            run: |seed| {
                let mut r = rng(seed);
                let x = $gen(&mut r);
                check_op(x, &mut r, $op)
            },
        }
    };
}

fn primitives() -> Vec<Check> {
    vec![
        unary!("add", |r: &mut ChaCha8Rng| randn(&[3, 4], r), |x: Var<
            '_,
        >| {
            x.add(
                &x.tape()
                    .constant(Tensor::from_slice(&[0.5, -1.0, 2.0, 0.1])?),
            )
        }),
        unary!(
            "add_broadcast_operand",
            |r: &mut ChaCha8Rng| randn(&[4], r),
            |x: Var<'_>| { x.tape().constant(Tensor::full(vec![3, 4], 0.3)).add(&x) }
        ),
        unary!("sub", |r: &mut ChaCha8Rng| randn(&[3, 4], r), |x: Var<
            '_,
        >| {
            x.sub(
                &x.tape()
                    .constant(Tensor::from_slice(&[0.5, -1.0, 2.0, 0.1])?),
            )
        }),
        unary!(
            "sub_broadcast_operand",
            |r: &mut ChaCha8Rng| randn(&[3, 1], r),
            |x: Var<'_>| { x.tape().constant(Tensor::full(vec![3, 4], 0.3)).sub(&x) }
        ),
        unary!("mul", |r: &mut ChaCha8Rng| randn(&[3, 4], r), |x: Var<
            '_,
        >| x
            .mul(&x.square()?)),
        unary!(
            "mul_broadcast_operand",
            |r: &mut ChaCha8Rng| randn(&[3, 1], r),
            |x: Var<'_>| {
                let c = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect())?;
                x.tape().constant(c).mul(&x)
            }
        ),
        unary!(
            "apply_mask",
            |r: &mut ChaCha8Rng| randn(&[2, 4], r),
            |x: Var<'_>| {
                x.apply_mask(&Tensor::new(
                    vec![2, 4],
                    vec![1., 0., 1., 0., 0., 1., 0., 1.],
                )?)
            }
        ),
        unary!(
            "add_scalar",
            |r: &mut ChaCha8Rng| randn(&[5], r),
            |x: Var<'_>| x.add_scalar(1.5)
        ),
        unary!(
            "mul_scalar",
            |r: &mut ChaCha8Rng| randn(&[5], r),
            |x: Var<'_>| x.mul_scalar(-2.5)
        ),
        unary!("neg", |r: &mut ChaCha8Rng| randn(&[5], r), |x: Var<'_>| x
            .neg()),
        unary!("square", |r: &mut ChaCha8Rng| randn(&[5], r), |x: Var<
            '_,
        >| x
            .square()),
        unary!("tanh", |r: &mut ChaCha8Rng| randn(&[2, 5], r), |x: Var<
            '_,
        >| x
            .tanh()),
        unary!(
            "sigmoid",
            |r: &mut ChaCha8Rng| randn(&[2, 5], r).map(|v| 3.0 * v),
            |x: Var<'_>| { x.sigmoid() }
        ),
        unary!(
            "leaky_relu",
            |r: &mut ChaCha8Rng| away_from_zero(&[2, 5], 1e-3, r),
            |x: Var<'_>| { x.leaky_relu(0.2) }
        ),
        unary!("exp", |r: &mut ChaCha8Rng| randn(&[2, 5], r), |x: Var<
            '_,
        >| x
            .exp()),
        unary!(
            "ln",
            |r: &mut ChaCha8Rng| Tensor::uniform(vec![2, 5], 0.2, 3.0, r),
            |x: Var<'_>| { x.ln() }
        ),
        unary!(
            "clamp",
            |r: &mut ChaCha8Rng| randn(&[3, 5], r).map(|v| if (v.abs() - 1.0).abs() < 1e-3 {
                v * 1.01
            } else {
                v
            }),
            |x: Var<'_>| x.clamp(-1.0, 1.0)
        ),
        unary!("sum", |r: &mut ChaCha8Rng| randn(&[3, 4], r), |x: Var<
            '_,
        >| x
            .sum()),
        unary!("mean", |r: &mut ChaCha8Rng| randn(&[3, 4], r), |x: Var<
            '_,
        >| x
            .mean()),
        unary!(
            "sum_per_item",
            |r: &mut ChaCha8Rng| randn(&[3, 2, 2], r),
            |x: Var<'_>| { x.sum_per_item() }
        ),
        unary!(
            "reshape",
            |r: &mut ChaCha8Rng| randn(&[3, 4], r),
            |x: Var<'_>| { x.reshape(vec![2, 6])?.square() }
        ),
        unary!(
            "matmul_left",
            |r: &mut ChaCha8Rng| randn(&[3, 4], r),
            |x: Var<'_>| {
                let b = Tensor::new(vec![4, 2], vec![0.3, -1.2, 0.5, 0.8, -0.7, 0.1, 1.1, 0.4])?;
                x.matmul(&x.tape().constant(b))
            }
        ),
        unary!(
            "matmul_right",
            |r: &mut ChaCha8Rng| randn(&[4, 2], r),
            |x: Var<'_>| {
                let a = Tensor::new(
                    vec![3, 4],
                    (0..12).map(|i| (i as f64 * 0.7).sin()).collect(),
                )?;
                x.tape().constant(a).matmul(&x)
            }
        ),
        unary!(
            "conv2d_input",
            |r: &mut ChaCha8Rng| randn(&[2, 2, 5, 5], r),
            |x: Var<'_>| {
                let w = Tensor::new(
                    vec![3, 2, 3, 3],
                    (0..54).map(|i| (i as f64 * 0.37).cos() * 0.5).collect(),
                )?;
                x.conv2d(&x.tape().constant(w), 1, 1)
            }
        ),
        unary!(
            "conv2d_weight",
            |r: &mut ChaCha8Rng| randn(&[3, 2, 4, 4], r),
            |w: Var<'_>| {
                let x = Tensor::new(
                    vec![2, 2, 6, 6],
                    (0..144).map(|i| (i as f64 * 0.11).sin()).collect(),
                )?;
                w.tape().constant(x).conv2d(&w, 2, 1)
            }
        ),
        unary!(
            "conv_transpose2d_input",
            |r: &mut ChaCha8Rng| randn(&[2, 3, 3, 3], r),
            |x: Var<'_>| {
                let w = Tensor::new(
                    vec![3, 2, 4, 4],
                    (0..96).map(|i| (i as f64 * 0.29).cos() * 0.5).collect(),
                )?;
                x.conv_transpose2d(&x.tape().constant(w), 2, 1)
            }
        ),
        unary!(
            "conv_transpose2d_weight",
            |r: &mut ChaCha8Rng| randn(&[3, 2, 3, 3], r),
            |w: Var<'_>| {
                let x = Tensor::new(
                    vec![2, 3, 4, 4],
                    (0..96).map(|i| (i as f64 * 0.13).sin()).collect(),
                )?;
                w.tape().constant(x).conv_transpose2d(&w, 1, 1)
            }
        ),
        unary!(
            "channel_affine_input",
            |r: &mut ChaCha8Rng| randn(&[2, 3, 2, 2], r),
            |x: Var<'_>| {
                let t = x.tape();
                x.channel_affine(
                    &t.constant(Tensor::from_slice(&[0.5, -2.0, 1.5])?),
                    &t.constant(Tensor::from_slice(&[0.1, 0.2, -0.3])?),
                )
            }
        ),
        unary!(
            "channel_affine_scale",
            |r: &mut ChaCha8Rng| randn(&[3], r),
            |s: Var<'_>| {
                let t = s.tape();
                let x = Tensor::new(
                    vec![2, 3, 2, 2],
                    (0..24).map(|i| (i as f64 * 0.5).sin()).collect(),
                )?;
                t.constant(x)
                    .channel_affine(&s, &t.constant(Tensor::from_slice(&[0.1, 0.2, -0.3])?))
            }
        ),
        unary!(
            "channel_affine_bias",
            |r: &mut ChaCha8Rng| randn(&[3], r),
            |b: Var<'_>| {
                let t = b.tape();
                let x = Tensor::new(vec![2, 3], vec![0.3, -0.1, 0.7, 1.1, -0.4, 0.2])?;
                t.constant(x)
                    .channel_affine(&t.constant(Tensor::from_slice(&[0.5, -2.0, 1.5])?), &b)
            }
        ),
        unary!(
            "concat",
            |r: &mut ChaCha8Rng| randn(&[2, 3], r),
            |x: Var<'_>| {
                let c = x.tape().constant(Tensor::full(vec![2, 2], 0.5));
                Var::concat(&[c, x.square()?, x], 1)
            }
        ),
        unary!(
            "slice",
            |r: &mut ChaCha8Rng| randn(&[2, 3, 4], r),
            |x: Var<'_>| x.slice(2, 1, 2)
        ),
        unary!(
            "squeeze2d",
            |r: &mut ChaCha8Rng| randn(&[2, 1, 4, 4], r),
            |x: Var<'_>| x.squeeze2d()
        ),
        unary!(
            "unsqueeze2d",
            |r: &mut ChaCha8Rng| randn(&[2, 4, 2, 2], r),
            |x: Var<'_>| { x.unsqueeze2d() }
        ),
        unary!(
            "log_softmax",
            |r: &mut ChaCha8Rng| randn(&[3, 4], r).map(|v| 2.0 * v),
            |x: Var<'_>| { x.log_softmax() }
        ),
        unary!(
            "softmax_cross_entropy",
            |r: &mut ChaCha8Rng| randn(&[3, 4], r).map(|v| 2.0 * v),
            |x: Var<'_>| {
                let t = Tensor::new(
                    vec![3, 4],
                    vec![1., 0., 0., 0., 0.25, 0.25, 0.25, 0.25, 0., 0.5, 0.5, 0.],
                )?;
                x.softmax_cross_entropy(&t)
            }
        ),
    ]
}

fn vector_flow(r: &mut ChaCha8Rng) -> Result<FlowModel> {
    let mut f = FlowModel::new("f", FlowConfig::vector(3, 4, 8), r)?;
    perturb(&mut f, 0.2, r);
    f.mark_initialized();
    Ok(f)
}

fn image_flow(r: &mut ChaCha8Rng) -> Result<FlowModel> {
    let cfg = FlowConfig::Image {
        channels: 1,
        height: 4,
        width: 4,
        scales: 2,
        hidden_channels: 4,
        blocks: 1,
    };
    let mut f = FlowModel::new("g", cfg, r)?;
    perturb(&mut f, 0.1, r);
    f.mark_initialized();
    Ok(f)
}

fn nll<'t>(flow: &FlowModel, x: Var<'t>) -> Result<Var<'t>> {
    let out = flow.forward(x)?;
    standard_normal_log_density(out.z)?
        .add(&out.log_det)?
        .mean()?
        .neg()
}

fn critic2(r: &mut ChaCha8Rng) -> Result<Critic> {
    let mut c = Critic::new("c", CriticConfig::vector(3, 6), r)?;
    perturb(&mut c, 0.3, r);
    Ok(c)
}

fn patch_critic(r: &mut ChaCha8Rng) -> Result<Critic> {
    let cfg = CriticConfig::Patch {
        channels: 1,
        height: 8,
        width: 8,
        filters: 2,
        blocks: 2,
    };
    let mut c = Critic::new("p", cfg, r)?;
    perturb(&mut c, 0.1, r);
    Ok(c)
}

fn latent_critic(r: &mut ChaCha8Rng) -> Result<LatentCriticClassifier> {
    let mut c = LatentCriticClassifier::new("lc", LatentCriticConfig::vector(3, 3), r)?;
    perturb(&mut c, 0.2, r);
    Ok(c)
}

fn labels(n: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

macro_rules! loss {
    ($name:literal, $body:expr) => {
        Check {
            name: $name,
            kind: CheckKind::Loss,
            run: $body,
        }
    };
}

fn losses() -> Vec<Check> {
    vec![
        loss!("flow_nll_input", |seed| {
            let mut r = rng(seed);
            let f = vector_flow(&mut r)?;
            grad_check(move |x| nll(&f, x), &randn(&[4, 3], &mut r), LOSS_STEP)
        }),
        loss!("flow_nll_params", |seed| {
            let mut r = rng(seed);
            let f = vector_flow(&mut r)?;
            let x = randn(&[4, 3], &mut r);
            grad_check_module(
                &f,
                move |m, t| nll(m, t.constant(x.clone())),
                LOSS_STEP,
                Some(MODULE_COORDS),
            )
        }),
        loss!("image_flow_nll_input", |seed| {
            let mut r = rng(seed);
            let f = image_flow(&mut r)?;
            grad_check(
                move |x| nll(&f, x),
                &randn(&[2, 1, 4, 4], &mut r),
                LOSS_STEP,
            )
        }),
        loss!("image_flow_nll_params", |seed| {
            let mut r = rng(seed);
            let f = image_flow(&mut r)?;
            let x = randn(&[2, 1, 4, 4], &mut r);
            grad_check_module(
                &f,
                move |m, t| nll(m, t.constant(x.clone())),
                LOSS_STEP,
                Some(MODULE_COORDS),
            )
        }),
        loss!("adv_critic_loss_params", |seed| {
            let mut r = rng(seed);
            let c = critic2(&mut r)?;
            let (real, fake) = (randn(&[5, 3], &mut r), randn(&[4, 3], &mut r));
            grad_check_module(
                &c,
                move |m, t| adv_critic_loss(m, t.constant(real.clone()), t.constant(fake.clone())),
                LOSS_STEP,
                None,
            )
        }),
        loss!("patch_critic_loss_params", |seed| {
            let mut r = rng(seed);
            let c = patch_critic(&mut r)?;
            let (real, fake) = (randn(&[2, 1, 8, 8], &mut r), randn(&[2, 1, 8, 8], &mut r));
            grad_check_module(
                &c,
                move |m, t| adv_critic_loss(m, t.constant(real.clone()), t.constant(fake.clone())),
                LOSS_STEP,
                Some(MODULE_COORDS),
            )
        }),
        loss!("adv_generator_through_translation", |seed| {
            // Gradient reaches the source sample through F_t^{-1}(F_s(x)).
            let mut r = rng(seed);
            let (fs, ft) = (vector_flow(&mut r)?, vector_flow(&mut r)?);
            let c = critic2(&mut r)?;
            grad_check(
                move |x| adv_generator_loss(&c, translate_var(&fs, &ft, x)?),
                &randn(&[4, 3], &mut r),
                LOSS_STEP,
            )
        }),
        loss!("dal_classifier_params", |seed| {
            let mut r = rng(seed);
            let mut d = DomainClassifier::new("d", 3, 6, &mut r);
            perturb(&mut d, 0.3, &mut r);
            let (zs, zt) = (randn(&[4, 3], &mut r), randn(&[3, 3], &mut r));
            grad_check_module(
                &d,
                move |m, t| {
                    Ok(dal_loss(m, t.constant(zs.clone()), t.constant(zt.clone()))?.classifier)
                },
                LOSS_STEP,
                None,
            )
        }),
        loss!("dal_confusion_latents", |seed| {
            let mut r = rng(seed);
            let mut d = DomainClassifier::new("d", 3, 6, &mut r);
            perturb(&mut d, 0.3, &mut r);
            let zt = randn(&[3, 3], &mut r);
            grad_check(
                move |zs| {
                    let l = dal_loss(&d, zs, zs.tape().constant(zt.clone()))?;
                    l.confusion_source.add(&l.confusion_target)
                },
                &randn(&[4, 3], &mut r),
                LOSS_STEP,
            )
        }),
        loss!("encoder_loss_params", |seed| {
            let mut r = rng(seed);
            let e = ConditionEncoder::new("e", EncoderConfig::vector(3, 3), &mut r)?;
            let c = latent_critic(&mut r)?;
            let y = labels(5, 3, &mut r);
            let noise = randn(&[5, e.noise_dim()], &mut r);
            let cond = crate::adversary::one_hot(&y, 3)?;
            grad_check_module(
                &e,
                move |m, t| encoder_loss(&c, m.encode(&cond, t.constant(noise.clone()))?),
                LOSS_STEP,
                Some(MODULE_COORDS),
            )
        }),
        loss!("latent_critic_loss_params", |seed| {
            let mut r = rng(seed);
            let c = latent_critic(&mut r)?;
            let (fake, real) = (randn(&[4, 3], &mut r), randn(&[5, 3], &mut r));
            grad_check_module(
                &c,
                move |m, t| {
                    latent_critic_loss(m, t.constant(fake.clone()), t.constant(real.clone()))
                },
                LOSS_STEP,
                Some(MODULE_COORDS),
            )
        }),
        loss!("classifier_loss_params", |seed| {
            let mut r = rng(seed);
            let c = latent_critic(&mut r)?;
            let (fake, real) = (randn(&[4, 3], &mut r), randn(&[5, 3], &mut r));
            let (yf, yr) = (labels(4, 3, &mut r), labels(5, 3, &mut r));
            grad_check_module(
                &c,
                move |m, t| {
                    classifier_loss(
                        m,
                        t.constant(fake.clone()),
                        t.constant(real.clone()),
                        &yf,
                        &yr,
                    )
                },
                LOSS_STEP,
                Some(MODULE_COORDS),
            )
        }),
        loss!("classifier_loss_fake_latents", |seed| {
            let mut r = rng(seed);
            let c = latent_critic(&mut r)?;
            let real = randn(&[5, 3], &mut r);
            let (yf, yr) = (labels(4, 3, &mut r), labels(5, 3, &mut r));
            grad_check(
                move |z| classifier_loss(&c, z, z.tape().constant(real.clone()), &yf, &yr),
                &randn(&[4, 3], &mut r),
                LOSS_STEP,
            )
        }),
    ]
}

/// Every registered check, primitives first.
pub fn checks() -> Vec<Check> {
    let mut all = primitives();
    all.extend(losses());
    all
}

/// Runs each check for seeds `0..seeds` and keeps the worst error.
pub fn run_audit(seeds: u64) -> Result<Vec<AuditRow>> {
    checks()
        .into_iter()
        .map(|c| {
            let mut row = AuditRow {
                name: c.name,
                kind: c.kind,
                worst: 0.0,
                worst_seed: 0,
                seeds,
            };
            for seed in 0..seeds {
                let e = (c.run)(seed)?;
                if e > row.worst || e.is_nan() {
                    row.worst = e;
                    row.worst_seed = seed;
                }
            }
            Ok(row)
        })
        .collect()
}
