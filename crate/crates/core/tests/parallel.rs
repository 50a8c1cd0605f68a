//! The rayon and sequential paths must agree bit for bit. Kept in its own
//! binary because the switch is process-global.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cdcgen::diffmath::kernels::{conv2d, conv2d_backward, conv_transpose2d, matmul, ConvGeom};
use cdcgen::diffmath::{Module, Tape, Tensor};
use cdcgen::flow::{FlowConfig, FlowModel};
use cdcgen::par;

fn both<T: PartialEq + std::fmt::Debug>(f: impl Fn() -> T) {
    par::set_enabled(true);
    let a = f();
    par::set_enabled(false);
    let b = f();
    par::set_enabled(true);
    assert_eq!(a, b);
}

#[test]
fn parallel_and_sequential_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::randn(vec![300 * 70], &mut rng).into_data();
    let b = Tensor::randn(vec![70 * 90], &mut rng).into_data();
    both(|| matmul(&a, &b, 300, 70, 90));

    let g = ConvGeom {
        channels: 3,
        height: 12,
        width: 10,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let x = Tensor::randn(vec![40 * 3 * 12 * 10], &mut rng).into_data();
    let w = Tensor::randn(vec![5 * g.col_rows()], &mut rng).into_data();
    let gy = Tensor::randn(vec![40 * 5 * 12 * 10], &mut rng).into_data();
    both(|| conv2d(&x, &w, 40, 5, &g));
    both(|| conv2d_backward(&x, &w, &gy, 40, 5, &g));
    let wt = Tensor::randn(vec![5 * g.col_rows()], &mut rng).into_data();
    both(|| conv_transpose2d(&gy, &wt, 40, 5, &g));

    let mut flow = FlowModel::new("f", FlowConfig::vector(2, 4, 32), &mut rng).unwrap();
    flow.mark_initialized();
    let pts = Tensor::randn(vec![5000, 2], &mut rng);
    both(|| flow.encode(&pts).unwrap());
    both(|| {
        let mut f = flow.clone();
        let tape = Tape::new();
        let lp = f.log_prob(tape.constant(pts.clone())).unwrap();
        tape.backward(lp.mean().unwrap()).unwrap();
        f.accumulate_grads(&tape);
        f.params()
            .iter()
            .map(|p| p.grad.clone().unwrap())
            .collect::<Vec<_>>()
    });
}
