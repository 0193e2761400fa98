#![allow(dead_code)]

use dfaf_core::gradcheck::{finite_diff_gradient, max_relative_error};
use dfaf_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero, so piecewise ops stay differentiable
/// under finite-difference steps.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Max relative error between the tape gradient of `build` and central
/// differences, over every input tensor.
///
/// The scalar loss is `sum(out * w)` for a fixed random `w`, so every
/// output element contributes with a distinct weight.
pub fn tape_vs_fd<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let loss_of = |xs: &[Tensor]| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(&x.detached().into_param()))
            .collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let w = randn(&shape, &mut rng(seed));
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, loss, vars)
    };

    let (tape, loss, vars) = loss_of(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = finite_diff_gradient(
            |p| {
                let mut xs: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
                xs[i] = Tensor::new(x.shape(), p.to_vec()).unwrap();
                let (tape, loss, _) = loss_of(&xs);
                tape.value(loss).data()[0]
            },
            x.data(),
            1e-6,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Triple-loop reference product of row-major `m x k` and `k x n`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}
