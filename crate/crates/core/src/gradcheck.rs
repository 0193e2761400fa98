//! Central finite differences, the independent oracle for the tape.

use serde::Serialize;

use crate::data::Batch;
use crate::error::Result;
use crate::model::{cross_entropy_loss, forward, ModelParams};
use crate::params::Parameters;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate.
pub fn finite_diff_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let plus = f(&p);
            p[i] = orig - eps;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Comparison for one named parameter tensor.
#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub size: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub passed: bool,
}

/// Finite-difference gradient of `loss` with respect to every parameter of
/// `model`, perturbing one coordinate at a time on a scratch copy.
///
/// Returns one gradient vector per tensor in visit order.
pub fn numeric_param_grads<M, F>(model: &M, mut loss: F, eps: f64) -> Vec<(String, Vec<f64>)>
where
    M: Parameters + Clone,
    F: FnMut(&M) -> f64,
{
    let mut scratch = model.clone();
    let mut shapes = Vec::new();
    model.visit("", &mut |name, t| {
        shapes.push((name.trim_start_matches('.').to_string(), t.len()))
    });

    let mut out = Vec::with_capacity(shapes.len());
    for (ti, (name, len)) in shapes.into_iter().enumerate() {
        let mut grad = vec![0.0; len];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = nth_value(&scratch, ti, i);
            set_nth(&mut scratch, ti, i, orig + eps);
            let plus = loss(&scratch);
            set_nth(&mut scratch, ti, i, orig - eps);
            let minus = loss(&scratch);
            set_nth(&mut scratch, ti, i, orig);
            *g = (plus - minus) / (2.0 * eps);
        }
        out.push((name, grad));
    }
    out
}

fn nth_value<M: Parameters>(model: &M, tensor: usize, i: usize) -> f64 {
    let mut k = 0;
    let mut v = 0.0;
    model.visit("", &mut |_, t: &Tensor| {
        if k == tensor {
            v = t.data()[i];
        }
        k += 1;
    });
    v
}

fn set_nth<M: Parameters>(model: &mut M, tensor: usize, i: usize, value: f64) {
    let mut k = 0;
    model.visit_mut("", &mut |_, t: &mut Tensor| {
        if k == tensor {
            t.data_mut()[i] = value;
        }
        k += 1;
    });
}

/// Compares analytic gradients (`model`'s accumulated `grad` buffers) with
/// central differences of `loss`, one report entry per parameter tensor.
pub fn check_params<M, F>(model: &M, loss: F, eps: f64, tolerance: f64) -> Vec<BlockCheck>
where
    M: Parameters + Clone,
    F: FnMut(&M) -> f64,
{
    let numeric = numeric_param_grads(model, loss, eps);
    let mut analytic = Vec::new();
    model.visit("", &mut |_, t| {
        analytic.push(
            t.grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()]),
        )
    });
    numeric
        .into_iter()
        .zip(analytic)
        .map(|((name, n), a)| {
            let err = max_relative_error(&a, &n);
            BlockCheck {
                size: a.len(),
                max_abs_analytic: a.iter().map(|x| x.abs()).fold(0.0, f64::max),
                passed: err < tolerance,
                max_rel_error: err,
                name,
            }
        })
        .collect()
}

/// Worst error over the tensors of one module, e.g. `stack.0.intra`.
#[derive(Clone, Debug, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub tensors: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub eps: f64,
    pub loss: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub modules: Vec<ModuleCheck>,
    pub blocks: Vec<BlockCheck>,
}

fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = if parts.first() == Some(&"stack") {
        3
    } else {
        1
    };
    parts[..keep.min(parts.len().saturating_sub(1)).max(1)].join(".")
}

/// Backward pass of the whole classifier against central differences of
/// the batch loss, for every parameter tensor.
///
/// Dropout runs with a fixed seed so every loss evaluation sees the same
/// masks. `fault` corrupts the adjoint of one op kind, to show that the
/// check notices.
pub fn check_model(
    model: &ModelParams,
    batch: &Batch,
    dropout: f64,
    seed: u64,
    fault: Option<OpKind>,
    eps: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let loss_of = |m: &ModelParams| -> Result<(Tape, Var)> {
        let mut tape = Tape::training(dropout, seed)?;
        let logits = forward(&mut tape, &batch.regions, &batch.words, m, None)?;
        let loss = cross_entropy_loss(&mut tape, logits, &batch.answers)?;
        Ok((tape, loss))
    };
    let mut work = model.clone();
    let (mut tape, loss) = loss_of(&work)?;
    if let Some(kind) = fault {
        tape.inject_adjoint_fault(kind);
    }
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    work.zero_grad();
    work.accumulate_grads(&grads);
    let blocks = check_params(
        &work,
        |m| {
            let (tape, loss) = loss_of(m).expect("shapes fixed by the first pass");
            tape.value(loss).data()[0]
        },
        eps,
        tolerance,
    );

    let mut modules: Vec<ModuleCheck> = Vec::new();
    for b in &blocks {
        let name = module_of(&b.name);
        match modules.iter_mut().find(|m| m.module == name) {
            Some(m) => {
                m.tensors += 1;
                m.max_rel_error = m.max_rel_error.max(b.max_rel_error);
                m.passed &= b.passed;
            }
            None => modules.push(ModuleCheck {
                module: name,
                tensors: 1,
                max_rel_error: b.max_rel_error,
                passed: b.passed,
            }),
        }
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance,
        eps,
        loss: value,
        max_rel_error,
        passed: blocks.iter().all(|b| b.passed),
        modules,
        blocks,
    })
}
