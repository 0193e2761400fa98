//! Eager numeric kernels. The tape records these and adds their adjoints.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// `c = a * b` (or `c += a * b`) with logical `a: m x k`, `b: k x n`.
///
/// `a_t` means the buffer holds `a` transposed (`k x m`, row-major), and
/// likewise `b_t` means the buffer holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and the
    // strides above stay within them; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] without accumulation, into a freshly allocated buffer.
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
) -> Vec<f64> {
    let len = m * n;
    if k == 0 || len == 0 {
        return vec![0.0; len];
    }
    let mut c: Vec<f64> = Vec::with_capacity(len);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: with beta = 0 the kernel only writes `c`, covering all m * n
    // elements, so the buffer is fully initialized before `set_len`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(len);
    }
    c
}

/// How a matrix product maps onto one or more GEMM calls.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix applied to every row of `a`.
    pub shared: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulPlan> {
    let mismatch = || Error::ShapeMismatch {
        op: if trans_b { "matmul_nt" } else { "matmul" },
        left: a.to_vec(),
        right: b.to_vec(),
    };
    let k = *a.last().ok_or_else(mismatch)?;
    match b.len() {
        2 => {
            let (bk, n) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
            if bk != k || k == 0 {
                return Err(mismatch());
            }
            let rows: usize = a[..a.len() - 1].iter().product();
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(n);
            Ok(MatmulPlan {
                batch: 1,
                m: rows,
                k,
                n,
                shared: true,
                out_shape,
            })
        }
        3 => {
            if a.len() != 3 || a[0] != b[0] {
                return Err(mismatch());
            }
            let (bk, n) = if trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
            if bk != k || k == 0 {
                return Err(mismatch());
            }
            Ok(MatmulPlan {
                batch: a[0],
                m: a[1],
                k,
                n,
                shared: false,
                out_shape: vec![a[0], a[1], n],
            })
        }
        _ => Err(mismatch()),
    }
}

fn matmul_impl(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let plan = plan_matmul(a.shape(), b.shape(), trans_b)?;
    let MatmulPlan { batch, m, k, n, .. } = plan;
    if batch == 1 {
        let out = gemm_new(m, k, n, a.data(), false, b.data(), trans_b);
        return Tensor::new(&plan.out_shape, out);
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let bs = if plan.shared { 0 } else { bi * k * n };
        gemm(
            m,
            k,
            n,
            &a.data()[bi * m * k..(bi + 1) * m * k],
            false,
            &b.data()[bs..bs + k * n],
            trans_b,
            &mut out[bi * m * n..(bi + 1) * m * n],
            false,
        );
    }
    Tensor::new(&plan.out_shape, out)
}

/// Matrix product. `b` may be a single `k x n` matrix applied to every row
/// of `a` (any rank), or a batch `B x k x n` matched against `a: B x m x k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(a, b, false)
}

/// `a * b^T` with `b` stored as `n x k` (or `B x n x k`).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(a, b, true)
}

pub(crate) fn softmax_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Softmax along the last axis, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if m.is_empty() {
        return Err(Error::EmptyInput { op: "softmax_rows" });
    }
    let mut out = m.data().to_vec();
    softmax_in_place(&mut out, m.cols());
    Tensor::new(m.shape(), out)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unlike `f64::max`, lets NaN through so divergence stays visible.
pub(crate) fn relu_scalar(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

pub fn apply_activation(kind: Activation, m: &Tensor) -> Tensor {
    let f: fn(f64) -> f64 = match kind {
        Activation::Sigmoid => sigmoid_scalar,
        Activation::Relu => relu_scalar,
    };
    let data = m.data().iter().map(|&x| f(x)).collect();
    Tensor::new(m.shape(), data).unwrap()
}

/// Shape of an `avg_pool_rows` result: the row axis removed.
pub(crate) fn pooled_shape(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len: shape.iter().product(),
        });
    }
    let r = shape.len();
    if shape[r - 2] == 0 {
        return Err(Error::EmptyInput {
            op: "avg_pool_rows",
        });
    }
    let mut out = shape[..r - 2].to_vec();
    out.push(shape[r - 1]);
    Ok(out)
}

/// Mean over the row axis: `n x d -> d`, `B x n x d -> B x d`.
pub fn avg_pool_rows(m: &Tensor) -> Result<Tensor> {
    let out_shape = pooled_shape(m.shape())?;
    let (n, d) = (m.rows(), m.cols());
    let groups = m.len() / (n * d);
    let inv = 1.0 / n as f64;
    let mut out = vec![0.0; groups * d];
    for g in 0..groups {
        let acc = &mut out[g * d..(g + 1) * d];
        for i in 0..n {
            let row = &m.data()[(g * n + i) * d..(g * n + i + 1) * d];
            acc.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::new(&out_shape, out)
}

/// Inverted-dropout mask: zero with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    let keep = 1.0 / (1.0 - rate);
    // Compare raw 32-bit draws against `rate * 2^32`.
    let threshold = (rate * 4_294_967_296.0) as u64;
    Ok((0..len)
        .map(|_| {
            if u64::from(rng.next_u32()) < threshold {
                0.0
            } else {
                keep
            }
        })
        .collect())
}

/// Inverted dropout. Eval mode, and train mode at rate 0, return the input.
pub fn dropout<R: Rng + ?Sized>(m: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(m.clone());
    }
    let mask = dropout_mask(m.len(), rate, rng)?;
    let data = m.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
    Tensor::new(m.shape(), data)
}

/// Adds a length-`d` bias to every row of a `(..., d)` tensor.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.rank() != 1 || bias.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(bias.len()) {
        row.iter_mut().zip(bias.data()).for_each(|(a, b)| *a += b);
    }
    Tensor::new(x.shape(), out)
}
