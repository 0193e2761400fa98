use rand::Rng;

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fully-connected layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        LinearLayer {
            weight: Tensor::uniform(&[in_dim, out_dim], bound, rng).into_param(),
            bias: Tensor::zeros(&[out_dim]).into_param(),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.len() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(LinearLayer {
            weight: weight.into_param(),
            bias: bias.into_param(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x W + b` over the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: tape.shape(x).to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    /// [`forward`](Self::forward) followed by the tape's dropout.
    pub fn forward_dropout(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.forward(tape, x)?;
        tape.dropout(y)
    }
}

impl Parameters for LinearLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Eager `x W + b` without a tape.
pub fn linear_forward(layer: &LinearLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).detached())
}
