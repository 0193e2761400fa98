//! Inter- and intra-modality attention flow.
//!
//! Region features `r: (.., mu, dim)` and word features `e: (.., L, dim)`
//! exchange information in two stages per block:
//!
//! * [`inter`]: bidirectional co-attention. Regions attend over words and
//!   words over regions; each side concatenates its input with the attended
//!   values and projects back to `dim`.
//! * [`intra`]: self-attention inside each modality with a residual update.
//!   In dynamic mode the query/key channels of one modality are scaled by
//!   `1 + sigmoid(Linear(mean of the other modality))` before the dot
//!   products, so region-to-region weights depend on the question.
//!
//! All functions accept either a single instance (rank-2 features) or a
//! batch (rank-3, leading batch axis).

mod block;
mod inter;
mod intra;
mod record;

pub use block::{dfaf_block_forward, dfaf_stack_forward, AttentionType, DfafBlockParams};
pub use inter::{inter_maf_forward, InterMafParams, InterOrder};
pub use intra::{compute_gates, dyintra_maf_forward, DyIntraMafParams};
pub use record::{AttentionRecord, BlockTrace, ExportEntry, GateExport, HeadWeights, Matrix};

use rand::Rng;

use crate::error::{Error, Result};
use crate::linear::LinearLayer;
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `softmax(q k^T / sqrt(d))` row-wise, with `d` the shared last axis.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d = tape.value(q).cols();
    if tape.value(k).cols() != d || d == 0 {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            left: tape.shape(q).to_vec(),
            right: tape.shape(k).to_vec(),
        });
    }
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    tape.softmax(scaled)
}

/// Output of [`multi_head_apply`]: merged values and the per-head weights.
pub struct MultiHead {
    pub output: Var,
    pub weights: HeadWeights,
}

/// Splits the feature axis of `q`, `k`, `v` into `heads` contiguous groups,
/// attends within each group (scaled by the group width) and concatenates
/// the per-group results.
pub fn multi_head_apply(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<MultiHead> {
    let dim = tape.value(q).cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::HeadSplit { dim, heads });
    }
    if heads == 1 {
        let w = scaled_dot_attention(tape, q, k)?;
        let output = tape.matmul(w, v)?;
        return Ok(MultiHead {
            output,
            weights: HeadWeights { weights: w, heads },
        });
    }
    let rank = tape.value(q).rank();
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let w = scaled_dot_attention(tape, qh, kh)?;
    let oh = tape.matmul(w, vh)?;
    let output = tape.merge_heads(oh, heads, rank)?;
    Ok(MultiHead {
        output,
        weights: HeadWeights { weights: w, heads },
    })
}

/// Query, key and value projections of one modality.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
}

impl QkvProjection {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, dim: usize, rng: &mut R) -> Self {
        QkvProjection {
            query: LinearLayer::init(in_dim, dim, rng),
            key: LinearLayer::init(in_dim, dim, rng),
            value: LinearLayer::init(in_dim, dim, rng),
        }
    }

    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.query.forward_dropout(tape, x)?,
            self.key.forward_dropout(tape, x)?,
            self.value.forward_dropout(tape, x)?,
        ))
    }

    pub fn project_kv(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        Ok((
            self.key.forward_dropout(tape, x)?,
            self.value.forward_dropout(tape, x)?,
        ))
    }
}

impl Parameters for QkvProjection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        self.key.visit_mut(&format!("{prefix}.key"), f);
        self.value.visit_mut(&format!("{prefix}.value"), f);
    }
}
