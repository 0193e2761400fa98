use rand::Rng;

use super::{multi_head_apply, BlockTrace, QkvProjection};
use crate::error::Result;
use crate::linear::LinearLayer;
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Intra-modality self-attention, optionally gated by the other modality.
#[derive(Clone, Debug)]
pub struct DyIntraMafParams {
    pub region_qkv: QkvProjection,
    pub word_qkv: QkvProjection,
    /// Pooled regions -> gate on word queries/keys.
    pub gate_from_regions: LinearLayer,
    /// Pooled words -> gate on region queries/keys.
    pub gate_from_words: LinearLayer,
    pub region_out: LinearLayer,
    pub word_out: LinearLayer,
    /// `false` skips the gates entirely (plain self-attention).
    pub dynamic: bool,
}

impl DyIntraMafParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, dynamic: bool, rng: &mut R) -> Self {
        DyIntraMafParams {
            region_qkv: QkvProjection::init(dim, dim, rng),
            word_qkv: QkvProjection::init(dim, dim, rng),
            gate_from_regions: LinearLayer::init(dim, dim, rng),
            gate_from_words: LinearLayer::init(dim, dim, rng),
            region_out: LinearLayer::init(dim, dim, rng),
            word_out: LinearLayer::init(dim, dim, rng),
            dynamic,
        }
    }
}

impl Parameters for DyIntraMafParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.region_qkv.visit(&format!("{prefix}.region_qkv"), f);
        self.word_qkv.visit(&format!("{prefix}.word_qkv"), f);
        self.gate_from_regions
            .visit(&format!("{prefix}.gate_from_regions"), f);
        self.gate_from_words
            .visit(&format!("{prefix}.gate_from_words"), f);
        self.region_out.visit(&format!("{prefix}.region_out"), f);
        self.word_out.visit(&format!("{prefix}.word_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.region_qkv
            .visit_mut(&format!("{prefix}.region_qkv"), f);
        self.word_qkv.visit_mut(&format!("{prefix}.word_qkv"), f);
        self.gate_from_regions
            .visit_mut(&format!("{prefix}.gate_from_regions"), f);
        self.gate_from_words
            .visit_mut(&format!("{prefix}.gate_from_words"), f);
        self.region_out
            .visit_mut(&format!("{prefix}.region_out"), f);
        self.word_out.visit_mut(&format!("{prefix}.word_out"), f);
    }
}

/// `sigmoid(Linear(mean over rows))`: a channel gate in `(0, 1)` computed
/// from one modality, shape `(dim)` or `(B, dim)`.
pub fn compute_gates(
    tape: &mut Tape,
    other_modality: Var,
    gate_layer: &LinearLayer,
) -> Result<Var> {
    let pooled = tape.mean_rows(other_modality)?;
    let logits = gate_layer.forward_dropout(tape, pooled)?;
    Ok(tape.sigmoid(logits))
}

/// Self-attention within regions and within words with residual updates.
///
/// In dynamic mode region queries/keys are scaled by `1 + gate(words)` and
/// word queries/keys by `1 + gate(regions)`; values are never gated.
pub fn dyintra_maf_forward(
    tape: &mut Tape,
    r: Var,
    e: Var,
    p: &DyIntraMafParams,
    heads: usize,
    trace: Option<&mut BlockTrace>,
) -> Result<(Var, Var)> {
    let (mut rq, mut rk, rv) = p.region_qkv.project(tape, r)?;
    let (mut eq, mut ek, ev) = p.word_qkv.project(tape, e)?;
    let (plain_rq, plain_rk) = (rq, rk);

    let mut gates = None;
    if p.dynamic {
        let gate_r = compute_gates(tape, e, &p.gate_from_words)?;
        let gate_e = compute_gates(tape, r, &p.gate_from_regions)?;
        let scale_r = tape.add_scalar(gate_r, 1.0);
        let scale_e = tape.add_scalar(gate_e, 1.0);
        rq = tape.mul_rows(rq, scale_r)?;
        rk = tape.mul_rows(rk, scale_r)?;
        eq = tape.mul_rows(eq, scale_e)?;
        ek = tape.mul_rows(ek, scale_e)?;
        gates = Some((gate_r, gate_e));
    }

    let r_att = multi_head_apply(tape, rq, rk, rv, heads)?;
    let e_att = multi_head_apply(tape, eq, ek, ev, heads)?;
    let r_res = tape.add(r, r_att.output)?;
    let e_res = tape.add(e, e_att.output)?;
    let r_new = p.region_out.forward_dropout(tape, r_res)?;
    let e_new = p.word_out.forward_dropout(tape, e_res)?;

    if let Some(t) = trace {
        t.intra_r = Some(r_att.weights);
        t.intra_e = Some(e_att.weights);
        if let Some((gr, ge)) = gates {
            t.gate_on_regions = Some(gr);
            t.gate_on_words = Some(ge);
            // Same inputs with the gates removed; off the output path.
            let ungated = multi_head_apply(tape, plain_rq, plain_rk, rv, heads)?;
            t.intra_r_ungated = Some(ungated.weights);
        } else {
            t.intra_r_ungated = t.intra_r;
        }
    }
    Ok((r_new, e_new))
}
