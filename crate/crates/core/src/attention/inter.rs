use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{multi_head_apply, BlockTrace, QkvProjection};
use crate::error::{Error, Result};
use crate::linear::LinearLayer;
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Direction order inside the inter-modality stage.
///
/// `RThenE` first lets words attend over the original regions, then lets
/// regions attend over the updated words (re-projected with the same key
/// and value weights). `EThenR` is the mirror image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InterOrder {
    #[default]
    Parallel,
    RThenE,
    EThenR,
}

impl InterOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            InterOrder::Parallel => "parallel",
            InterOrder::RThenE => "r_then_e",
            InterOrder::EThenR => "e_then_r",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [InterOrder::Parallel, InterOrder::RThenE, InterOrder::EThenR]
            .get(code as usize)
            .copied()
    }
}

impl fmt::Display for InterOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(InterOrder::Parallel),
            "r_then_e" => Ok(InterOrder::RThenE),
            "e_then_r" => Ok(InterOrder::EThenR),
            _ => Err(Error::Config(format!("unknown order `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InterMafParams {
    pub region_qkv: QkvProjection,
    pub word_qkv: QkvProjection,
    /// `2 dim -> dim`, applied to `[r, r_update]`.
    pub region_out: LinearLayer,
    /// `2 dim -> dim`, applied to `[e, e_update]`.
    pub word_out: LinearLayer,
}

impl InterMafParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        InterMafParams {
            region_qkv: QkvProjection::init(dim, dim, rng),
            word_qkv: QkvProjection::init(dim, dim, rng),
            region_out: LinearLayer::init(2 * dim, dim, rng),
            word_out: LinearLayer::init(2 * dim, dim, rng),
        }
    }
}

impl Parameters for InterMafParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.region_qkv.visit(&format!("{prefix}.region_qkv"), f);
        self.word_qkv.visit(&format!("{prefix}.word_qkv"), f);
        self.region_out.visit(&format!("{prefix}.region_out"), f);
        self.word_out.visit(&format!("{prefix}.word_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.region_qkv
            .visit_mut(&format!("{prefix}.region_qkv"), f);
        self.word_qkv.visit_mut(&format!("{prefix}.word_qkv"), f);
        self.region_out
            .visit_mut(&format!("{prefix}.region_out"), f);
        self.word_out.visit_mut(&format!("{prefix}.word_out"), f);
    }
}

fn fuse(tape: &mut Tape, x: Var, update: Var, out: &LinearLayer) -> Result<Var> {
    let cat = tape.concat(&[x, update])?;
    out.forward_dropout(tape, cat)
}

/// Bidirectional co-attention between regions and words.
///
/// Returns updated `(r, e)` with unchanged shapes.
pub fn inter_maf_forward(
    tape: &mut Tape,
    r: Var,
    e: Var,
    p: &InterMafParams,
    heads: usize,
    order: InterOrder,
    trace: Option<&mut BlockTrace>,
) -> Result<(Var, Var)> {
    let (r_new, e_new, r_from_e, e_from_r) = match order {
        InterOrder::Parallel => {
            let (rq, rk, rv) = p.region_qkv.project(tape, r)?;
            let (eq, ek, ev) = p.word_qkv.project(tape, e)?;
            let r_att = multi_head_apply(tape, rq, ek, ev, heads)?;
            let e_att = multi_head_apply(tape, eq, rk, rv, heads)?;
            let r_new = fuse(tape, r, r_att.output, &p.region_out)?;
            let e_new = fuse(tape, e, e_att.output, &p.word_out)?;
            (r_new, e_new, r_att.weights, e_att.weights)
        }
        InterOrder::RThenE => {
            let (rk, rv) = p.region_qkv.project_kv(tape, r)?;
            let eq = p.word_qkv.query.forward_dropout(tape, e)?;
            let e_att = multi_head_apply(tape, eq, rk, rv, heads)?;
            let e_new = fuse(tape, e, e_att.output, &p.word_out)?;

            let rq = p.region_qkv.query.forward_dropout(tape, r)?;
            let (ek, ev) = p.word_qkv.project_kv(tape, e_new)?;
            let r_att = multi_head_apply(tape, rq, ek, ev, heads)?;
            let r_new = fuse(tape, r, r_att.output, &p.region_out)?;
            (r_new, e_new, r_att.weights, e_att.weights)
        }
        InterOrder::EThenR => {
            let (ek, ev) = p.word_qkv.project_kv(tape, e)?;
            let rq = p.region_qkv.query.forward_dropout(tape, r)?;
            let r_att = multi_head_apply(tape, rq, ek, ev, heads)?;
            let r_new = fuse(tape, r, r_att.output, &p.region_out)?;

            let eq = p.word_qkv.query.forward_dropout(tape, e)?;
            let (rk, rv) = p.region_qkv.project_kv(tape, r_new)?;
            let e_att = multi_head_apply(tape, eq, rk, rv, heads)?;
            let e_new = fuse(tape, e, e_att.output, &p.word_out)?;
            (r_new, e_new, r_att.weights, e_att.weights)
        }
    };
    if let Some(t) = trace {
        t.inter_r_from_e = Some(r_from_e);
        t.inter_e_from_r = Some(e_from_r);
    }
    Ok((r_new, e_new))
}
