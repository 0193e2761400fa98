use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{
    dyintra_maf_forward, inter_maf_forward, BlockTrace, DyIntraMafParams, InterMafParams,
    InterOrder,
};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which attention stages a block contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionType {
    /// Co-attention followed by gated self-attention.
    #[default]
    Full,
    InterOnly,
    /// Ungated self-attention only.
    IntraOnly,
    /// Gated self-attention only.
    DyIntraOnly,
}

impl AttentionType {
    pub const ALL: [AttentionType; 4] = [
        AttentionType::Full,
        AttentionType::InterOnly,
        AttentionType::IntraOnly,
        AttentionType::DyIntraOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionType::Full => "full",
            AttentionType::InterOnly => "inter_only",
            AttentionType::IntraOnly => "intra_only",
            AttentionType::DyIntraOnly => "dyintra_only",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn has_inter(self) -> bool {
        matches!(self, AttentionType::Full | AttentionType::InterOnly)
    }

    pub fn has_intra(self) -> bool {
        !matches!(self, AttentionType::InterOnly)
    }

    pub fn dynamic_intra(self) -> bool {
        matches!(self, AttentionType::Full | AttentionType::DyIntraOnly)
    }
}

impl fmt::Display for AttentionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention type `{s}`")))
    }
}

/// One block: optional co-attention, then optional self-attention.
#[derive(Clone, Debug)]
pub struct DfafBlockParams {
    pub inter: Option<InterMafParams>,
    pub intra: Option<DyIntraMafParams>,
    pub heads: usize,
    pub head_dim: usize,
    pub order: InterOrder,
}

impl DfafBlockParams {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        order: InterOrder,
        attention: AttentionType,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::HeadSplit { dim, heads });
        }
        Ok(DfafBlockParams {
            inter: attention
                .has_inter()
                .then(|| InterMafParams::init(dim, rng)),
            intra: attention
                .has_intra()
                .then(|| DyIntraMafParams::init(dim, attention.dynamic_intra(), rng)),
            heads,
            head_dim: dim / heads,
            order,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

impl Parameters for DfafBlockParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inter.visit(&format!("{prefix}.inter"), f);
        self.intra.visit(&format!("{prefix}.intra"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inter.visit_mut(&format!("{prefix}.inter"), f);
        self.intra.visit_mut(&format!("{prefix}.intra"), f);
    }
}

/// Co-attention then self-attention; dropout follows every linear layer
/// when the tape is in training mode.
pub fn dfaf_block_forward(
    tape: &mut Tape,
    r: Var,
    e: Var,
    p: &DfafBlockParams,
    mut trace: Option<&mut BlockTrace>,
) -> Result<(Var, Var)> {
    let (mut r, mut e) = (r, e);
    if let Some(inter) = &p.inter {
        (r, e) = inter_maf_forward(tape, r, e, inter, p.heads, p.order, trace.as_deref_mut())?;
    }
    if let Some(intra) = &p.intra {
        (r, e) = dyintra_maf_forward(tape, r, e, intra, p.heads, trace)?;
    }
    Ok((r, e))
}

/// Applies the blocks in sequence. When `traces` is given, one
/// [`BlockTrace`] per block is appended.
pub fn dfaf_stack_forward(
    tape: &mut Tape,
    r: Var,
    e: Var,
    blocks: &[DfafBlockParams],
    mut traces: Option<&mut Vec<BlockTrace>>,
) -> Result<(Var, Var)> {
    if let Some(first) = blocks.first() {
        if let Some(b) = blocks.iter().find(|b| b.dim() != first.dim()) {
            return Err(Error::Config(format!(
                "stack mixes widths {} and {}",
                first.dim(),
                b.dim()
            )));
        }
    }
    let (mut r, mut e) = (r, e);
    for block in blocks {
        let mut trace = traces.is_some().then(BlockTrace::default);
        (r, e) = dfaf_block_forward(tape, r, e, block, trace.as_mut())?;
        if let (Some(list), Some(t)) = (traces.as_deref_mut(), trace) {
            list.push(t);
        }
    }
    Ok((r, e))
}
