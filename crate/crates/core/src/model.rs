//! The full classifier: input embeddings, the attention stack, pooled
//! fusion of both modalities and a two-layer answer head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{
    dfaf_stack_forward, AttentionRecord, AttentionType, BlockTrace, DfafBlockParams, InterOrder,
};
use crate::error::{Error, Result};
use crate::linear::LinearLayer;
use crate::ops::softmax_rows;
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How pooled region and word vectors are combined before the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Multiply,
    Add,
    Concat,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Multiply, Fusion::Add, Fusion::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Multiply => "multiply",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Width of the fused vector for pooled width `dim`.
    pub fn width(self, dim: usize) -> usize {
        match self {
            Fusion::Concat => 2 * dim,
            _ => dim,
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion `{s}`")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub region_dim: usize,
    pub word_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub n_answers: usize,
    pub fusion: Fusion,
    pub order: InterOrder,
    pub attention_type: AttentionType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            region_dim: 64,
            word_dim: 32,
            dim: 64,
            heads: 4,
            blocks: 1,
            hidden: 64,
            n_answers: 2,
            fusion: Fusion::Multiply,
            order: InterOrder::Parallel,
            attention_type: AttentionType::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("region_dim", self.region_dim),
            ("word_dim", self.word_dim),
            ("dim", self.dim),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("n_answers", self.n_answers),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::HeadSplit {
                dim: self.dim,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub region_embed: LinearLayer,
    pub word_embed: LinearLayer,
    pub stack: Vec<DfafBlockParams>,
    pub mlp_hidden: LinearLayer,
    pub mlp_out: LinearLayer,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let region_embed = LinearLayer::init(c.region_dim, c.dim, rng);
        let word_embed = LinearLayer::init(c.word_dim, c.dim, rng);
        let stack = (0..c.blocks)
            .map(|_| DfafBlockParams::init(c.dim, c.heads, c.order, c.attention_type, rng))
            .collect::<Result<Vec<_>>>()?;
        let mlp_hidden = LinearLayer::init(c.fusion.width(c.dim), c.hidden, rng);
        let mlp_out = LinearLayer::init(c.hidden, c.n_answers, rng);
        Ok(ModelParams {
            config,
            region_embed,
            word_embed,
            stack,
            mlp_hidden,
            mlp_out,
        })
    }
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.region_embed
            .visit(&format!("{prefix}.region_embed"), f);
        self.word_embed.visit(&format!("{prefix}.word_embed"), f);
        self.stack.visit(&format!("{prefix}.stack"), f);
        self.mlp_hidden.visit(&format!("{prefix}.mlp_hidden"), f);
        self.mlp_out.visit(&format!("{prefix}.mlp_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.region_embed
            .visit_mut(&format!("{prefix}.region_embed"), f);
        self.word_embed
            .visit_mut(&format!("{prefix}.word_embed"), f);
        self.stack.visit_mut(&format!("{prefix}.stack"), f);
        self.mlp_hidden
            .visit_mut(&format!("{prefix}.mlp_hidden"), f);
        self.mlp_out.visit_mut(&format!("{prefix}.mlp_out"), f);
    }
}

/// Projects raw region and word features to the model width.
pub fn embed_inputs(
    tape: &mut Tape,
    raw_r: Var,
    raw_e: Var,
    p: &ModelParams,
) -> Result<(Var, Var)> {
    for (modality, v, layer) in [
        ("region", raw_r, &p.region_embed),
        ("word", raw_e, &p.word_embed),
    ] {
        let got = tape.value(v).cols();
        if got != layer.in_dim() {
            return Err(Error::ModalityWidth {
                modality,
                expected: layer.in_dim(),
                got,
            });
        }
    }
    Ok((
        p.region_embed.forward_dropout(tape, raw_r)?,
        p.word_embed.forward_dropout(tape, raw_e)?,
    ))
}

/// Mean-pools both modalities, fuses them and returns answer logits.
pub fn fuse_and_classify(tape: &mut Tape, r: Var, e: Var, p: &ModelParams) -> Result<Var> {
    let v = tape.mean_rows(r)?;
    let q = tape.mean_rows(e)?;
    let fused = match p.config.fusion {
        Fusion::Multiply => tape.mul(v, q)?,
        Fusion::Add => tape.add(v, q)?,
        Fusion::Concat => tape.concat(&[v, q])?,
    };
    let h = p.mlp_hidden.forward_dropout(tape, fused)?;
    let h = tape.relu(h);
    p.mlp_out.forward(tape, h)
}

/// Mean cross-entropy of `logits` against one answer index per row.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Embedding, attention stack and head on one instance (rank-2 inputs) or
/// a batch (rank-3 inputs). Block traces are appended when requested.
pub fn forward(
    tape: &mut Tape,
    raw_r: &Tensor,
    raw_e: &Tensor,
    p: &ModelParams,
    traces: Option<&mut Vec<BlockTrace>>,
) -> Result<Var> {
    if raw_r.rank() != raw_e.rank() || raw_r.rank() < 2 {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            left: raw_r.shape().to_vec(),
            right: raw_e.shape().to_vec(),
        });
    }
    let r = tape.constant(raw_r.clone());
    let e = tape.constant(raw_e.clone());
    let (r, e) = embed_inputs(tape, r, e, p)?;
    let (r, e) = dfaf_stack_forward(tape, r, e, &p.stack, traces)?;
    fuse_and_classify(tape, r, e, p)
}

/// Logits, probabilities and optionally the attention records of one instance.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub records: Option<Vec<AttentionRecord>>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, j| if xs[j] > xs[best] { j } else { best })
}

/// Evaluation-mode prediction for a single instance.
pub fn predict(
    raw_r: &Tensor,
    raw_e: &Tensor,
    p: &ModelParams,
    record: bool,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let mut traces = Vec::new();
    let logits = forward(&mut tape, raw_r, raw_e, p, record.then_some(&mut traces))?;
    let logits = tape.value(logits).clone();
    let probabilities = softmax_rows(&logits)?.into_data();
    let records = if record {
        Some(
            traces
                .iter()
                .enumerate()
                .map(|(i, t)| AttentionRecord::extract(&tape, t, i, None))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Prediction {
        logits: logits.into_data(),
        probabilities,
        records,
    })
}

/// Evaluation-mode logits for a batch, shape `(B, n_answers)`.
pub fn predict_batch(raw_r: &Tensor, raw_e: &Tensor, p: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let logits = forward(&mut tape, raw_r, raw_e, p, None)?;
    Ok(tape.value(logits).clone())
}
