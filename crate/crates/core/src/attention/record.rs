use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Attention weights of all heads as one tape value.
///
/// With one head the value is `(n, m)` or `(B, n, m)`; with more heads it is
/// `(B * heads, n, m)`, head `h` of instance `b` at index `b * heads + h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadWeights {
    pub weights: Var,
    pub heads: usize,
}

/// Tape handles of the attention weights produced by one block. Stages that
/// a block does not contain stay `None`.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    pub inter_r_from_e: Option<HeadWeights>,
    pub inter_e_from_r: Option<HeadWeights>,
    pub intra_r: Option<HeadWeights>,
    pub intra_e: Option<HeadWeights>,
    /// Region self-attention recomputed with the gates removed.
    pub intra_r_ungated: Option<HeadWeights>,
    pub gate_on_regions: Option<Var>,
    pub gate_on_words: Option<Var>,
}

/// A row-major matrix copied off the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest `|sum(row) - 1|` over all rows.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn argmax_per_row(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect()
    }
}

/// Attention weights and gates of one block for a single instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub block: usize,
    pub heads: usize,
    pub inter_r_from_e: Vec<Matrix>,
    pub inter_e_from_r: Vec<Matrix>,
    pub intra_r: Vec<Matrix>,
    pub intra_e: Vec<Matrix>,
    pub intra_r_ungated: Vec<Matrix>,
    pub gate_on_regions: Option<Vec<f64>>,
    pub gate_on_words: Option<Vec<f64>>,
}

/// One exported attention matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub block: usize,
    pub head: usize,
    pub matrix_name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// One exported gate vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateExport {
    pub block: usize,
    pub name: String,
    pub values: Vec<f64>,
}

fn out_of_range(t: &Tensor, index: usize) -> Error {
    Error::ShapeMismatch {
        op: "attention_record",
        left: t.shape().to_vec(),
        right: vec![index],
    }
}

fn matrices(tape: &Tape, hw: Option<HeadWeights>, instance: Option<usize>) -> Result<Vec<Matrix>> {
    let Some(hw) = hw else { return Ok(Vec::new()) };
    let t = tape.value(hw.weights);
    let b = instance.unwrap_or(0);
    if t.rank() == 2 {
        if b > 0 {
            return Err(out_of_range(t, b));
        }
        return Ok(vec![Matrix {
            rows: t.shape()[0],
            cols: t.shape()[1],
            values: t.data().to_vec(),
        }]);
    }
    let s = t.shape();
    let size = s[1] * s[2];
    (0..hw.heads)
        .map(|h| {
            let idx = b * hw.heads + h;
            if idx >= s[0] {
                return Err(out_of_range(t, b));
            }
            Ok(Matrix {
                rows: s[1],
                cols: s[2],
                values: t.data()[idx * size..(idx + 1) * size].to_vec(),
            })
        })
        .collect()
}

fn gate(tape: &Tape, v: Option<Var>, instance: Option<usize>) -> Result<Option<Vec<f64>>> {
    v.map(|v| {
        let t = tape.value(v);
        if t.rank() == 1 {
            return Ok(t.data().to_vec());
        }
        let b = instance.unwrap_or(0);
        if b >= t.shape()[0] {
            return Err(out_of_range(t, b));
        }
        Ok(t.row(b).to_vec())
    })
    .transpose()
}

impl AttentionRecord {
    /// Copies the weights of `trace` off the tape. `instance` selects one
    /// element of a batched forward pass; pass `None` for unbatched inputs.
    pub fn extract(
        tape: &Tape,
        trace: &BlockTrace,
        block: usize,
        instance: Option<usize>,
    ) -> Result<Self> {
        let heads = [trace.inter_r_from_e, trace.intra_r]
            .iter()
            .flatten()
            .map(|hw| hw.heads)
            .max()
            .unwrap_or(0);
        Ok(AttentionRecord {
            block,
            heads,
            inter_r_from_e: matrices(tape, trace.inter_r_from_e, instance)?,
            inter_e_from_r: matrices(tape, trace.inter_e_from_r, instance)?,
            intra_r: matrices(tape, trace.intra_r, instance)?,
            intra_e: matrices(tape, trace.intra_e, instance)?,
            intra_r_ungated: matrices(tape, trace.intra_r_ungated, instance)?,
            gate_on_regions: gate(tape, trace.gate_on_regions, instance)?,
            gate_on_words: gate(tape, trace.gate_on_words, instance)?,
        })
    }

    /// Every matrix paired with its export name.
    pub fn named_matrices(&self) -> Vec<(&'static str, &[Matrix])> {
        vec![
            ("inter_r_from_e", self.inter_r_from_e.as_slice()),
            ("inter_e_from_r", self.inter_e_from_r.as_slice()),
            ("intra_r", self.intra_r.as_slice()),
            ("intra_e", self.intra_e.as_slice()),
            ("intra_r_ungated", self.intra_r_ungated.as_slice()),
        ]
    }

    pub fn all_matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.inter_r_from_e
            .iter()
            .chain(&self.inter_e_from_r)
            .chain(&self.intra_r)
            .chain(&self.intra_e)
            .chain(&self.intra_r_ungated)
    }

    pub fn export_entries(&self) -> Vec<ExportEntry> {
        let mut out = Vec::new();
        for (name, list) in self.named_matrices() {
            for (head, m) in list.iter().enumerate() {
                out.push(ExportEntry {
                    block: self.block,
                    head,
                    matrix_name: name.to_string(),
                    shape: [m.rows, m.cols],
                    values: m.values.clone(),
                });
            }
        }
        out
    }

    pub fn gate_exports(&self) -> Vec<GateExport> {
        [
            ("gate_on_regions", &self.gate_on_regions),
            ("gate_on_words", &self.gate_on_words),
        ]
        .into_iter()
        .filter_map(|(name, g)| {
            g.as_ref().map(|values| GateExport {
                block: self.block,
                name: name.to_string(),
                values: values.clone(),
            })
        })
        .collect()
    }
}
