use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{collate, DataError, Dataset, Template};
use crate::error::Result as ModelResult;
use crate::model::{argmax, predict_batch, ModelParams};

use super::TrainError;

/// Predicted answer index for every instance, in dataset order.
pub fn predict_answers(
    model: &ModelParams,
    d: &Dataset,
    batch_size: usize,
) -> Result<Vec<usize>, TrainError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatch.into());
    }
    let mut out = Vec::with_capacity(d.len());
    let all: Vec<usize> = (0..d.len()).collect();
    for idx in all.chunks(batch_size) {
        let batch = collate(d, idx);
        let logits: ModelResult<_> = predict_batch(&batch.regions, &batch.words, model);
        let logits = logits?;
        out.extend((0..idx.len()).map(|b| argmax(logits.row(b))));
    }
    Ok(out)
}

pub fn evaluate_accuracy(
    model: &ModelParams,
    d: &Dataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    Ok(evaluate(model, d, batch_size)?.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Keyed by template name; instances without one count as `unknown`.
    pub per_template: BTreeMap<String, TemplateScore>,
}

/// Overall and per-template accuracy in evaluation mode.
pub fn evaluate(
    model: &ModelParams,
    d: &Dataset,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if d.is_empty() {
        return Err(DataError::Empty.into());
    }
    let predicted = predict_answers(model, d, batch_size)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (inst, &p) in d.instances.iter().zip(&predicted) {
        let hit = usize::from(p == inst.answer);
        correct += hit;
        let key = inst
            .template
            .map_or("unknown", Template::as_str)
            .to_string();
        let e = tally.entry(key).or_default();
        e.0 += 1;
        e.1 += hit;
    }
    let per_template = tally
        .into_iter()
        .map(|(k, (n, c))| {
            let score = TemplateScore {
                n,
                correct: c,
                accuracy: c as f64 / n as f64,
            };
            (k, score)
        })
        .collect();
    Ok(EvalReport {
        n: d.len(),
        correct,
        accuracy: correct as f64 / d.len() as f64,
        per_template,
    })
}
