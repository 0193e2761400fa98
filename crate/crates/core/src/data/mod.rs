//! Datasets: the synthetic scene/question task, the binary feature file
//! and mini-batching.

mod batches;
mod feature_file;
mod toy;

pub use batches::{collate, make_batches, Batch, BatchOrder};
pub use feature_file::{
    decode, encode, expected_size, read_feature_file, write_feature_file, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use toy::{
    generate_toy_dataset, Direction, InstanceMeta, Question, Scene, SceneObject, Template,
    ToyTaskSpec,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("inconsistent task: {0}")]
    InconsistentSpec(String),

    #[error("not a feature file: magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported feature file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("feature file truncated: header implies {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("feature file has {extra} bytes past the declared payload")]
    TrailingBytes { extra: u64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("instance {index}: {what}")]
    InstanceShape { index: usize, what: String },

    #[error("dataset is empty")]
    Empty,

    #[error("batch size must be at least 1")]
    ZeroBatch,
}

/// One example: flattened `(n_regions, region_dim)` region features,
/// `(token_len, word_dim)` word features and the answer index.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub regions: Vec<f64>,
    pub words: Vec<f64>,
    pub answer: usize,
    pub template: Option<Template>,
    /// Present for generated data; not stored in feature files.
    pub meta: Option<InstanceMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_regions: usize,
    pub token_len: usize,
    pub region_dim: usize,
    pub word_dim: usize,
    pub n_answers: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Checks every instance against the declared shapes.
    pub fn validate(&self) -> Result<(), DataError> {
        let nr = self.n_regions * self.region_dim;
        let nw = self.token_len * self.word_dim;
        for (index, inst) in self.instances.iter().enumerate() {
            let what = if inst.regions.len() != nr {
                format!("{} region values, expected {nr}", inst.regions.len())
            } else if inst.words.len() != nw {
                format!("{} word values, expected {nw}", inst.words.len())
            } else if inst.answer >= self.n_answers {
                format!("answer {} outside {} classes", inst.answer, self.n_answers)
            } else {
                continue;
            };
            return Err(DataError::InstanceShape { index, what });
        }
        Ok(())
    }

    /// Copy without the generating metadata, as a feature file stores it.
    pub fn without_meta(&self) -> Dataset {
        let mut d = self.clone();
        d.instances.iter_mut().for_each(|i| i.meta = None);
        d
    }

    /// First `n` instances and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |instances: Vec<Instance>| Dataset {
            instances,
            ..self.clone_header()
        };
        (
            part(self.instances[..n].to_vec()),
            part(self.instances[n..].to_vec()),
        )
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            n_regions: self.n_regions,
            token_len: self.token_len,
            region_dim: self.region_dim,
            word_dim: self.word_dim,
            n_answers: self.n_answers,
            instances: Vec::new(),
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut templates = BTreeMap::new();
        let mut answers = vec![0; self.n_answers];
        for inst in &self.instances {
            let name = inst.template.map_or("unknown", Template::as_str);
            *templates.entry(name.to_string()).or_insert(0) += 1;
            if let Some(a) = answers.get_mut(inst.answer) {
                *a += 1;
            }
        }
        DatasetSummary {
            n_instances: self.len(),
            n_regions: self.n_regions,
            token_len: self.token_len,
            region_dim: self.region_dim,
            word_dim: self.word_dim,
            n_answers: self.n_answers,
            templates,
            answer_histogram: answers,
        }
    }
}

/// Counts, template mix and answer histogram of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_instances: usize,
    pub n_regions: usize,
    pub token_len: usize,
    pub region_dim: usize,
    pub word_dim: usize,
    pub n_answers: usize,
    pub templates: BTreeMap<String, usize>,
    pub answer_histogram: Vec<usize>,
}
