//! Versioned binary checkpoints, little-endian throughout.
//!
//! ```text
//! magic "DFAF" | version u32
//! config: region_dim word_dim dim heads blocks hidden n_answers (u32 each)
//!         fusion u8 | order u8 | attention_type u8
//! run config: len u32 | utf-8 text
//! tensors: count u32, then per tensor
//!          name_len u32 | name | rank u32 | dims u32 x rank | f64 x numel
//! optimizer: flag u8; when 1: step u64 | epochs_completed u32 | m then u
//!            for every tensor in the same order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{AttentionType, InterOrder};
use crate::model::{Fusion, ModelConfig, ModelParams};
use crate::params::Parameters;
use crate::train::{AdamaxState, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DFAF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated at byte {at}")]
    Truncated { at: usize },

    #[error("checkpoint has {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("parameter {name}: checkpoint has {found:?}, model expects {expected:?}")]
    ParamMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelParams,
    /// Effective run configuration, stored verbatim.
    pub run_config: String,
    pub train_state: Option<TrainState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    xs.iter()
        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
}

pub fn encode_checkpoint(
    model: &ModelParams,
    run_config: &str,
    state: Option<&TrainState>,
) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.region_dim,
        c.word_dim,
        c.dim,
        c.heads,
        c.blocks,
        c.hidden,
        c.n_answers,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&[c.fusion.code(), c.order.code(), c.attention_type.code()]);
    put_u32(&mut out, run_config.len());
    out.extend_from_slice(run_config.as_bytes());

    let mut count = 0;
    model.visit("", &mut |_, _| count += 1);
    put_u32(&mut out, count);
    model.visit("", &mut |name, t| {
        let name = name.trim_start_matches('.');
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        t.shape().iter().for_each(|&d| put_u32(&mut out, d));
        put_floats(&mut out, t.data());
    });

    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.optimizer.t.to_le_bytes());
            put_u32(&mut out, s.epochs_completed);
            for buf in s.optimizer.m.iter().chain(&s.optimizer.u) {
                put_floats(&mut out, buf);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                at: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or(CheckpointError::Truncated { at: self.pos })?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn text(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("text is not utf-8".into()))
    }
}

fn bad_code(what: &str, code: u8) -> CheckpointError {
    CheckpointError::Corrupt(format!("unknown {what} code {code}"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let [region_dim, word_dim, dim, heads, blocks, hidden, n_answers] = dims;
    let (f, o, a) = (r.u8()?, r.u8()?, r.u8()?);
    let config = ModelConfig {
        region_dim,
        word_dim,
        dim,
        heads,
        blocks,
        hidden,
        n_answers,
        fusion: Fusion::from_code(f).ok_or_else(|| bad_code("fusion", f))?,
        order: InterOrder::from_code(o).ok_or_else(|| bad_code("order", o))?,
        attention_type: AttentionType::from_code(a).ok_or_else(|| bad_code("attention type", a))?,
    };
    let run_config = r.text()?;
    let mut model = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut expected = Vec::new();
    model.visit("", &mut |name, t| {
        expected.push((name.trim_start_matches('.').to_string(), t.shape().to_vec()))
    });
    let count = r.u32()?;
    if count != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} tensors stored, architecture has {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let stored = r.text()?;
        if &stored != name {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor {name}, found {stored}"
            )));
        }
        let rank = r.u32()?;
        let found = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if &found != shape {
            return Err(CheckpointError::ParamMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found,
            });
        }
        values.push(r.floats(shape.iter().product())?);
    }
    let mut it = values.into_iter();
    model.visit_mut("", &mut |_, t| {
        t.data_mut()
            .copy_from_slice(&it.next().expect("counted above"))
    });

    let train_state = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let epochs_completed = r.u32()?;
            let mut optimizer = AdamaxState::new(&model);
            optimizer.t = t;
            for buf in optimizer.m.iter_mut().chain(optimizer.u.iter_mut()) {
                let n = buf.len();
                *buf = r.floats(n)?;
            }
            Some(TrainState {
                optimizer,
                epochs_completed,
            })
        }
        flag => return Err(bad_code("optimizer flag", flag)),
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            extra: bytes.len() - r.pos,
        });
    }
    Ok(Checkpoint {
        model,
        run_config,
        train_state,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelParams,
    run_config: &str,
    state: Option<&TrainState>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model, run_config, state)).map_err(|source| {
        CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
