//! Binary feature file, little-endian throughout.
//!
//! ```text
//! magic "DFFT" | version u32 | n_instances u64
//! n_regions u32 | token_len u32 | region_dim u32 | word_dim u32 | n_answers u32
//! per instance: answer u32 | template u8 (255 = none)
//!               region f64 x n_regions*region_dim | word f64 x token_len*word_dim
//! ```

use std::fs;
use std::path::Path;

use super::{DataError, Dataset, Instance, Template};

pub const FEATURE_MAGIC: [u8; 4] = *b"DFFT";
pub const FEATURE_VERSION: u32 = 1;

const HEADER_LEN: u64 = 4 + 4 + 8 + 5 * 4;
const NO_TEMPLATE: u8 = u8::MAX;

fn instance_len(d: &Dataset) -> u64 {
    5 + 8 * (d.n_regions * d.region_dim + d.token_len * d.word_dim) as u64
}

/// Exact file size for the header fields of `d`.
pub fn expected_size(d: &Dataset) -> u64 {
    HEADER_LEN + d.len() as u64 * instance_len(d)
}

pub fn encode(d: &Dataset) -> Result<Vec<u8>, DataError> {
    d.validate()?;
    let mut out = Vec::with_capacity(expected_size(d) as usize);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(d.len() as u64).to_le_bytes());
    for v in [
        d.n_regions,
        d.token_len,
        d.region_dim,
        d.word_dim,
        d.n_answers,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for inst in &d.instances {
        out.extend_from_slice(&(inst.answer as u32).to_le_bytes());
        out.push(inst.template.map_or(NO_TEMPLATE, Template::code));
        for x in inst.regions.iter().chain(&inst.words) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn floats(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| f64::from_le_bytes(self.take())).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DataError> {
    let found = bytes.len() as u64;
    if found < 4 {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if found < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found,
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != FEATURE_VERSION {
        return Err(DataError::UnsupportedVersion {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let n = u64::from_le_bytes(r.take());
    let mut d = Dataset {
        n_regions: r.u32() as usize,
        token_len: r.u32() as usize,
        region_dim: r.u32() as usize,
        word_dim: r.u32() as usize,
        n_answers: r.u32() as usize,
        instances: Vec::new(),
    };
    let expected = instance_len(&d)
        .checked_mul(n)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .unwrap_or(u64::MAX);
    if found < expected {
        return Err(DataError::Truncated { expected, found });
    }
    if found > expected {
        return Err(DataError::TrailingBytes {
            extra: found - expected,
        });
    }
    let (nr, nw) = (d.n_regions * d.region_dim, d.token_len * d.word_dim);
    d.instances = (0..n)
        .map(|_| {
            let answer = r.u32() as usize;
            let [code] = r.take::<1>();
            Instance {
                answer,
                template: Template::from_code(code),
                regions: r.floats(nr),
                words: r.floats(nw),
                meta: None,
            }
        })
        .collect();
    d.validate()?;
    Ok(d)
}

pub fn write_feature_file(path: &Path, d: &Dataset) -> Result<(), DataError> {
    let bytes = encode(d)?;
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_feature_file(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
