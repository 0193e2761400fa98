use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BatchOrder {
    #[default]
    Shuffle,
    Sequential,
}

/// Splits `0..n` into batches of `batch_size`; the last batch may be
/// shorter. Every index appears exactly once.
pub fn make_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    order: BatchOrder,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if order == BatchOrder::Shuffle {
        idx.shuffle(rng);
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacked features of a batch: regions `(B, n_regions, region_dim)`,
/// words `(B, token_len, word_dim)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub regions: Tensor,
    pub words: Tensor,
    pub answers: Vec<usize>,
}

pub fn collate(d: &Dataset, indices: &[usize]) -> Batch {
    let b = indices.len();
    let mut regions = Vec::with_capacity(b * d.n_regions * d.region_dim);
    let mut words = Vec::with_capacity(b * d.token_len * d.word_dim);
    let mut answers = Vec::with_capacity(b);
    for &i in indices {
        let inst = &d.instances[i];
        regions.extend_from_slice(&inst.regions);
        words.extend_from_slice(&inst.words);
        answers.push(inst.answer);
    }
    Batch {
        regions: Tensor::new(&[b, d.n_regions, d.region_dim], regions).expect("validated dataset"),
        words: Tensor::new(&[b, d.token_len, d.word_dim], words).expect("validated dataset"),
        answers,
    }
}
