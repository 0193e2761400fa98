//! Shared fixtures for the benchmarks.

use dfaf_core::attention::{AttentionType, DfafBlockParams, InterOrder};
use dfaf_core::data::{collate, generate_toy_dataset, Batch, ToyTaskSpec};
use dfaf_core::model::{ModelConfig, ModelParams};
use dfaf_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn block(dim: usize, heads: usize, attention_type: AttentionType) -> DfafBlockParams {
    DfafBlockParams::init(
        dim,
        heads,
        InterOrder::Parallel,
        attention_type,
        &mut rng(3),
    )
    .expect("valid head split")
}

/// A batch from the default toy task and a freshly initialised model for it.
pub fn toy_model_and_batch(batch_size: usize, blocks: usize) -> (ModelParams, Batch) {
    let d = generate_toy_dataset(&ToyTaskSpec::default(), batch_size).expect("default task");
    let batch = collate(&d, &(0..d.len()).collect::<Vec<_>>());
    let config = ModelConfig {
        region_dim: d.region_dim,
        word_dim: d.word_dim,
        n_answers: d.n_answers,
        blocks,
        ..ModelConfig::default()
    };
    let model = ModelParams::init(config, &mut rng(1)).expect("valid config");
    (model, batch)
}
