mod common;

use common::*;
use dfaf_core::attention::{AttentionType, InterOrder};
use dfaf_core::data::{collate, generate_toy_dataset, Template, ToyTaskSpec};
use dfaf_core::model::{
    cross_entropy_loss, embed_inputs, forward, fuse_and_classify, predict, Fusion, ModelConfig,
    ModelParams,
};
use dfaf_core::ops::softmax_rows;
use dfaf_core::train::{train_step, TrainConfig, TrainState};
use dfaf_core::{LinearLayer, Parameters, Tape, Tensor};
use rand::seq::SliceRandom;

fn config(at: AttentionType, fusion: Fusion, blocks: usize) -> ModelConfig {
    ModelConfig {
        region_dim: 7,
        word_dim: 5,
        dim: 8,
        heads: 2,
        blocks,
        hidden: 6,
        n_answers: 4,
        fusion,
        order: InterOrder::Parallel,
        attention_type: at,
    }
}

fn head_logits(r: &Tensor, e: &Tensor, p: &ModelParams) -> Vec<f64> {
    let mut tape = Tape::new();
    let (rv, ev) = (tape.constant(r.clone()), tape.constant(e.clone()));
    let out = fuse_and_classify(&mut tape, rv, ev, p).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn fusion_identities() {
    let mut g = rng(1);
    let mul = ModelParams::init(config(AttentionType::Full, Fusion::Multiply, 0), &mut g).unwrap();
    let mut add = ModelParams::init(config(AttentionType::Full, Fusion::Add, 0), &mut g).unwrap();
    add.mlp_hidden = mul.mlp_hidden.clone();
    add.mlp_out = mul.mlp_out.clone();
    let r = randn(&[5, 8], &mut g);
    let a = head_logits(&r, &Tensor::ones(&[3, 8]), &mul);
    let b = head_logits(&r, &Tensor::zeros(&[3, 8]), &add);
    assert_eq!(a, b);

    let pooled = Tensor::new(
        &[1, 8],
        dfaf_core::ops::avg_pool_rows(&r).unwrap().into_data(),
    )
    .unwrap();
    let h = dfaf_core::linear::linear_forward(&mul.mlp_hidden, &pooled).unwrap();
    let h = dfaf_core::ops::apply_activation(dfaf_core::Activation::Relu, &h);
    let direct = dfaf_core::linear::linear_forward(&mul.mlp_out, &h).unwrap();
    for (x, y) in a.iter().zip(direct.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn concat_head_matches_composed_oracle() {
    let mut g = rng(2);
    let p = ModelParams::init(config(AttentionType::Full, Fusion::Concat, 0), &mut g).unwrap();
    let (r, e) = (randn(&[4, 8], &mut g), randn(&[3, 8], &mut g));
    let got = head_logits(&r, &e, &p);

    let mean = |t: &Tensor| -> Vec<f64> {
        (0..t.cols())
            .map(|c| (0..t.rows()).map(|i| t.at(i, c)).sum::<f64>() / t.rows() as f64)
            .collect()
    };
    let fused: Vec<f64> = mean(&r).into_iter().chain(mean(&e)).collect();
    let dense = |x: &[f64], l: &LinearLayer| -> Vec<f64> {
        (0..l.out_dim())
            .map(|j| {
                l.bias.data()[j]
                    + x.iter()
                        .enumerate()
                        .map(|(i, xi)| xi * l.weight.at(i, j))
                        .sum::<f64>()
            })
            .collect()
    };
    let h: Vec<f64> = dense(&fused, &p.mlp_hidden)
        .into_iter()
        .map(|x| x.max(0.0))
        .collect();
    let want = dense(&h, &p.mlp_out);
    for (x, y) in got.iter().zip(&want) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn identity_embedding_passes_features_through() {
    let mut g = rng(3);
    let mut cfg = config(AttentionType::Full, Fusion::Multiply, 1);
    cfg.region_dim = 8;
    cfg.word_dim = 8;
    let mut p = ModelParams::init(cfg, &mut g).unwrap();
    p.region_embed = LinearLayer::from_parts(Tensor::eye(8), Tensor::zeros(&[8])).unwrap();
    let (r, e) = (randn(&[6, 8], &mut g), randn(&[2, 8], &mut g));
    let mut tape = Tape::new();
    let (rv, ev) = (tape.constant(r.clone()), tape.constant(e));
    let (r0, _) = embed_inputs(&mut tape, rv, ev, &p).unwrap();
    assert_eq!(tape.value(r0).data(), r.data());
}

#[test]
fn predictions_are_normalized_deterministic_and_recorded() {
    let mut g = rng(4);
    for at in AttentionType::ALL {
        let p = ModelParams::init(config(at, Fusion::Multiply, 3), &mut g).unwrap();
        let (r, e) = (randn(&[5, 7], &mut g), randn(&[4, 5], &mut g));
        let a = predict(&r, &e, &p, true).unwrap();
        let b = predict(&r, &e, &p, false).unwrap();
        assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.records.as_ref().unwrap().len(), 3);
        assert!(b.records.is_none());
    }
}

#[test]
fn logits_ignore_region_order() {
    let mut g = rng(5);
    for trial in 0..24 {
        let mut cfg = config(AttentionType::ALL[trial % 4], Fusion::ALL[trial % 3], 2);
        cfg.order = [InterOrder::Parallel, InterOrder::RThenE, InterOrder::EThenR][trial % 3];
        let p = ModelParams::init(cfg, &mut g).unwrap();
        let (r, e) = (randn(&[9, 7], &mut g), randn(&[4, 5], &mut g));
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut g);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| r.row(i).to_vec()).collect();
        let a = predict(&r, &e, &p, false).unwrap().logits;
        let b = predict(&Tensor::from_rows(&rows).unwrap(), &e, &p, false)
            .unwrap()
            .logits;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn both_embeddings_receive_gradient() {
    let mut g = rng(6);
    let mut p =
        ModelParams::init(config(AttentionType::Full, Fusion::Multiply, 1), &mut g).unwrap();
    let (r, e) = (randn(&[2, 5, 7], &mut g), randn(&[2, 3, 5], &mut g));
    let mut tape = Tape::new();
    let logits = forward(&mut tape, &r, &e, &p, None).unwrap();
    let loss = cross_entropy_loss(&mut tape, logits, &[1, 3]).unwrap();
    let grads = tape.backward(loss).unwrap();
    p.accumulate_grads(&grads);
    for layer in [&p.region_embed, &p.word_embed] {
        assert!(layer.weight.grad().unwrap().iter().any(|&x| x.abs() > 1e-8));
    }
}

fn small_task(templates: &[Template], n: usize) -> dfaf_core::data::Dataset {
    let spec = ToyTaskSpec {
        n_regions: 5,
        grid_size: 3,
        n_colors: 5,
        n_shapes: 2,
        max_count: 2,
        token_len: 4,
        region_dim: 13,
        word_dim: 6,
        templates: templates.to_vec(),
        ..Default::default()
    };
    generate_toy_dataset(&spec, n).unwrap()
}

fn small_model(d: &dfaf_core::data::Dataset, blocks: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        region_dim: d.region_dim,
        word_dim: d.word_dim,
        dim: 8,
        heads: 2,
        blocks,
        hidden: 8,
        n_answers: d.n_answers,
        ..Default::default()
    };
    ModelParams::init(cfg, &mut rng(seed)).unwrap()
}

#[test]
fn loss_falls_over_fifty_steps_on_a_fixed_batch() {
    let d = small_task(&[Template::Attribute], 16);
    let batch = collate(&d, &(0..16).collect::<Vec<_>>());
    let mut p = small_model(&d, 1, 7);
    let mut state = TrainState::new(&p);
    let cfg = TrainConfig {
        dropout: 0.0,
        ..Default::default()
    };
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut p, &mut state.optimizer, &batch, 1e-2, &cfg, 0).unwrap())
        .collect();
    assert!(
        losses[49] < 0.5 * losses[0],
        "{} -> {}",
        losses[0],
        losses[49]
    );
    assert!(losses[40..].iter().all(|&l| l < losses[0]));
}

#[test]
fn deep_stack_stays_finite_for_a_hundred_steps() {
    let d = small_task(&Template::ALL, 64);
    let mut p = small_model(&d, 8, 8);
    let mut state = TrainState::new(&p);
    let cfg = TrainConfig::default();
    for step in 0..100 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % 64).collect();
        let loss = train_step(
            &mut p,
            &mut state.optimizer,
            &collate(&d, &idx),
            2e-3,
            &cfg,
            step as u64,
        )
        .unwrap();
        assert!(loss.is_finite(), "step {step}");
    }
    let mut finite = true;
    p.visit("", &mut |_, t| finite &= t.all_finite());
    assert!(finite);
}

#[test]
fn logit_gradient_is_probabilities_minus_targets_during_training() {
    let d = small_task(&Template::ALL, 24);
    let mut p = small_model(&d, 2, 9);
    let mut state = TrainState::new(&p);
    let cfg = TrainConfig::default();
    for step in 0..6u64 {
        let idx: Vec<usize> = (0..4).map(|i| (step as usize * 4 + i) % 24).collect();
        let batch = collate(&d, &idx);
        let mut tape = Tape::training(0.1, step).unwrap();
        let logits = forward(&mut tape, &batch.regions, &batch.words, &p, None).unwrap();
        let loss = cross_entropy_loss(&mut tape, logits, &batch.answers).unwrap();
        let grads = tape.backward(loss).unwrap();
        let probs = softmax_rows(tape.value(logits)).unwrap();
        let g = grads.wrt(logits).unwrap();
        let k = d.n_answers;
        for (b, &a) in batch.answers.iter().enumerate() {
            for j in 0..k {
                let want = (probs.data()[b * k + j] - if j == a { 1.0 } else { 0.0 }) / 4.0;
                assert!((g[b * k + j] - want).abs() < 1e-10);
            }
        }
        train_step(&mut p, &mut state.optimizer, &batch, 1e-3, &cfg, step).unwrap();
    }
}
