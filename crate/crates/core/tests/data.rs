mod common;

use common::rng;
use dfaf_core::data::{
    decode, encode, expected_size, generate_toy_dataset, make_batches, read_feature_file,
    write_feature_file, BatchOrder, DataError, Dataset, Instance, Question, Template, ToyTaskSpec,
};
use dfaf_core::train::{adamax_step, AdamaxState};
use dfaf_core::{LinearLayer, Parameters, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn spec(templates: &[Template], seed: u64) -> ToyTaskSpec {
    ToyTaskSpec {
        templates: templates.to_vec(),
        seed,
        ..Default::default()
    }
}

#[test]
fn oracle_reproduces_every_stored_answer() {
    let s = spec(&Template::ALL, 3);
    let d = generate_toy_dataset(&s, 2000).unwrap();
    d.validate().unwrap();
    for inst in &d.instances {
        let meta = inst.meta.as_ref().unwrap();
        assert_eq!(s.oracle(&meta.scene, &meta.question).unwrap(), inst.answer);
        assert_eq!(inst.template, Some(meta.question.template()));
        assert!(inst.answer < d.n_answers);
    }
    let summary = d.summary();
    assert_eq!(summary.n_instances, 2000);
    assert_eq!(summary.templates.len(), 4);
    assert_eq!(summary.answer_histogram.iter().sum::<usize>(), 2000);
}

#[test]
fn relational_referent_is_unique_and_answer_is_its_neighbor() {
    let s = spec(&[Template::Relational], 5);
    let d = generate_toy_dataset(&s, 500).unwrap();
    for inst in &d.instances {
        let meta = inst.meta.as_ref().unwrap();
        let Question::Relational { dir, color, shape } = meta.question else {
            panic!("wrong template")
        };
        let refs: Vec<_> = meta
            .scene
            .objects
            .iter()
            .filter(|o| o.color == color && o.shape == shape)
            .collect();
        assert_eq!(refs.len(), 1);
        let n = meta.scene.neighbor(refs[0], dir).unwrap();
        assert_eq!(
            s.answer_label(inst.answer),
            s.answer_label(s.oracle(&meta.scene, &meta.question).unwrap())
        );
        assert!(s.answer_label(inst.answer).contains(&n.color.to_string()));
    }
}

#[test]
fn same_seed_same_bits() {
    let s = spec(&Template::ALL, 11);
    let a = generate_toy_dataset(&s, 300).unwrap();
    let b = generate_toy_dataset(&s, 300).unwrap();
    assert_eq!(a, b);
    let c = generate_toy_dataset(&spec(&Template::ALL, 12), 300).unwrap();
    assert_ne!(a, c);
}

#[test]
fn tokens_have_fixed_length() {
    for len in [4, 6, 14] {
        let s = ToyTaskSpec {
            token_len: len,
            ..spec(&Template::ALL, 1)
        };
        let d = generate_toy_dataset(&s, 50).unwrap();
        assert!(d
            .instances
            .iter()
            .all(|i| i.words.len() == len * s.word_dim));
    }
}

/// Softmax regression fitted with Adamax, returning held-out accuracy.
fn fit_linear(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    classes: usize,
    epochs: usize,
) -> f64 {
    let dim = train[0].0.len();
    let mut g = rng(0);
    let mut layer = LinearLayer::init(dim, classes, &mut g);
    let mut opt = AdamaxState::new(&layer);
    for _ in 0..epochs {
        for chunk in train.chunks(64) {
            let x = Tensor::new(
                &[chunk.len(), dim],
                chunk.iter().flat_map(|(f, _)| f.clone()).collect(),
            )
            .unwrap();
            let y: Vec<usize> = chunk.iter().map(|(_, a)| *a).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = layer.forward(&mut tape, xv).unwrap();
            let loss = tape.cross_entropy(logits, &y).unwrap();
            let grads = tape.backward(loss).unwrap();
            layer.zero_grad();
            layer.accumulate_grads(&grads);
            adamax_step(&mut layer, &mut opt, 1e-2).unwrap();
        }
    }
    let correct = test
        .iter()
        .filter(|(f, a)| {
            let x = Tensor::new(&[1, dim], f.clone()).unwrap();
            let out = dfaf_core::linear::linear_forward(&layer, &x).unwrap();
            let best =
                (0..classes).fold(0, |b, j| if out.data()[j] > out.data()[b] { j } else { b });
            best == *a
        })
        .count();
    correct as f64 / test.len() as f64
}

type Labeled = Vec<(Vec<f64>, usize)>;

fn split(v: Labeled) -> (Labeled, Labeled) {
    let n = v.len() * 4 / 5;
    let test = v[n..].to_vec();
    let mut train = v;
    train.truncate(n);
    (train, test)
}

#[test]
fn probe_on_the_referenced_region_is_perfect() {
    let s = spec(&[Template::Attribute], 21);
    let d = generate_toy_dataset(&s, 1500).unwrap();
    let rd = d.region_dim;
    let rows: Vec<(Vec<f64>, usize)> = d
        .instances
        .iter()
        .map(|inst| {
            let meta = inst.meta.as_ref().unwrap();
            let Question::Attribute { color } = meta.question else {
                unreachable!()
            };
            let i = meta
                .scene
                .objects
                .iter()
                .position(|o| o.color == color)
                .unwrap();
            (inst.regions[i * rd..(i + 1) * rd].to_vec(), inst.answer)
        })
        .collect();
    let (train, test) = split(rows);
    assert_eq!(fit_linear(&train, &test, d.n_answers, 30), 1.0);
}

fn pooled(d: &Dataset, inst: &Instance) -> Vec<f64> {
    let mean = |xs: &[f64], rows: usize, width: usize| -> Vec<f64> {
        (0..width)
            .map(|c| (0..rows).map(|r| xs[r * width + c]).sum::<f64>() / rows as f64)
            .collect()
    };
    let mut f = mean(&inst.regions, d.n_regions, d.region_dim);
    f.extend(mean(&inst.words, d.token_len, d.word_dim));
    f
}

/// Accuracy of a pooled-features linear baseline (no attention), and the
/// accuracy of always answering the most frequent training answer.
fn baseline(template: Template) -> (f64, f64) {
    let s = spec(&[template], 33);
    let d = generate_toy_dataset(&s, 6000).unwrap();
    let rows: Vec<(Vec<f64>, usize)> = d
        .instances
        .iter()
        .map(|i| (pooled(&d, i), i.answer))
        .collect();
    let (train, test) = split(rows);
    let mut counts = vec![0usize; d.n_answers];
    train.iter().for_each(|(_, a)| counts[*a] += 1);
    let top = (0..d.n_answers).max_by_key(|&a| counts[a]).unwrap();
    let majority = test.iter().filter(|(_, a)| *a == top).count() as f64 / test.len() as f64;
    (fit_linear(&train, &test, d.n_answers, 20), majority)
}

#[test]
fn pooling_baseline_separates_attribute_from_relational() {
    let (attr, attr_chance) = baseline(Template::Attribute);
    let (rel, rel_chance) = baseline(Template::Relational);
    assert!(
        attr > attr_chance + 0.05,
        "attribute {attr} vs chance {attr_chance}"
    );
    assert!(
        (rel - rel_chance).abs() <= 0.05,
        "relational {rel} vs chance {rel_chance}"
    );
}

fn random_dataset(g: &mut impl Rng, n: usize) -> Dataset {
    let (nr, tl, rd, wd, na) = (
        g.random_range(1..5),
        g.random_range(1..4),
        g.random_range(1..6),
        g.random_range(1..4),
        g.random_range(1..7),
    );
    let instances = (0..n)
        .map(|_| Instance {
            regions: (0..nr * rd)
                .map(|_| g.random::<f64>() * 1e3 - 5e2)
                .collect(),
            words: (0..tl * wd)
                .map(|_| f64::from_bits(g.random::<u64>() & !(0x7ff << 52)))
                .collect(),
            answer: g.random_range(0..na),
            template: if g.random_bool(0.5) {
                Some(Template::ALL[g.random_range(0..4)])
            } else {
                None
            },
            meta: None,
        })
        .collect();
    Dataset {
        n_regions: nr,
        token_len: tl,
        region_dim: rd,
        word_dim: wd,
        n_answers: na,
        instances,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_codec_round_trips_bit_exactly(seed in any::<u64>(), n in 0usize..12) {
        let d = random_dataset(&mut rng(seed), n);
        let bytes = encode(&d).unwrap();
        prop_assert_eq!(bytes.len() as u64, expected_size(&d));
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), d.len());
        for (a, b) in back.instances.iter().zip(&d.instances) {
            let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.regions), bits(&b.regions));
            prop_assert_eq!(bits(&a.words), bits(&b.words));
            prop_assert_eq!(a.answer, b.answer);
            prop_assert_eq!(a.template, b.template);
        }
    }

    #[test]
    fn batches_cover_each_index_once(n in 1usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let batches = make_batches(n, bs, BatchOrder::Shuffle, &mut rng(seed)).unwrap();
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn batch_examples() {
    let sizes: Vec<usize> = make_batches(10, 4, BatchOrder::Sequential, &mut rng(0))
        .unwrap()
        .iter()
        .map(Vec::len)
        .collect();
    assert_eq!(sizes, [4, 4, 2]);
    let seq = make_batches(7, 3, BatchOrder::Sequential, &mut rng(0)).unwrap();
    assert_eq!(seq.concat(), (0..7).collect::<Vec<_>>());
    let a = make_batches(50, 8, BatchOrder::Shuffle, &mut rng(4)).unwrap();
    let b = make_batches(50, 8, BatchOrder::Shuffle, &mut rng(4)).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        make_batches(0, 3, BatchOrder::Shuffle, &mut rng(0)),
        Err(DataError::Empty)
    ));
}

#[test]
fn feature_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.dfft");
    let d = generate_toy_dataset(&spec(&Template::ALL, 2), 64)
        .unwrap()
        .without_meta();
    write_feature_file(&path, &d).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), expected_size(&d));
    assert_eq!(read_feature_file(&path).unwrap(), d);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(decode(&bytes), Err(DataError::BadMagic(_))));
    let missing = read_feature_file(&dir.path().join("absent"));
    assert!(matches!(missing, Err(DataError::Io { .. })));
}
