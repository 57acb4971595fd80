use std::collections::{BTreeSet, HashSet};

use fewshot_core::dataset::{
    decode_embeddings, encode_embeddings, encode_pgm, load_dataset, parse_pgm, split_classes, split_for_ensemble,
    write_image_dataset, LabeledDataset, Payload, Raster,
};
use fewshot_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embedding_dataset(sizes: &[usize]) -> LabeledDataset {
    let mut payloads = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            payloads.push((Payload::Embedding(vec![c as f32, i as f32]), c));
        }
    }
    LabeledDataset::new(payloads, (0..sizes.len()).map(|c| format!("k{c}")).collect()).unwrap()
}

/// `round(C * r / s)` in integers, half away from zero, at least one.
fn expected_share(classes: usize, r: u32, sum: u32) -> usize {
    let num = 2 * classes as u64 * u64::from(r) + u64::from(sum);
    ((num / (2 * u64::from(sum))) as usize).max(1)
}

#[test]
fn hundred_classes_five_one_four() {
    let ds = embedding_dataset(&[3; 100]);
    let split = split_classes(&ds, (5, 1, 4), 7).unwrap();
    assert_eq!(split.sizes(), (50, 10, 40));
    assert_eq!(split, split_classes(&ds, (5, 1, 4), 7).unwrap());
    assert_ne!(split, split_classes(&ds, (5, 1, 4), 8).unwrap());
}

#[test]
fn zero_ratio_is_rejected_by_name() {
    let ds = embedding_dataset(&[3; 10]);
    let err = split_classes(&ds, (0, 1, 4), 0).unwrap_err();
    assert!(matches!(err, Error::Split(_)));
    assert!(err.to_string().contains("train ratio"));
}

#[test]
fn shortfalls_are_reported() {
    let ds = embedding_dataset(&[3, 3, 2]);
    let pool = ds.pool(&ds.all_classes()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = pool.sample_episode(4, 1, 1, &mut rng).unwrap_err();
    assert!(err.to_string().contains("short by 1"), "{err}");
    let err = pool.sample_episode(3, 1, 2, &mut rng).unwrap_err();
    assert!(err.to_string().contains("short by 1"), "{err}");
}

#[test]
fn ten_thousand_episodes_cover_the_pool_uniformly() {
    let ds = embedding_dataset(&[12; 20]);
    let classes: BTreeSet<usize> = (0..20).step_by(2).collect();
    let pool = ds.pool(&classes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut class_hits = vec![0usize; 20];
    let mut seen = HashSet::new();
    let episodes = 10_000;
    for _ in 0..episodes {
        let ep = pool.sample_episode(5, 1, 3, &mut rng).unwrap();
        for &c in &ep.classes {
            class_hits[c] += 1;
        }
        for it in ep.support.iter().chain(&ep.query) {
            assert!(classes.contains(&ds.item(it.item_id).class_id));
            seen.insert(it.item_id);
        }
    }
    assert_eq!(seen.len(), 10 * 12, "every pool item is eventually drawn");
    // each class is drawn with probability 5/10; binomial sd = 50
    for c in &classes {
        let dev = (class_hits[*c] as f64 - 5000.0).abs();
        assert!(dev < 5.0 * 50.0, "class {c}: {} draws", class_hits[*c]);
    }
    assert!(class_hits.iter().enumerate().all(|(c, &h)| classes.contains(&c) || h == 0));
}

#[test]
fn image_corpus_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut payloads = Vec::new();
    for c in 0..3 {
        for _ in 0..4 {
            let px = (0..12).map(|_| f32::from(rng.random::<u8>()) / 255.0).collect();
            payloads.push((Payload::Raster(Raster::new(3, 4, px).unwrap()), c));
        }
    }
    let ds = LabeledDataset::new(payloads, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_image_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.class_names(), ds.class_names());
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.items().iter().zip(back.items()) {
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.payload, b.payload);
    }
}

#[test]
fn malformed_inputs_are_format_errors() {
    assert!(parse_pgm(b"P2\n2 2\n255\n\x00\x00\x00\x00").is_err());
    assert!(parse_pgm(b"P5\n2 2\n65535\n\x00\x00\x00\x00").is_err());
    assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x00\x00").is_err());
    let ok = parse_pgm(b"P5 # comment\n2 1\n255\n\x00\xff").unwrap();
    assert_eq!(ok.pixels(), &[0.0, 1.0]);
    assert_eq!(parse_pgm(&encode_pgm(&ok)).unwrap(), ok);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("labels.csv"), "name,label\nx.pgm,a\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    std::fs::write(dir.path().join("labels.csv"), "file,class\nmissing.pgm,a\n").unwrap();
    assert!(load_dataset(dir.path()).unwrap_err().is_input_error());

    let emb = encode_embeddings(&embedding_dataset(&[2, 2])).unwrap();
    assert!(decode_embeddings(&emb).is_ok());
    assert!(decode_embeddings(&emb[..emb.len() - 1]).is_err());
    let mut bad = emb.clone();
    bad[0] = b'X';
    assert!(decode_embeddings(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_is_a_partition_with_rounded_sizes(c in 3usize..120, a in 1u32..10, b in 1u32..10, t in 1u32..10, seed in any::<u64>()) {
        let ds = embedding_dataset(&vec![2; c]);
        let sum = a + b + t;
        let n_valid = expected_share(c, b, sum);
        let n_test = expected_share(c, t, sum);
        match split_classes(&ds, (a, b, t), seed) {
            Ok(split) => {
                prop_assert_eq!(split.sizes(), (c - n_valid - n_test, n_valid, n_test));
                let all: BTreeSet<usize> = split.meta_train.iter().chain(&split.meta_valid).chain(&split.meta_test).copied().collect();
                prop_assert_eq!(all.len(), c);
                prop_assert!(split.meta_train.is_disjoint(&split.meta_valid));
                prop_assert!(split.meta_train.is_disjoint(&split.meta_test));
                prop_assert!(split.meta_valid.is_disjoint(&split.meta_test));
            }
            Err(e) => {
                prop_assert!(n_valid + n_test >= c, "unexpected error {}", e);
            }
        }
    }

    #[test]
    fn episodes_have_the_requested_shape(way in 1usize..6, shot in 1usize..4, query in 1usize..5, seed in any::<u64>()) {
        let ds = embedding_dataset(&[8; 7]);
        let pool = ds.pool(&ds.all_classes()).unwrap();
        let ep = pool.sample_episode(way, shot, query, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(ep.support.len(), way * shot);
        prop_assert_eq!(ep.query.len(), way * query);
        prop_assert_eq!(ep.classes.iter().collect::<BTreeSet<_>>().len(), way);
        let ids: BTreeSet<usize> = ep.support.iter().chain(&ep.query).map(|i| i.item_id).collect();
        prop_assert_eq!(ids.len(), way * (shot + query), "no item repeats");
        for it in ep.support.iter().chain(&ep.query) {
            prop_assert_eq!(ds.item(it.item_id).class_id, ep.classes[it.label]);
        }
        for l in 0..way {
            prop_assert_eq!(ep.support_labels().iter().filter(|&&x| x == l).count(), shot);
            prop_assert_eq!(ep.query_labels().iter().filter(|&&x| x == l).count(), query);
        }
    }

    #[test]
    fn batches_are_class_balanced(way in 1usize..7, shot in 1usize..8, seed in any::<u64>()) {
        let ds = embedding_dataset(&[8; 7]);
        let pool = ds.pool(&ds.all_classes()).unwrap();
        let batch = pool.sample_batch(way, shot, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batch.size(), way * shot);
        let mut counts = std::collections::BTreeMap::new();
        for &(id, c) in &batch.items {
            prop_assert_eq!(ds.item(id).class_id, c);
            *counts.entry(c).or_insert(0) += 1;
        }
        prop_assert_eq!(counts.len(), way);
        prop_assert!(counts.values().all(|&n| n == shot));
    }

    #[test]
    fn ensemble_split_is_stratified(sizes in prop::collection::vec(2usize..20, 1..6), f in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = embedding_dataset(&sizes);
        let classes = ds.all_classes();
        let (train, test) = split_for_ensemble(&ds, &classes, f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (c, &n) in sizes.iter().enumerate() {
            let want = ((n as f64 * f).ceil() as usize).clamp(1, n - 1);
            prop_assert_eq!(train.items_of(c).len(), want);
            prop_assert_eq!(test.items_of(c).len(), n - want);
            let a: BTreeSet<_> = train.items_of(c).iter().collect();
            prop_assert!(test.items_of(c).iter().all(|i| !a.contains(i)));
        }
    }
}
