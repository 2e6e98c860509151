use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::graph::default_graph;

fn small() -> Dataset {
    generate_dataset(&default_graph(), 11, 0.0, &DatasetSpec::scaled(25)).unwrap()
}

#[test]
fn default_allocation_is_stratified() {
    let alloc = DatasetSpec::default().test_allocation().unwrap();
    assert_eq!(alloc.iter().sum::<usize>(), 650);
    // Shares are 38.81 and 67.91; the nine leftover samples go to the larger remainders.
    assert_eq!(alloc, vec![38, 68, 68, 68, 68, 68, 68, 68, 68, 68]);
}

#[test]
fn allocation_rejects_oversized_test_split() {
    let spec = DatasetSpec {
        class_counts: vec![2, 2],
        test_samples: 5,
    };
    assert!(spec.test_allocation().is_err());
}

#[test]
fn generated_histogram_and_split_follow_the_spec() {
    let ds = small();
    let spec = DatasetSpec::scaled(25);
    assert_eq!(ds.class_histogram(), spec.class_counts);
    assert_eq!(ds.manifest.test_indices.len(), spec.test_samples);
    let all: BTreeSet<usize> = ds
        .manifest
        .train_indices
        .iter()
        .chain(&ds.manifest.test_indices)
        .copied()
        .collect();
    assert_eq!(all.len(), ds.samples.len());
    for (i, s) in ds.samples.iter().enumerate() {
        assert_eq!(s.label, ds.manifest.scenarios[i].label().unwrap());
    }
}

#[test]
fn regeneration_is_identical_and_seeds_matter() {
    let a = small();
    assert_eq!(a, small());
    let b = generate_dataset(&default_graph(), 12, 0.0, &DatasetSpec::scaled(25)).unwrap();
    assert_ne!(a.manifest.train_sha256, b.manifest.train_sha256);
}

#[test]
fn normalization_uses_train_statistics_only() {
    let ds = small();
    let train = ds.normalized(Split::Train).unwrap();
    let channels = train[0].channels();
    for c in [0, 7, channels - 1] {
        let values: Vec<f64> = train.iter().flat_map(|s| s.channel(c)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
    }
    let recomputed = NormStats::from_samples(ds.split(Split::Train)).unwrap();
    assert_eq!(recomputed, ds.manifest.norm);
}

#[test]
fn write_then_load_round_trips_and_detects_tampering() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);

    let path = dir.path().join(TEST_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn large_seeds_survive_the_manifest() {
    let mut ds = small();
    ds.manifest.seed = u64::MAX - 3;
    let text = ds.manifest.to_toml().unwrap();
    assert_eq!(DatasetManifest::from_toml(&text).unwrap().seed, u64::MAX - 3);
}

#[test]
fn manifest_rejects_overlapping_splits() {
    let mut m = small().manifest;
    m.test_indices[0] = m.train_indices[0];
    assert!(DatasetManifest::from_toml(&m.to_toml().unwrap()).is_err());
}

#[test]
fn batches_reject_bad_arguments() {
    assert!(batches(10, 0, None, 0).is_err());
    assert!(matches!(batches(0, 4, None, 0), Err(Error::EmptySplit)));
    assert_eq!(batches(5, 2, None, 0).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4]]);
}

proptest! {
    #[test]
    fn batches_cover_every_position_once(len in 1usize..200, size in 1usize..20, seed in any::<u64>(), epoch in 0usize..50) {
        let b = batches(len, size, Some(seed), epoch).unwrap();
        prop_assert_eq!(b.len(), len.div_ceil(size));
        prop_assert!(b[..b.len() - 1].iter().all(|x| x.len() == size));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(b.clone(), batches(len, size, Some(seed), epoch).unwrap());
    }

    #[test]
    fn largest_remainder_allocation_is_proportional(counts in proptest::collection::vec(1usize..500, 1..12), share in 0.0f64..1.0) {
        let total: usize = counts.iter().sum();
        let spec = DatasetSpec { class_counts: counts.clone(), test_samples: (total as f64 * share) as usize };
        let alloc = spec.test_allocation().unwrap();
        prop_assert_eq!(alloc.iter().sum::<usize>(), spec.test_samples);
        for (a, c) in alloc.iter().zip(&counts) {
            let exact = (*c * spec.test_samples) as f64 / total as f64;
            prop_assert!((*a as f64 - exact).abs() < 1.0);
            prop_assert!(a <= c);
        }
    }
}
