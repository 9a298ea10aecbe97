use cbmlab::dataset::{inject_noise, LabeledDataset, NoiseKind, NoiseScope, NoiseSpec};
use cbmlab::seeded_rng;
use ndarray::Array2;
use rand::Rng;

fn dataset(n: usize, k: usize, classes: usize, group: Option<usize>, seed: u64) -> LabeledDataset {
    let mut rng = seeded_rng(seed);
    let concepts = Array2::from_shape_simple_fn((n, k), || rng.gen_range(0..2u8));
    let targets = (0..n).map(|i| i % classes).collect();
    let mut ds = LabeledDataset::new(Array2::zeros((n, 1)), concepts, targets, classes).unwrap();
    if let Some(size) = group {
        ds.groups = Some(
            (0..k)
                .collect::<Vec<_>>()
                .chunks(size)
                .map(<[usize]>::to_vec)
                .collect(),
        );
    }
    ds
}

fn spec(kind: NoiseKind, rate: f64, apply_to: NoiseScope) -> NoiseSpec {
    NoiseSpec {
        kind,
        rate,
        apply_to,
        seed: 99,
    }
}

#[test]
fn symmetric_concept_rate() {
    let ds = dataset(10_000, 10, 2, None, 1);
    let (_, mask) =
        inject_noise(&ds, &spec(NoiseKind::Symmetric, 0.3, NoiseScope::Concepts)).unwrap();
    assert!((mask.concept_flip_fraction() - 0.3).abs() < 0.01);
    assert_eq!(mask.target_flip_fraction(), 0.0);
}

#[test]
fn mask_xor_recovers_clean_concepts() {
    let ds = dataset(500, 7, 3, None, 2);
    let (noisy, mask) =
        inject_noise(&ds, &spec(NoiseKind::Asymmetric, 0.4, NoiseScope::Both)).unwrap();
    let restored = &noisy.concepts ^ &mask.concepts;
    assert_eq!(restored, ds.concepts);
    for i in 0..ds.len() {
        assert_eq!(mask.targets[i], noisy.targets[i] != ds.targets[i]);
    }
}

#[test]
fn symmetric_target_destinations_are_uniform() {
    let classes = 5;
    let n = 50_000;
    let ds = LabeledDataset::new(
        Array2::zeros((n, 1)),
        Array2::zeros((n, 1)),
        vec![2; n],
        classes,
    )
    .unwrap();
    let (noisy, _) =
        inject_noise(&ds, &spec(NoiseKind::Symmetric, 1.0, NoiseScope::Targets)).unwrap();
    let mut counts = [0usize; 5];
    for &y in &noisy.targets {
        counts[y] += 1;
    }
    assert_eq!(counts[2], 0);
    // Chi-square over the four destinations, 3 dof; 16.27 is the 0.1% quantile.
    let expected = n as f64 / 4.0;
    let chi2: f64 = [0, 1, 3, 4]
        .iter()
        .map(|&c| (counts[c] as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < 16.27, "{counts:?}");
}

#[test]
fn asymmetric_full_rate_is_cyclic() {
    let ds = dataset(90, 4, 3, None, 3);
    let (noisy, _) =
        inject_noise(&ds, &spec(NoiseKind::Asymmetric, 1.0, NoiseScope::Targets)).unwrap();
    for (a, b) in ds.targets.iter().zip(&noisy.targets) {
        assert_eq!(*b, (a + 1) % 3);
    }
    assert!(ds
        .targets
        .iter()
        .zip(&noisy.targets)
        .filter(|(a, _)| **a == 2)
        .all(|(_, b)| *b == 0));
}

#[test]
fn asymmetric_concept_rate_counts_events() {
    // Each event flips a concept and its cyclic neighbour, so an entry ends
    // up changed with probability 2γ(1 − γ).
    let ds = dataset(10_000, 10, 2, None, 4);
    let gamma = 0.2;
    let (_, mask) = inject_noise(
        &ds,
        &spec(NoiseKind::Asymmetric, gamma, NoiseScope::Concepts),
    )
    .unwrap();
    assert!((mask.concept_flip_fraction() - 2.0 * gamma * (1.0 - gamma)).abs() < 0.01);
}

#[test]
fn grouped_noise_flips_at_most_one_per_group() {
    let ds = dataset(10_000, 12, 2, Some(4), 5);
    let gamma = 0.3;
    let (_, mask) =
        inject_noise(&ds, &spec(NoiseKind::Grouped, gamma, NoiseScope::Concepts)).unwrap();
    let mut events = 0;
    for row in mask.concepts.rows() {
        for g in 0..3 {
            let flips: u32 = (0..4).map(|j| u32::from(row[g * 4 + j])).sum();
            assert!(flips <= 1);
            events += flips;
        }
    }
    let rate = f64::from(events) / 30_000.0;
    assert!((rate - gamma).abs() < 0.01, "{rate}");
}

#[test]
fn input_is_left_untouched() {
    let ds = dataset(200, 5, 4, None, 6);
    let copy = ds.clone();
    inject_noise(&ds, &spec(NoiseKind::Symmetric, 0.5, NoiseScope::Both)).unwrap();
    assert_eq!(ds, copy);
}
