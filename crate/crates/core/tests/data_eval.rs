use adp_core::data::{generate_dataset, pk_batch_sample, SyntheticSpec};
use adp_core::eval::{evaluate_retrieval, SampleLabel};
use adp_core::oracles::chance_map_by_permutation;
use adp_core::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

#[test]
fn batch_of_sixty_four() {
    let spec = SyntheticSpec {
        num_ids: 20,
        samples_per_id_per_domain: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let split = ds.split(2).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let batch = pk_batch_sample(&ds, &split.train, 16, 4, &mut rng).unwrap();
    assert_eq!(batch.labels.len(), 64);
    assert_eq!(batch.tokens.shape(), &[64, spec.tokens, spec.channels]);
    let mut counts = std::collections::BTreeMap::new();
    for l in &batch.labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 16);
    assert!(counts.values().all(|&c| c == 4));
}

fn mean_distance(pairs: impl Iterator<Item = (Vec<f64>, Vec<f64>)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for (a, b) in pairs {
        sum += a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        n += 1;
    }
    sum / n as f64
}

#[test]
fn strong_style_dominates_identity() {
    let spec = SyntheticSpec {
        noise_sigma: 0.05,
        style_strength: 4.0,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let flat: Vec<(Vec<f64>, usize, usize)> = ds
        .samples
        .iter()
        .map(|s| (s.tokens.data().to_vec(), s.id, s.domain))
        .collect();
    let all_pairs = || {
        flat.iter()
            .enumerate()
            .flat_map(|(i, a)| flat[i + 1..].iter().map(move |b| (a, b)))
    };
    let same_domain_other_id = mean_distance(
        all_pairs()
            .filter(|(a, b)| a.2 == b.2 && a.1 != b.1)
            .map(|(a, b)| (a.0.clone(), b.0.clone())),
    );
    let same_id_other_domain = mean_distance(
        all_pairs()
            .filter(|(a, b)| a.1 == b.1 && a.2 != b.2)
            .map(|(a, b)| (a.0.clone(), b.0.clone())),
    );
    assert!(
        same_domain_other_id < same_id_other_domain,
        "{same_domain_other_id} vs {same_id_other_domain}"
    );
}

/// Queries and gallery are disjoint: shuffling gallery labels is then an
/// exchangeable null for features that carry no identity information.
#[test]
fn random_features_score_near_chance() {
    let mut rng = StdRng::seed_from_u64(17);
    let labels = |domains: std::ops::Range<usize>, per: usize| -> Vec<SampleLabel> {
        (0..6)
            .flat_map(|id| {
                domains
                    .clone()
                    .flat_map(move |domain| (0..per).map(move |_| SampleLabel { id, domain }))
            })
            .collect()
    };
    let query_labels = labels(0..1, 2);
    let gallery_labels = labels(1..3, 2);
    let mut feats = |n: usize| {
        Tensor::new(
            vec![n, 8],
            (0..n * 8).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap()
    };
    let query = feats(query_labels.len());
    let gallery = feats(gallery_labels.len());
    let observed = evaluate_retrieval(&query, &query_labels, &gallery, &gallery_labels)
        .unwrap()
        .map;
    let chance = chance_map_by_permutation(
        &query,
        &query_labels,
        &gallery,
        &gallery_labels,
        1000,
        &mut rng,
    )
    .unwrap();
    assert_eq!(chance.samples, 1000);
    assert!(
        (observed - chance.mean).abs() < 3.0 * chance.std,
        "observed {observed}, chance {} ± {}",
        chance.mean,
        chance.std
    );
}
