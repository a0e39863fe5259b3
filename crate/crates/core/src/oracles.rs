//! Slow, obviously-correct reference implementations.
//!
//! Each function here recomputes a quantity from its definition with plain
//! loops and shares no code with the fast path it checks. They back the
//! self-test command and the equivalence tests.

#![allow(clippy::needless_range_loop)]

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{average_precision_oracle, SampleLabel};
use crate::losses::DcmlMetric;
use crate::tensor::Tensor;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

fn matrix_rows(what: &str, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    if x.rank() != 2 {
        return Err(Error::InvalidTensor(format!(
            "{what}: expected a matrix, got {:?}",
            x.shape()
        )));
    }
    Ok(x.rows().map(<[f64]>::to_vec).collect())
}

/// Style donor of every sample by scanning all pairs: the partner whose mean
/// vector is farthest away, lowest index on ties, itself when alone.
pub fn brute_force_match(mu: &Tensor) -> Result<Vec<usize>> {
    let rows = matrix_rows("brute_force_match", mu)?;
    let n = rows.len();
    let mut out = vec![0; n];
    for i in 0..n {
        let mut best = i;
        let mut best_d = -1.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = squared_distance(&rows[i], &rows[j]);
            if d > best_d {
                best = j;
                best_d = d;
            }
        }
        out[i] = best;
    }
    Ok(out)
}

fn pair_distance(a: &[f64], b: &[f64], metric: DcmlMetric) -> f64 {
    let mut acc = 0.0_f64;
    for i in 0..a.len() {
        let d = (a[i] - b[i]).abs();
        match metric {
            DcmlMetric::Chebyshev => {
                if d > acc {
                    acc = d;
                }
            }
            DcmlMetric::Manhattan => acc += d,
            DcmlMetric::Euclidean => acc += d * d,
        }
    }
    if metric == DcmlMetric::Euclidean {
        acc.sqrt()
    } else {
        acc
    }
}

/// DCML value from the double sum over branch pairs, per sample.
pub fn dcml_double_loop(branch_features: &[Tensor], metric: DcmlMetric) -> Result<f64> {
    let k = branch_features.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "DCML needs at least 2 branches, got {k}"
        )));
    }
    let branches: Vec<Vec<Vec<f64>>> = branch_features
        .iter()
        .map(|f| matrix_rows("dcml_double_loop", f))
        .collect::<Result<_>>()?;
    let n = branches[0].len();
    let mut total = 0.0;
    for s in 0..n {
        let mut per_sample = 0.0;
        for a in 0..k {
            for b in 0..k {
                if a < b {
                    per_sample += pair_distance(&branches[a][s], &branches[b][s], metric);
                }
            }
        }
        total += per_sample / (k * (k - 1) / 2) as f64;
    }
    Ok(total / n as f64)
}

/// Batch-hard triplet loss by enumerating every valid `(anchor, positive,
/// negative)` triple and keeping, per anchor, the largest hinge.
pub fn triplet_exhaustive(features: &Tensor, labels: &[usize], margin: f64) -> Result<f64> {
    let rows = matrix_rows("triplet_exhaustive", features)?;
    let n = rows.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut worst: Option<f64> = None;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let d_ap = squared_distance(&rows[a], &rows[p]).sqrt();
                let d_an = squared_distance(&rows[a], &rows[q]).sqrt();
                let hinge = (d_ap - d_an + margin).max(0.0);
                worst = Some(worst.map_or(hinge, |w: f64| w.max(hinge)));
            }
        }
        total += worst
            .ok_or_else(|| Error::InvalidArgument(format!("anchor {a} has no valid triplet")))?;
    }
    Ok(total / n as f64)
}

/// mAP recomputed from scratch: normalize, measure every query–gallery
/// distance, drop same-id same-domain items, sort, and feed each relevance
/// list to [`average_precision_oracle`].
pub fn map_via_oracle(
    query: &Tensor,
    query_labels: &[SampleLabel],
    gallery: &Tensor,
    gallery_labels: &[SampleLabel],
) -> Result<f64> {
    let normalize = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    r.iter().map(|v| v / n).collect()
                } else {
                    r
                }
            })
            .collect()
    };
    let q = normalize(matrix_rows("map_via_oracle", query)?);
    let g = normalize(matrix_rows("map_via_oracle", gallery)?);
    if q.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let mut sum = 0.0;
    for (qi, ql) in q.iter().zip(query_labels) {
        let mut candidates = Vec::new();
        for (j, gl) in gallery_labels.iter().enumerate() {
            if gl.id == ql.id && gl.domain == ql.domain {
                continue;
            }
            candidates.push((squared_distance(qi, &g[j]).sqrt(), j));
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = candidates
            .iter()
            .map(|&(_, j)| gallery_labels[j].id == ql.id)
            .collect();
        sum += average_precision_oracle(&relevance)?;
    }
    Ok(sum / q.len() as f64)
}

/// Chance-level mAP for fixed features, estimated by shuffling the gallery
/// labels. Permutations that leave some query without a relevant item are
/// skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChanceEstimate {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

pub fn chance_map_by_permutation(
    query: &Tensor,
    query_labels: &[SampleLabel],
    gallery: &Tensor,
    gallery_labels: &[SampleLabel],
    permutations: usize,
    rng: &mut impl Rng,
) -> Result<ChanceEstimate> {
    let mut labels = gallery_labels.to_vec();
    let mut values = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        labels.shuffle(rng);
        if let Ok(m) = map_via_oracle(query, query_labels, gallery, &labels) {
            values.push(m);
        }
    }
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "too few valid label permutations for a chance estimate".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(ChanceEstimate {
        mean,
        std: var.sqrt(),
        samples: values.len(),
    })
}
