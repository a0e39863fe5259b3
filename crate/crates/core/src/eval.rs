//! Retrieval metrics: mean average precision and Rank-1.
//!
//! Features are L2-normalized and the gallery is ranked by Euclidean
//! distance to each query. Gallery items that share both identity and
//! domain with the query are excluded, the way same-camera matches are
//! excluded in person re-identification.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleLabel {
    pub id: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub per_query_ap: Vec<f64>,
}

fn l2_normalized(x: &Tensor) -> Vec<Vec<f64>> {
    x.rows()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

fn check_features(what: &str, x: &Tensor, labels: &[SampleLabel]) -> Result<()> {
    match *x.shape() {
        [n, _] if n == labels.len() => Ok(()),
        ref s => Err(Error::InvalidArgument(format!(
            "{what}: features {s:?} do not match {} labels",
            labels.len()
        ))),
    }
}

/// Relevance flags of the valid gallery items for every query, in ranked
/// order (ascending distance, gallery index on ties).
pub fn ranked_relevance(
    query: &Tensor,
    query_labels: &[SampleLabel],
    gallery: &Tensor,
    gallery_labels: &[SampleLabel],
) -> Result<Vec<Vec<bool>>> {
    check_features("query", query, query_labels)?;
    check_features("gallery", gallery, gallery_labels)?;
    if query.shape()[1] != gallery.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "evaluate_retrieval",
            lhs: query.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let q = l2_normalized(query);
    let g = l2_normalized(gallery);
    let mut out = Vec::with_capacity(q.len());
    for (qi, (qf, ql)) in q.iter().zip(query_labels).enumerate() {
        let mut ranked: Vec<(f64, usize)> = g
            .iter()
            .zip(gallery_labels)
            .enumerate()
            .filter(|(_, (_, gl))| *gl != ql)
            .map(|(j, (gf, _))| {
                let d = qf
                    .iter()
                    .zip(gf)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (d, j)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let relevance: Vec<bool> = ranked
            .iter()
            .map(|&(_, j)| gallery_labels[j].id == ql.id)
            .collect();
        if !relevance.iter().any(|&r| r) {
            return Err(Error::InvalidArgument(format!(
                "query {qi} (id {}, domain {}) has no relevant gallery item",
                ql.id, ql.domain
            )));
        }
        out.push(relevance);
    }
    Ok(out)
}

/// AP from the ranks of the relevant items: `(1/R) Σ_j j / rank_j`.
fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in relevance.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    sum / hits as f64
}

pub fn evaluate_retrieval(
    query: &Tensor,
    query_labels: &[SampleLabel],
    gallery: &Tensor,
    gallery_labels: &[SampleLabel],
) -> Result<RetrievalMetrics> {
    let ranked = ranked_relevance(query, query_labels, gallery, gallery_labels)?;
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let per_query_ap: Vec<f64> = ranked.iter().map(|r| average_precision(r)).collect();
    let n = ranked.len() as f64;
    Ok(RetrievalMetrics {
        map: per_query_ap.iter().sum::<f64>() / n,
        rank1: ranked.iter().filter(|r| r[0]).count() as f64 / n,
        per_query_ap,
    })
}

/// Reference AP by direct evaluation of `Σ_k P(k)·rel(k) / #relevant`, with
/// the precision at every cutoff recounted from scratch.
pub fn average_precision_oracle(relevance: &[bool]) -> Result<f64> {
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return Err(Error::InvalidArgument(
            "average precision needs at least one relevant item".into(),
        ));
    }
    let mut total = 0.0;
    for k in 1..=relevance.len() {
        if !relevance[k - 1] {
            continue;
        }
        let mut in_top_k = 0;
        for &r in &relevance[..k] {
            if r {
                in_top_k += 1;
            }
        }
        total += in_top_k as f64 / k as f64;
    }
    Ok(total / relevant as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(id: usize, domain: usize) -> SampleLabel {
        SampleLabel { id, domain }
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(average_precision_oracle(&[true]).unwrap(), 1.0);
        assert_eq!(average_precision_oracle(&[false, true]).unwrap(), 0.5);
        let ap = average_precision_oracle(&[true, false, true]).unwrap();
        assert!((ap - 0.833_333_333_333_333_3).abs() < 1e-12);
        assert!(average_precision_oracle(&[false, false]).is_err());
    }

    #[test]
    fn perfect_retrieval() {
        let q = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        let g = Tensor::from_rows(&[vec![0., 2.], vec![3., 0.1]]).unwrap();
        let m = evaluate_retrieval(
            &q,
            &[label(0, 0), label(1, 0)],
            &g,
            &[label(1, 1), label(0, 1)],
        )
        .unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.rank1, 1.0);
    }

    #[test]
    fn single_query_ranked_example() {
        // gallery sorted by distance: rel, non-rel, rel
        let q = Tensor::from_rows(&[vec![1., 0.]]).unwrap();
        let g = Tensor::from_rows(&[vec![1., 0.], vec![1., 0.5], vec![1., 1.]]).unwrap();
        let m = evaluate_retrieval(
            &q,
            &[label(0, 0)],
            &g,
            &[label(0, 1), label(1, 1), label(0, 2)],
        )
        .unwrap();
        assert!((m.map - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.rank1, 1.0);
    }

    #[test]
    fn same_id_same_domain_is_excluded() {
        let q = Tensor::from_rows(&[vec![1., 0.]]).unwrap();
        let g = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.], vec![0.8, 0.3]]).unwrap();
        let m = evaluate_retrieval(
            &q,
            &[label(0, 0)],
            &g,
            &[label(0, 0), label(0, 1), label(1, 1)],
        )
        .unwrap();
        // valid ranking: id 1 (closer), then id 0 in domain 1
        assert_eq!(m.rank1, 0.0);
        assert!((m.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn query_without_relevant_items_is_an_error() {
        let q = Tensor::from_rows(&[vec![1., 0.]]).unwrap();
        let g = Tensor::from_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap();
        assert!(evaluate_retrieval(&q, &[label(0, 0)], &g, &[label(0, 0), label(1, 0)]).is_err());
    }
}
