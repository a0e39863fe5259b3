//! Training objectives: per-branch identity cross-entropy, batch-hard
//! triplet, and the dimensional consistency metric loss (DCML) that keeps
//! sibling branch features aligned.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::autodiff::Var;
use crate::error::{Error, Result};

static CHEBYSHEV_FAULT: AtomicBool = AtomicBool::new(false);

/// Test-harness hook: while set, the Chebyshev distance used by DCML returns
/// the mean absolute difference instead of the maximum. Exists so the
/// self-test can demonstrate that it catches a broken implementation.
#[doc(hidden)]
pub fn inject_chebyshev_fault(on: bool) {
    CHEBYSHEV_FAULT.store(on, Ordering::SeqCst);
}

fn chebyshev_fault() -> bool {
    CHEBYSHEV_FAULT.load(Ordering::SeqCst)
}

/// Weights of the cross-entropy, triplet and DCML terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub triplet: f64,
    pub dcml: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            triplet: 1.0,
            dcml: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.ce), ("w2", self.triplet), ("w3", self.dcml)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be a nonnegative number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Distance applied between sibling branch features by [`dcml_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DcmlMetric {
    /// Largest absolute component difference.
    #[default]
    Chebyshev,
    Manhattan,
    Euclidean,
}

impl DcmlMetric {
    pub fn name(&self) -> &'static str {
        match self {
            DcmlMetric::Chebyshev => "chebyshev",
            DcmlMetric::Manhattan => "manhattan",
            DcmlMetric::Euclidean => "euclidean",
        }
    }
}

impl std::str::FromStr for DcmlMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "chebyshev" => Ok(DcmlMetric::Chebyshev),
            "manhattan" => Ok(DcmlMetric::Manhattan),
            "euclidean" => Ok(DcmlMetric::Euclidean),
            other => Err(format!(
                "expected chebyshev, manhattan or euclidean, got `{other}`"
            )),
        }
    }
}

/// `max_i |x_i - y_i|`.
pub fn chebyshev_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "chebyshev_distance",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Row-wise distance between two `(N, d)` feature batches, `(N)`.
fn rowwise_distance<'t>(a: Var<'t>, b: Var<'t>, metric: DcmlMetric) -> Result<Var<'t>> {
    let diff = a.sub(b)?;
    match metric {
        DcmlMetric::Chebyshev if chebyshev_fault() => {
            let d = *diff.shape().last().unwrap_or(&1);
            Ok(diff.abs().sum_last()?.scale(1.0 / d as f64))
        }
        DcmlMetric::Chebyshev => diff.abs().max_last(),
        DcmlMetric::Manhattan => diff.abs().sum_last(),
        DcmlMetric::Euclidean => diff.square().sum_last()?.sqrt(),
    }
}

fn check_matrix(op: &'static str, v: Var<'_>) -> Result<(usize, usize)> {
    match *v.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::InvalidTensor(format!(
            "{op}: expected (N, d) features, got {s:?}"
        ))),
    }
}

/// Mean over samples and over all `k(k-1)/2` branch pairs of the distance
/// between the two branches' features for that sample.
pub fn dcml_loss<'t>(branch_features: &[Var<'t>], metric: DcmlMetric) -> Result<Var<'t>> {
    let k = branch_features.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "DCML needs at least 2 branches, got {k}"
        )));
    }
    let shape = branch_features[0].shape();
    check_matrix("dcml_loss", branch_features[0])?;
    for f in &branch_features[1..] {
        if f.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "dcml_loss",
                lhs: shape,
                rhs: f.shape(),
            });
        }
    }
    let mut acc: Option<Var<'t>> = None;
    for i in 0..k {
        for j in i + 1..k {
            let d = rowwise_distance(branch_features[i], branch_features[j], metric)?;
            acc = Some(match acc {
                None => d,
                Some(a) => a.add(d)?,
            });
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(acc.unwrap().mean().scale(1.0 / pairs))
}

/// Batch-mean softmax cross-entropy of `features · classifierᵀ` against
/// `labels`. The classifier is `(C, d)` with no bias.
pub fn cross_entropy_branch<'t>(
    features: Var<'t>,
    labels: &[usize],
    classifier: Var<'t>,
) -> Result<Var<'t>> {
    let (n, d) = check_matrix("cross_entropy", features)?;
    let (classes, cd) = check_matrix("cross_entropy", classifier)?;
    if cd != d {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n, d],
            rhs: vec![classes, cd],
        });
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier needs at least 2 classes, got {classes}"
        )));
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let logits = features.matmul(classifier.transpose()?)?;
    cross_entropy_logits(logits, labels)
}

/// Batch-mean cross-entropy of precomputed `(N, C)` logits.
pub fn cross_entropy_logits<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, classes) = check_matrix("cross_entropy", logits)?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let picked = logits.gather(
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| i * classes + y)
            .collect(),
    )?;
    Ok(logits.logsumexp_rows()?.sub(picked)?.mean())
}

/// Hardest positive and negative of every anchor, by Euclidean distance on
/// forward values. Ties go to the lowest index.
pub fn hardest_pairs(rows: &[&[f64]], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = rows.len();
    let mut pairs = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| j != a) {
            let d = euclidean(rows[a], rows[j]);
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((q, _))) => pairs.push((p, q)),
            (None, _) => {
                return Err(Error::InvalidArgument(format!(
                    "label {} has a single instance in the batch",
                    labels[a]
                )))
            }
            (_, None) => {
                return Err(Error::InvalidArgument(
                    "batch contains a single identity".into(),
                ))
            }
        }
    }
    Ok(pairs)
}

/// Anchor-mean of `[d(a, hardest p) − d(a, hardest n) + margin]₊`.
pub fn batch_hard_triplet<'t>(features: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    let (n, _) = check_matrix("batch_hard_triplet", features)?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "triplet margin must be >= 0, got {margin}"
        )));
    }
    let pairs = features.with_value(|v| {
        let rows: Vec<&[f64]> = v.rows().collect();
        hardest_pairs(&rows, labels)
    })?;
    let positives = features.gather_rows(pairs.iter().map(|p| p.0).collect())?;
    let negatives = features.gather_rows(pairs.iter().map(|p| p.1).collect())?;
    let d_ap = rowwise_distance(features, positives, DcmlMetric::Euclidean)?;
    let d_an = rowwise_distance(features, negatives, DcmlMetric::Euclidean)?;
    Ok(d_ap.sub(d_an)?.add_scalar(margin).relu().mean())
}

/// The weighted objective and its unweighted parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    /// Sum over branches of the cross-entropy.
    pub ce: f64,
    /// Sum over branches of the triplet loss.
    pub triplet: f64,
    /// DCML value, 0 for a single branch.
    pub dcml: f64,
}

/// Settings shared by every term of [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub margin: f64,
    pub metric: DcmlMetric,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            margin: DEFAULT_MARGIN,
            metric: DcmlMetric::Chebyshev,
        }
    }
}

/// `Σ_b [w1·CE_b + w2·Tri_b] + w3·DCML`, where `logits[b]` are branch `b`'s
/// classifier outputs. DCML is included only for two or more branches.
pub fn total_loss<'t>(
    features: &[Var<'t>],
    logits: &[Var<'t>],
    labels: &[usize],
    config: &LossConfig,
) -> Result<LossTerms<'t>> {
    config.weights.validate()?;
    if features.is_empty() || features.len() != logits.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature tensors and {} logit tensors",
            features.len(),
            logits.len()
        )));
    }
    let w = config.weights;
    let mut total: Option<Var<'t>> = None;
    let mut push = |v: Var<'t>| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => t.add(v)?,
        });
        Ok(())
    };
    let (mut ce_sum, mut tri_sum) = (0.0, 0.0);
    for (f, z) in features.iter().zip(logits) {
        let ce = cross_entropy_logits(*z, labels)?;
        let tri = batch_hard_triplet(*f, labels, config.margin)?;
        ce_sum += ce.item()?;
        tri_sum += tri.item()?;
        push(ce.scale(w.ce))?;
        push(tri.scale(w.triplet))?;
    }
    let mut dcml = 0.0;
    if features.len() >= 2 {
        let term = dcml_loss(features, config.metric)?;
        dcml = term.item()?;
        push(term.scale(w.dcml))?;
    }
    Ok(LossTerms {
        total: total.unwrap(),
        ce: ce_sum,
        triplet: tri_sum,
        dcml,
    })
}
