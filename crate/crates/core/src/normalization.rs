//! Instance normalization, max-deviance adaptive instance normalization
//! (MAIN) and their learnable per-channel blend (DyMAIN).
//!
//! Feature maps are `(N, L, d)`: instances, locations, channels. Statistics
//! are taken over the location axis per instance and channel, with the
//! biased (divide by `L`) variance.

use crate::autodiff::{reduce_stats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-instance, per-channel location statistics.
#[derive(Clone, Copy, Debug)]
pub struct ChannelStats<'t> {
    /// `(N, d)` location means.
    pub mu: Var<'t>,
    /// `(N, d)`, `sqrt(var + eps)`.
    pub sigma: Var<'t>,
    pub eps: f64,
}

impl<'t> ChannelStats<'t> {
    pub fn compute(x: Var<'t>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be >= 0, got {eps}"
            )));
        }
        let (mu, var) = reduce_stats(x)?;
        let sigma = var.add_scalar(eps).sqrt()?;
        Ok(Self { mu, sigma, eps })
    }

    /// `(x - mu) / sigma`, broadcast over locations.
    fn standardize(&self, x: Var<'t>) -> Result<Var<'t>> {
        let l = x.shape()[1];
        x.sub(self.mu.expand_locations(l)?)?
            .div(self.sigma.expand_locations(l)?)
    }
}

/// Style donor index for every instance of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchAssignment(Vec<usize>);

impl MatchAssignment {
    /// Every instance paired with itself.
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::InvalidArgument(format!(
                "match index {bad} out of range for batch of {n}"
            )));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pairs each instance with the batchmate whose channel-mean vector is
/// farthest away in Euclidean distance. Ties go to the lowest index; a batch
/// of one is paired with itself.
pub fn max_deviance_match(mu: &Tensor) -> Result<MatchAssignment> {
    let &[n, _] = mu.shape() else {
        return Err(Error::InvalidTensor(format!(
            "max_deviance_match expects (N, d) means, got {:?}",
            mu.shape()
        )));
    };
    if n == 1 {
        return Ok(MatchAssignment(vec![0]));
    }
    let dist = |i: usize, j: usize| -> f64 {
        mu.row(i)
            .iter()
            .zip(mu.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let matches = (0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for j in (0..n).filter(|&j| j != i) {
                let d = dist(i, j);
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j).unwrap()
        })
        .collect();
    Ok(MatchAssignment(matches))
}

/// How the donor's scale enters the MAIN re-styling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StyleScale {
    /// `x̄ / σ_donor + μ_donor`, as the method defines it.
    #[default]
    Divide,
    /// Classical AdaIN, `x̄ · σ_donor + μ_donor`.
    Multiply,
}

/// How style donors are chosen in [`dymain_forward`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pairing {
    /// Max-deviance pairing within the batch.
    #[default]
    MaxDeviance,
    /// Every instance is its own donor, so outputs do not depend on
    /// batchmates.
    SelfOnly,
}

/// Learnable DyMAIN parameters of one normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct DyMainParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub alpha: Tensor,
    pub eps: f64,
}

impl DyMainParams {
    /// `gamma = 1`, `beta = 0`, `alpha = 0.5`.
    pub fn init(channels: usize) -> Self {
        Self {
            gamma: Tensor::vector(vec![1.0; channels]),
            beta: Tensor::vector(vec![0.0; channels]),
            alpha: Tensor::vector(vec![0.5; channels]),
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// DyMAIN parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DyMainVars<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    pub alpha: Var<'t>,
    pub eps: f64,
}

impl<'t> DyMainVars<'t> {
    pub fn leaves(tape: &'t crate::autodiff::Tape, params: &DyMainParams) -> Self {
        Self {
            gamma: tape.leaf(params.gamma.clone()),
            beta: tape.leaf(params.beta.clone()),
            alpha: tape.leaf(params.alpha.clone()),
            eps: params.eps,
        }
    }

    fn check_channels(&self, x: &[usize]) -> Result<()> {
        let d = *x.last().unwrap_or(&0);
        for v in [self.gamma, self.beta, self.alpha] {
            let s = v.shape();
            if s != [d] {
                return Err(Error::ShapeMismatch {
                    op: "dymain",
                    lhs: x.to_vec(),
                    rhs: s,
                });
            }
        }
        Ok(())
    }
}

/// `(x - mu) / sqrt(var + eps)` per instance and channel.
pub fn instance_norm<'t>(x: Var<'t>, eps: f64) -> Result<Var<'t>> {
    ChannelStats::compute(x, eps)?.standardize(x)
}

/// Re-styles every instance with its donor's statistics:
/// `(x̄ / σ_donor + μ_donor) · γ + β` (or `x̄ · σ_donor` under
/// [`StyleScale::Multiply`]). Gradients reach both the content and the donor
/// statistics; the pairing itself is a constant.
pub fn main_normalize<'t>(
    x: Var<'t>,
    stats: &ChannelStats<'t>,
    pairing: &MatchAssignment,
    gamma: Var<'t>,
    beta: Var<'t>,
    scale: StyleScale,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || pairing.len() != shape[0] {
        return Err(Error::InvalidArgument(format!(
            "pairing of {} instances for feature map {shape:?}",
            pairing.len()
        )));
    }
    let l = shape[1];
    let xbar = stats.standardize(x)?;
    let donor_mu = stats.mu.gather_rows(pairing.indices().to_vec())?;
    let donor_sigma = stats.sigma.gather_rows(pairing.indices().to_vec())?;
    let sigma = donor_sigma.expand_locations(l)?;
    let restyled = match scale {
        StyleScale::Divide => xbar.div(sigma)?,
        StyleScale::Multiply => xbar.mul(sigma)?,
    };
    restyled
        .add(donor_mu.expand_locations(l)?)?
        .mul(gamma)?
        .add(beta)
}

/// Options for [`dymain_forward`] that are not learnable.
#[derive(Clone, Copy, Debug, Default)]
pub struct DyMainOptions {
    pub scale: StyleScale,
    pub pairing: Pairing,
}

/// `α · MAIN(x) + (1 − α) · (IN(x) · γ + β)` per channel. Both terms share the
/// same affine `γ, β`.
pub fn dymain_forward<'t>(
    x: Var<'t>,
    params: &DyMainVars<'t>,
    options: DyMainOptions,
) -> Result<Var<'t>> {
    let parts = dymain_parts(x, params, options)?;
    params
        .alpha
        .mul(parts.main)?
        .add(params.alpha.one_minus().mul(parts.plain)?)
}

/// The two endpoint outputs that DyMAIN blends.
pub struct DyMainParts<'t> {
    pub main: Var<'t>,
    pub plain: Var<'t>,
    pub pairing: MatchAssignment,
}

pub fn dymain_parts<'t>(
    x: Var<'t>,
    params: &DyMainVars<'t>,
    options: DyMainOptions,
) -> Result<DyMainParts<'t>> {
    params.check_channels(&x.shape())?;
    let stats = ChannelStats::compute(x, params.eps)?;
    let pairing = match options.pairing {
        Pairing::MaxDeviance => stats.mu.with_value(max_deviance_match)?,
        Pairing::SelfOnly => MatchAssignment::identity(x.shape()[0]),
    };
    let main = main_normalize(
        x,
        &stats,
        &pairing,
        params.gamma,
        params.beta,
        options.scale,
    )?;
    let plain = stats.standardize(x)?.mul(params.gamma)?.add(params.beta)?;
    Ok(DyMainParts {
        main,
        plain,
        pairing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn fm(n: usize, l: usize, d: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![n, l, d], data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn vars<'t>(
        tape: &'t Tape,
        gamma: f64,
        beta: f64,
        alpha: f64,
        d: usize,
        eps: f64,
    ) -> DyMainVars<'t> {
        DyMainVars {
            gamma: tape.leaf(Tensor::vector(vec![gamma; d])),
            beta: tape.leaf(Tensor::vector(vec![beta; d])),
            alpha: tape.leaf(Tensor::vector(vec![alpha; d])),
            eps,
        }
    }

    #[test]
    fn instance_norm_two_points() {
        let tape = Tape::new();
        let out = instance_norm(tape.constant(fm(1, 2, 1, &[1., 3.])), 0.0).unwrap();
        assert_eq!(out.value().data(), &[-1., 1.]);
    }

    #[test]
    fn instance_norm_constant_input_is_zero() {
        let tape = Tape::new();
        let x = Tensor::full(vec![2, 4, 3], 5.0).unwrap();
        let out = instance_norm(tape.constant(x), DEFAULT_EPS).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_three_points() {
        let tape = Tape::new();
        let out = instance_norm(tape.constant(fm(1, 3, 1, &[0., 2., 4.])), 0.0).unwrap();
        // (x - 2) / sqrt(8/3)
        assert!(close(out.value().data(), &[-1.2247, 0.0, 1.2247], 1e-4));
    }

    #[test]
    fn matching_examples() {
        let mu = Tensor::from_rows(&[vec![0.], vec![1.], vec![5.]]).unwrap();
        assert_eq!(max_deviance_match(&mu).unwrap().indices(), &[2, 2, 0]);

        let single = Tensor::from_rows(&[vec![3., 4.]]).unwrap();
        assert_eq!(max_deviance_match(&single).unwrap().indices(), &[0]);

        let ties = Tensor::from_rows(&[vec![0.], vec![0.], vec![0.]]).unwrap();
        assert_eq!(max_deviance_match(&ties).unwrap().indices(), &[1, 0, 0]);
    }

    #[test]
    fn main_self_match_restores_input() {
        let tape = Tape::new();
        let x = tape.constant(fm(1, 2, 1, &[1., 3.]));
        let p = vars(&tape, 1.0, 0.0, 1.0, 1, 0.0);
        let stats = ChannelStats::compute(x, 0.0).unwrap();
        let pairing = MatchAssignment::identity(1);
        let out = main_normalize(x, &stats, &pairing, p.gamma, p.beta, StyleScale::Divide).unwrap();
        assert_eq!(out.value().data(), &[1., 3.]);
    }

    #[test]
    fn main_affine_collapse() {
        let tape = Tape::new();
        let x = tape.constant(fm(
            2,
            3,
            2,
            &[0.3, 1., -2., 4., 5., 0.1, 7., 7.5, -1., 2., 0., 9.],
        ));
        let p = vars(&tape, 0.0, 7.0, 1.0, 2, DEFAULT_EPS);
        let stats = ChannelStats::compute(x, p.eps).unwrap();
        let pairing = stats.mu.with_value(max_deviance_match).unwrap();
        let out = main_normalize(x, &stats, &pairing, p.gamma, p.beta, StyleScale::Divide).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn main_two_instance_example() {
        let tape = Tape::new();
        let x = tape.constant(fm(2, 2, 1, &[0., 2., 10., 14.]));
        let p = vars(&tape, 1.0, 0.0, 1.0, 1, 0.0);
        let stats = ChannelStats::compute(x, 0.0).unwrap();
        let pairing = stats.mu.with_value(max_deviance_match).unwrap();
        assert_eq!(pairing.indices(), &[1, 0]);
        let out = main_normalize(x, &stats, &pairing, p.gamma, p.beta, StyleScale::Divide).unwrap();
        assert!(close(out.value().data(), &[11.5, 12.5, 0., 2.], 1e-12));
    }

    #[test]
    fn adain_multiply_variant() {
        let tape = Tape::new();
        let x = tape.constant(fm(2, 2, 1, &[0., 2., 10., 14.]));
        let p = vars(&tape, 1.0, 0.0, 1.0, 1, 0.0);
        let stats = ChannelStats::compute(x, 0.0).unwrap();
        let pairing = MatchAssignment::new(vec![1, 0]).unwrap();
        let out =
            main_normalize(x, &stats, &pairing, p.gamma, p.beta, StyleScale::Multiply).unwrap();
        // x̄1 = [-1, 1] * 2 + 12, x̄2 = [-1, 1] * 1 + 1
        assert!(close(out.value().data(), &[10., 14., 0., 2.], 1e-12));
    }

    #[test]
    fn dymain_endpoints() {
        let data = [0., 2., 10., 14.];
        let tape = Tape::new();
        let x = tape.constant(fm(2, 2, 1, &data));

        let p0 = vars(&tape, 1.0, 0.0, 0.0, 1, 0.0);
        let out0 = dymain_forward(x, &p0, DyMainOptions::default()).unwrap();
        assert_eq!(out0.value(), instance_norm(x, 0.0).unwrap().value());

        let p1 = vars(&tape, 1.0, 0.0, 1.0, 1, 0.0);
        let out1 = dymain_forward(x, &p1, DyMainOptions::default()).unwrap();
        assert_eq!(out1.value().data(), &[11.5, 12.5, 0., 2.]);

        let ph = vars(&tape, 1.0, 0.0, 0.5, 1, 0.0);
        let half = dymain_forward(x, &ph, DyMainOptions::default()).unwrap();
        let mid: Vec<f64> = out0
            .value()
            .data()
            .iter()
            .zip(out1.value().data())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        assert!(close(half.value().data(), &mid, 1e-12));
    }

    #[test]
    fn single_instance_batch_uses_self_pairing() {
        let tape = Tape::new();
        let x = tape.constant(fm(1, 3, 2, &[1., 2., 3., 5., 8., 13.]));
        let p = vars(&tape, 1.0, 0.0, 0.5, 2, DEFAULT_EPS);
        let parts = dymain_parts(x, &p, DyMainOptions::default()).unwrap();
        assert_eq!(parts.pairing.indices(), &[0]);
        assert!(parts.main.value().is_finite());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(fm(1, 2, 2, &[1., 2., 3., 4.]));
        let p = vars(&tape, 1.0, 0.0, 0.5, 3, DEFAULT_EPS);
        assert!(matches!(
            dymain_forward(x, &p, DyMainOptions::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
