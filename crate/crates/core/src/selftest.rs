//! Invariant suite behind the `selftest` command.
//!
//! Every check draws its own seeded random instances, compares a fast path
//! against a closed form, a reduction, an oracle from [`crate::oracles`] or
//! central finite differences, and reports one [`CheckOutcome`].
//!
//! Gradient instances are rejected and redrawn whenever a discrete choice
//! (hardest example, largest component, style donor, hinge) is within a
//! small gap of flipping, so a finite-difference probe never crosses a kink.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, SampleLabel};
use crate::gradcheck::{finite_difference_gradient, relative_error, DEFAULT_STEP};
use crate::losses::{
    batch_hard_triplet, cross_entropy_logits, dcml_loss, total_loss, DcmlMetric, LossConfig,
    DEFAULT_MARGIN,
};
use crate::model::{build_branched_model, Mode, ModelConfig};
use crate::normalization::{
    dymain_forward, instance_norm, main_normalize, max_deviance_match, ChannelStats, DyMainOptions,
    DyMainVars, DEFAULT_EPS,
};
use crate::oracles::{brute_force_match, dcml_double_loop, map_via_oracle, triplet_exhaustive};
use crate::schedules::{
    derive_branch_schedule, dump_schedules, pmoc_lr_at, BranchScheduleSpec, MainScheduleSpec,
};
use crate::tensor::Tensor;

/// Result of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_result(name: &'static str, result: Result<String>) -> Self {
        match result {
            Ok(detail) => Self {
                name,
                passed: true,
                detail,
            },
            Err(e) => Self {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

/// Relative tolerance of the gradient checks.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Instances per gradient check.
pub const GRADIENT_INSTANCES: usize = 20;
/// Minimum gap kept between competing discrete choices.
const TIE_GAP: f64 = 1e-3;
const MAX_DRAWS: usize = 10_000;

fn fail(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

fn normal_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .expect("positive extents")
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `true` when the two largest values are at least `gap` apart (or there is
/// only one value).
fn clear_winner(mut values: Vec<f64>, gap: f64) -> bool {
    values.sort_by(|a, b| b.total_cmp(a));
    values.len() < 2 || values[0] - values[1] >= gap
}

/// Labels with `ids` identities and `per_id` instances each, shuffled.
fn balanced_labels(rng: &mut StdRng, ids: usize, per_id: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..ids)
        .flat_map(|i| std::iter::repeat_n(i, per_id))
        .collect();
    labels.shuffle(rng);
    labels
}

/// Whether batch-hard mining and the hinge are unambiguous for `x`.
fn triplet_tie_free(x: &Tensor, labels: &[usize], margin: f64) -> bool {
    let rows: Vec<&[f64]> = x.rows().collect();
    for a in 0..rows.len() {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in (0..rows.len()).filter(|&j| j != a) {
            let d = euclid(rows[a], rows[j]);
            if d < TIE_GAP {
                return false;
            }
            if labels[j] == labels[a] {
                pos.push(d);
            } else {
                neg.push(-d);
            }
        }
        let d_ap = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let d_an = -neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !clear_winner(pos, TIE_GAP) || !clear_winner(neg, TIE_GAP) {
            return false;
        }
        if (d_ap - d_an + margin).abs() < TIE_GAP {
            return false;
        }
    }
    true
}

/// Whether the DCML distance of every sample and branch pair is smooth.
fn dcml_tie_free(branches: &[Tensor], metric: DcmlMetric) -> bool {
    let n = branches[0].shape()[0];
    for s in 0..n {
        for a in 0..branches.len() {
            for b in a + 1..branches.len() {
                let diffs: Vec<f64> = branches[a]
                    .row(s)
                    .iter()
                    .zip(branches[b].row(s))
                    .map(|(x, y)| (x - y).abs())
                    .collect();
                let ok = match metric {
                    DcmlMetric::Chebyshev => clear_winner(diffs.clone(), TIE_GAP),
                    DcmlMetric::Manhattan => diffs.iter().all(|&d| d >= TIE_GAP),
                    DcmlMetric::Euclidean => diffs.iter().map(|d| d * d).sum::<f64>() >= TIE_GAP,
                };
                if !ok || diffs.iter().copied().fold(0.0, f64::max) < TIE_GAP {
                    return false;
                }
            }
        }
    }
    true
}

/// Whether every instance's farthest partner (by channel means) is clear.
fn match_tie_free(x: &Tensor) -> bool {
    let tape = Tape::new();
    let stats = match ChannelStats::compute(tape.constant(x.clone()), DEFAULT_EPS) {
        Ok(s) => s.mu.value(),
        Err(_) => return false,
    };
    let rows: Vec<&[f64]> = stats.rows().collect();
    (0..rows.len()).all(|i| {
        let d: Vec<f64> = (0..rows.len())
            .filter(|&j| j != i)
            .map(|j| euclid(rows[i], rows[j]))
            .collect();
        clear_winner(d, TIE_GAP)
    })
}

/// Compares reverse-mode and central-difference gradients of `build` with
/// respect to every tensor in `inputs`, as one concatenated vector.
pub fn gradient_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = loss.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.get(vars[i]).data());
        let fd = finite_difference_gradient(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.leaf(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                build(&tape, &vars)?.item()
            },
            input,
            DEFAULT_STEP,
        )?;
        numeric.extend_from_slice(fd.data());
    }
    Ok(relative_error(&analytic, &numeric))
}

fn gradient_check<G, F>(seed: u64, mut draw: G, build: F) -> Result<String>
where
    G: FnMut(&mut StdRng) -> Option<(Vec<Tensor>, Vec<usize>)>,
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[usize]) -> Result<Var<'t>>,
{
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..GRADIENT_INSTANCES {
        let (inputs, labels) = (0..MAX_DRAWS)
            .find_map(|_| draw(&mut rng))
            .ok_or_else(|| fail(format!("instance {instance}: no tie-free draw")))?;
        let err = gradient_error(&inputs, |tape, vars| build(tape, vars, &labels))?;
        if !(err < GRADIENT_TOLERANCE) {
            return Err(fail(format!(
                "instance {instance}: relative error {err:.3e} >= {GRADIENT_TOLERANCE:e}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(format!(
        "{GRADIENT_INSTANCES} instances, max rel err {worst:.2e}"
    ))
}

/// DyMAIN output pushed through a fixed smooth readout, gradients with
/// respect to the input, `γ`, `β` and `α`.
pub fn check_gradient_dymain(seed: u64) -> CheckOutcome {
    let result = gradient_check(
        seed,
        |rng| {
            let (n, l, d) = (
                rng.random_range(2..=6),
                rng.random_range(2..=4),
                rng.random_range(1..=8),
            );
            let x = normal_tensor(rng, vec![n, l, d]);
            if !match_tie_free(&x) {
                return None;
            }
            let gamma = Tensor::vector((0..d).map(|_| rng.random_range(0.5..1.5)).collect());
            let beta = normal_tensor(rng, vec![d]);
            let alpha = Tensor::vector((0..d).map(|_| rng.random_range(0.0..1.0)).collect());
            let readout = normal_tensor(rng, vec![n, l, d]);
            Some((vec![x, gamma, beta, alpha, readout], Vec::new()))
        },
        |_, v, _| {
            let params = DyMainVars {
                gamma: v[1],
                beta: v[2],
                alpha: v[3],
                eps: DEFAULT_EPS,
            };
            let out = dymain_forward(v[0], &params, DyMainOptions::default())?;
            out.mul(v[4])?.sum().add(out.square().mean().scale(0.5))
        },
    );
    CheckOutcome::from_result("gradient: DyMAIN composite", result)
}

pub fn check_gradient_dcml(seed: u64) -> CheckOutcome {
    let result = gradient_check(
        seed,
        |rng| {
            let (k, n, d) = (
                rng.random_range(2..=3),
                rng.random_range(1..=6),
                rng.random_range(1..=8),
            );
            let feats: Vec<Tensor> = (0..k).map(|_| normal_tensor(rng, vec![n, d])).collect();
            dcml_tie_free(&feats, DcmlMetric::Chebyshev).then_some((feats, Vec::new()))
        },
        |_, v, _| dcml_loss(v, DcmlMetric::Chebyshev),
    );
    CheckOutcome::from_result("gradient: DCML", result)
}

pub fn check_gradient_cross_entropy(seed: u64) -> CheckOutcome {
    let result = gradient_check(
        seed,
        |rng| {
            let (n, d, c) = (
                rng.random_range(1..=6),
                rng.random_range(1..=8),
                rng.random_range(2..=5),
            );
            let feats = normal_tensor(rng, vec![n, d]);
            let classifier = normal_tensor(rng, vec![c, d]);
            let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
            Some((vec![feats, classifier], labels))
        },
        |_, v, labels| cross_entropy_logits(v[0].matmul(v[1].transpose()?)?, labels),
    );
    CheckOutcome::from_result("gradient: cross-entropy", result)
}

pub fn check_gradient_triplet(seed: u64) -> CheckOutcome {
    let result = gradient_check(
        seed,
        |rng| {
            let ids = rng.random_range(2..=3);
            let labels = balanced_labels(rng, ids, 2);
            let d = rng.random_range(1..=8);
            let x = normal_tensor(rng, vec![labels.len(), d]);
            triplet_tie_free(&x, &labels, DEFAULT_MARGIN).then_some((vec![x], labels))
        },
        |_, v, labels| batch_hard_triplet(v[0], labels, DEFAULT_MARGIN),
    );
    CheckOutcome::from_result("gradient: batch-hard triplet", result)
}

/// The weighted sum of all three terms over `k` branches, with branch
/// features and classifiers as inputs.
pub fn check_gradient_total(seed: u64) -> CheckOutcome {
    let result = gradient_check(
        seed,
        |rng| {
            let k = rng.random_range(2..=3);
            let ids = rng.random_range(2..=3);
            let labels = balanced_labels(rng, ids, 2);
            let (n, d) = (labels.len(), rng.random_range(2..=8));
            let feats: Vec<Tensor> = (0..k).map(|_| normal_tensor(rng, vec![n, d])).collect();
            if !dcml_tie_free(&feats, DcmlMetric::Chebyshev)
                || !feats
                    .iter()
                    .all(|f| triplet_tie_free(f, &labels, DEFAULT_MARGIN))
            {
                return None;
            }
            let mut inputs = feats;
            inputs.extend((0..k).map(|_| normal_tensor(rng, vec![ids, d])));
            Some((inputs, labels))
        },
        |_, v, labels| {
            let k = v.len() / 2;
            let logits = (0..k)
                .map(|b| v[b].matmul(v[k + b].transpose()?))
                .collect::<Result<Vec<_>>>()?;
            let config = LossConfig {
                weights: crate::losses::LossWeights {
                    ce: 1.0,
                    triplet: 1.0,
                    dcml: 0.5,
                },
                ..LossConfig::default()
            };
            Ok(total_loss(&v[..k], &logits, labels, &config)?.total)
        },
    );
    CheckOutcome::from_result("gradient: weighted total loss", result)
}

/// `α = 0, γ = 1, β = 0` reduces to plain IN; `α = 1` reduces to MAIN; and
/// the output is affine in `α`.
pub fn check_normalization_reductions(seed: u64, instances: usize) -> CheckOutcome {
    let run = || -> Result<String> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for instance in 0..instances {
            let (n, l, d) = (
                rng.random_range(1..=6),
                rng.random_range(1..=4),
                rng.random_range(1..=8),
            );
            let x = normal_tensor(&mut rng, vec![n, l, d]);
            let gamma = normal_tensor(&mut rng, vec![d]);
            let beta = normal_tensor(&mut rng, vec![d]);
            let alpha = normal_tensor(&mut rng, vec![d]);
            let tape = Tape::new();
            let xv = tape.constant(x);
            let with = |g: &Tensor, b: &Tensor, a: &Tensor| -> Result<Tensor> {
                let params = DyMainVars {
                    gamma: tape.constant(g.clone()),
                    beta: tape.constant(b.clone()),
                    alpha: tape.constant(a.clone()),
                    eps: DEFAULT_EPS,
                };
                Ok(dymain_forward(xv, &params, DyMainOptions::default())?.value())
            };
            let zeros = Tensor::zeros(vec![d])?;
            let ones = Tensor::full(vec![d], 1.0)?;

            let plain = with(&ones, &zeros, &zeros)?;
            let reference = instance_norm(xv, DEFAULT_EPS)?.value();
            let e1 = plain.max_abs_diff(&reference);

            let main = with(&gamma, &beta, &ones)?;
            let stats = ChannelStats::compute(xv, DEFAULT_EPS)?;
            let pairing = max_deviance_match(&stats.mu.value())?;
            let reference = main_normalize(
                xv,
                &stats,
                &pairing,
                tape.constant(gamma.clone()),
                tape.constant(beta.clone()),
                Default::default(),
            )?
            .value();
            let e2 = main.max_abs_diff(&reference);

            let blended = with(&gamma, &beta, &alpha)?;
            let at0 = with(&gamma, &beta, &zeros)?;
            let mut e3: f64 = 0.0;
            for (idx, v) in blended.data().iter().enumerate() {
                let c = idx % d;
                let a = alpha.data()[c];
                let expect = a * main.data()[idx] + (1.0 - a) * at0.data()[idx];
                e3 = e3.max((v - expect).abs());
            }
            let err = e1.max(e2).max(e3);
            if !(err <= 1e-12) {
                return Err(fail(format!(
                    "instance {instance}: IN {e1:.2e}, MAIN {e2:.2e}, linearity {e3:.2e}"
                )));
            }
            worst = worst.max(err);
        }
        Ok(format!("{instances} instances, max abs err {worst:.1e}"))
    };
    CheckOutcome::from_result("normalization reductions", run())
}

pub fn check_match_oracle(seed: u64, instances: usize) -> CheckOutcome {
    let run = || -> Result<String> {
        let mut rng = StdRng::seed_from_u64(seed);
        for instance in 0..instances {
            let (n, d) = (rng.random_range(1..=16), rng.random_range(1..=8));
            let mu = normal_tensor(&mut rng, vec![n, d]);
            let fast = max_deviance_match(&mu)?;
            let slow = brute_force_match(&mu)?;
            if fast.indices() != slow.as_slice() {
                return Err(fail(format!(
                    "instance {instance}: {:?} vs brute force {slow:?}",
                    fast.indices()
                )));
            }
        }
        Ok(format!("{instances} instances agree"))
    };
    CheckOutcome::from_result("oracle: max-deviance matching", run())
}

/// The name the negative-control test looks for.
pub const DCML_ORACLE_CHECK: &str = "oracle: DCML double loop";

pub fn check_dcml_oracle(seed: u64, instances: usize) -> CheckOutcome {
    let run = || -> Result<String> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for instance in 0..instances {
            let (k, n, d) = (
                rng.random_range(2..=7),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let feats: Vec<Tensor> = (0..k)
                .map(|_| normal_tensor(&mut rng, vec![n, d]))
                .collect();
            for metric in [
                DcmlMetric::Chebyshev,
                DcmlMetric::Manhattan,
                DcmlMetric::Euclidean,
            ] {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = feats.iter().map(|f| tape.constant(f.clone())).collect();
                let fast = dcml_loss(&vars, metric)?.item()?;
                let slow = dcml_double_loop(&feats, metric)?;
                let err = (fast - slow).abs();
                if !(err <= 1e-12) {
                    return Err(fail(format!(
                        "instance {instance} ({}): {fast} vs double loop {slow}",
                        metric.name()
                    )));
                }
                worst = worst.max(err);
            }
        }
        Ok(format!(
            "{instances} instances × 3 metrics, max abs err {worst:.1e}"
        ))
    };
    CheckOutcome::from_result(DCML_ORACLE_CHECK, run())
}

pub fn check_retrieval_oracle(seed: u64, instances: usize) -> CheckOutcome {
    let run = || -> Result<String> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < instances {
            let ids = rng.random_range(2..=5);
            let domains = rng.random_range(2..=3);
            let d = rng.random_range(1..=8);
            let ng = rng.random_range(2..=20);
            let nq = rng.random_range(1..=8);
            let label = |rng: &mut StdRng| SampleLabel {
                id: rng.random_range(0..ids),
                domain: rng.random_range(0..domains),
            };
            let gl: Vec<SampleLabel> = (0..ng).map(|_| label(&mut rng)).collect();
            let ql: Vec<SampleLabel> = (0..nq).map(|_| label(&mut rng)).collect();
            let valid = ql
                .iter()
                .all(|q| gl.iter().any(|g| g.id == q.id && g.domain != q.domain));
            if !valid {
                continue;
            }
            let g = normal_tensor(&mut rng, vec![ng, d]);
            let q = normal_tensor(&mut rng, vec![nq, d]);
            let fast = evaluate_retrieval(&q, &ql, &g, &gl)?;
            let slow = map_via_oracle(&q, &ql, &g, &gl)?;
            let err = (fast.map - slow).abs();
            if !(err <= 1e-12) {
                return Err(fail(format!(
                    "instance {done}: mAP {} vs oracle {slow}",
                    fast.map
                )));
            }
            worst = worst.max(err);
            done += 1;
        }
        Ok(format!("{instances} instances, max abs err {worst:.1e}"))
    };
    CheckOutcome::from_result("oracle: retrieval mAP", run())
}

pub fn check_triplet_oracle(seed: u64, instances: usize) -> CheckOutcome {
    let run = || -> Result<String> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for instance in 0..instances {
            let n = rng.random_range(4..=8);
            let ids = rng.random_range(2..=n / 2);
            // every identity gets at least two instances
            let mut labels: Vec<usize> = (0..ids).flat_map(|i| [i, i]).collect();
            while labels.len() < n {
                labels.push(rng.random_range(0..ids));
            }
            let d = rng.random_range(1..=8);
            let x = normal_tensor(&mut rng, vec![n, d]);
            let margin = rng.random_range(0.0..1.0);
            let tape = Tape::new();
            let fast = batch_hard_triplet(tape.constant(x.clone()), &labels, margin)?.item()?;
            let slow = triplet_exhaustive(&x, &labels, margin)?;
            let err = (fast - slow).abs();
            if !(err <= 1e-12) {
                return Err(fail(format!(
                    "instance {instance}: {fast} vs exhaustive {slow}"
                )));
            }
            worst = worst.max(err);
        }
        Ok(format!("{instances} batches, max abs err {worst:.1e}"))
    };
    CheckOutcome::from_result("oracle: batch-hard triplet", run())
}

/// Cycle counts and base rates of the full-size PMoC setting, plus the
/// closed-form values at a cycle boundary and a half cycle.
pub fn check_schedule_closed_forms() -> CheckOutcome {
    let run = || -> Result<String> {
        let periods = [120, 60, 30, 24, 20, 15, 12];
        let specs: Vec<BranchScheduleSpec> = periods
            .iter()
            .map(|&period| BranchScheduleSpec {
                total_epochs: 120,
                period,
                eta_min: 0.004,
                gamma_pow: 1.806,
                lambda_decay: 0.5,
            })
            .collect();
        let derived = specs
            .iter()
            .map(derive_branch_schedule)
            .collect::<Result<Vec<_>>>()?;
        let cycles: Vec<usize> = derived.iter().map(|d| d.cycles).collect();
        if cycles != [1, 2, 4, 5, 6, 8, 10] {
            return Err(fail(format!("cycle counts {cycles:?}")));
        }
        for d in &derived {
            let decay = d.per_cycle_decay.powi(d.cycles as i32);
            if (decay - 0.5).abs() > 1e-12 {
                return Err(fail(format!("total decay {decay} for c = {}", d.cycles)));
            }
        }
        let main = MainScheduleSpec {
            eta: 0.004,
            warmup_epochs: 10,
            warmup_start_frac: 0.01,
            floor_frac: 0.002,
            total_epochs: 120,
        };
        let table = dump_schedules(&specs, &main)?;
        let global = table
            .column_max()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        if (global - 0.2559).abs() > 0.001 {
            return Err(fail(format!("global max rate {global}")));
        }
        let p12 = &specs[6];
        let at12 = pmoc_lr_at(p12, 12)?;
        let at6 = pmoc_lr_at(p12, 6)?;
        if (at12 - 0.23876).abs() > 1e-4 || (at6 - 0.12794).abs() > 1e-4 {
            return Err(fail(format!(
                "p = 12 rates: epoch 12 → {at12}, epoch 6 → {at6}"
            )));
        }
        Ok(format!("cycles {cycles:?}, max rate {global:.6}"))
    };
    CheckOutcome::from_result("schedule closed forms", run())
}

/// A fresh model's branches are exact clones: equal features, zero DCML.
pub fn check_clone_symmetry(seed: u64) -> CheckOutcome {
    let run = || -> Result<String> {
        let config = ModelConfig {
            branches: 3,
            ..ModelConfig::default()
        };
        let model = build_branched_model(config.clone(), seed)?;
        let mut rng = StdRng::seed_from_u64(seed);
        let tokens = normal_tensor(&mut rng, vec![6, config.tokens, config.input_dim]);
        for mode in [Mode::Train, Mode::Eval] {
            let out = model.forward_all_branches(&tokens, mode, Default::default())?;
            let first: Vec<u64> = out.per_branch_features[0]
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            for (b, f) in out.per_branch_features.iter().enumerate().skip(1) {
                let bits: Vec<u64> = f.data().iter().map(|v| v.to_bits()).collect();
                if bits != first {
                    return Err(fail(format!("{mode:?}: branch {b} differs from branch 0")));
                }
            }
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = out
                .per_branch_features
                .iter()
                .map(|f| tape.constant(f.clone()))
                .collect();
            let dcml = dcml_loss(&vars, DcmlMetric::Chebyshev)?.item()?;
            if dcml != 0.0 {
                return Err(fail(format!("{mode:?}: DCML {dcml}")));
            }
        }
        Ok("3 branches bit-equal, DCML = 0".into())
    };
    CheckOutcome::from_result("clone symmetry", run())
}

/// Every check, with fixed seeds.
pub fn run_selftest() -> Vec<CheckOutcome> {
    vec![
        check_schedule_closed_forms(),
        check_normalization_reductions(11, 100),
        check_gradient_dymain(21),
        check_gradient_dcml(22),
        check_gradient_cross_entropy(23),
        check_gradient_triplet(24),
        check_gradient_total(25),
        check_match_oracle(31, 100),
        check_dcml_oracle(32, 100),
        check_retrieval_oracle(33, 200),
        check_triplet_oracle(34, 500),
        check_clone_symmetry(41),
    ]
}

/// Aligned pass/fail table.
pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for o in outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{status}  {:<width$}  {}\n", o.name, o.detail));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let outcomes = run_selftest();
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
        assert!(failed.is_empty(), "{}", format_table(&outcomes));
    }

    #[test]
    fn tie_detection() {
        assert!(clear_winner(vec![1.0, 0.5], 0.1));
        assert!(!clear_winner(vec![1.0, 0.99995], TIE_GAP));
        assert!(clear_winner(vec![3.0], TIE_GAP));
    }
}
