//! Per-epoch learning-rate schedules.
//!
//! Branch pathways follow a Phased Mixture-of-Cosines (PMoC) schedule: a
//! branch with period `p` runs `c = ⌊T/p⌋` cosine cycles from a base rate
//! `c^γ · η_min`, and the rate is decayed by `λ^(1/c)` after every cycle, so
//! the final cycle starts at `λ` times the base rate. The main pathway uses
//! linear warmup followed by a single cosine down to a floor.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Inputs of one PMoC branch schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchScheduleSpec {
    pub total_epochs: usize,
    pub period: usize,
    pub eta_min: f64,
    pub gamma_pow: f64,
    pub lambda_decay: f64,
}

/// Quantities derived from a [`BranchScheduleSpec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchScheduleDerived {
    pub cycles: usize,
    pub eta_base: f64,
    pub per_cycle_decay: f64,
}

impl BranchScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchedule(msg));
        if self.period < 1 || self.period > self.total_epochs {
            return bad(format!(
                "period {} must lie in [1, {}]",
                self.period, self.total_epochs
            ));
        }
        if !(self.eta_min > 0.0) || !self.eta_min.is_finite() {
            return bad(format!("eta_min must be positive, got {}", self.eta_min));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return bad(format!(
                "lambda_decay must lie in (0, 1], got {}",
                self.lambda_decay
            ));
        }
        if !(self.gamma_pow >= 0.0) || !self.gamma_pow.is_finite() {
            return bad(format!("gamma_pow must be >= 0, got {}", self.gamma_pow));
        }
        Ok(())
    }

    pub fn derive(&self) -> Result<BranchScheduleDerived> {
        derive_branch_schedule(self)
    }
}

pub fn derive_branch_schedule(spec: &BranchScheduleSpec) -> Result<BranchScheduleDerived> {
    spec.validate()?;
    let cycles = spec.total_epochs / spec.period;
    Ok(BranchScheduleDerived {
        cycles,
        eta_base: (cycles as f64).powf(spec.gamma_pow) * spec.eta_min,
        per_cycle_decay: spec.lambda_decay.powf(1.0 / cycles as f64),
    })
}

fn check_epoch(epoch: usize, total: usize) -> Result<()> {
    if epoch >= total {
        Err(Error::EpochOutOfRange { epoch, total })
    } else {
        Ok(())
    }
}

/// Learning rate of a PMoC branch at `epoch`.
///
/// Within a cycle the rate anneals from the cycle's start rate toward zero.
/// When `T` is not a multiple of the period, the trailing partial cycle is
/// the same cosine truncated at `T`.
pub fn pmoc_lr_at(spec: &BranchScheduleSpec, epoch: usize) -> Result<f64> {
    let derived = derive_branch_schedule(spec)?;
    check_epoch(epoch, spec.total_epochs)?;
    let cycle = epoch / spec.period;
    let t = epoch % spec.period;
    let decay = derived.per_cycle_decay.powi(cycle as i32);
    Ok(derived.eta_base * decay * cosine_factor(t, spec.period))
}

/// `(1 + cos(π t / span)) / 2`.
fn cosine_factor(t: usize, span: usize) -> f64 {
    (1.0 + (PI * t as f64 / span as f64).cos()) / 2.0
}

/// Inputs of the main-pathway warmup + cosine schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainScheduleSpec {
    pub eta: f64,
    pub warmup_epochs: usize,
    pub warmup_start_frac: f64,
    pub floor_frac: f64,
    pub total_epochs: usize,
}

impl MainScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchedule(msg));
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.warmup_start_frac > 0.0 && self.warmup_start_frac < 1.0) {
            return bad(format!(
                "warmup_start_frac must lie in (0, 1), got {}",
                self.warmup_start_frac
            ));
        }
        if !(self.floor_frac > 0.0 && self.floor_frac < 1.0) {
            return bad(format!(
                "floor_frac must lie in (0, 1), got {}",
                self.floor_frac
            ));
        }
        if self.warmup_epochs >= self.total_epochs {
            return bad(format!(
                "warmup_epochs {} must be below total epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        Ok(())
    }
}

pub fn main_lr_at(spec: &MainScheduleSpec, epoch: usize) -> Result<f64> {
    spec.validate()?;
    check_epoch(epoch, spec.total_epochs)?;
    let eta = spec.eta;
    let w = spec.warmup_epochs;
    if epoch < w {
        let start = spec.warmup_start_frac * eta;
        return Ok(start + (eta - start) * epoch as f64 / w as f64);
    }
    let floor = spec.floor_frac * eta;
    Ok(floor + (eta - floor) * cosine_factor(epoch - w, spec.total_epochs - w))
}

/// Per-epoch learning rates of the main pathway and every branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleTable {
    /// One row per epoch: `[main, branch1, ..., branchK]`.
    pub rows: Vec<Vec<f64>>,
}

impl ScheduleTable {
    pub fn branches(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len() - 1)
    }

    /// Largest value in each column, main first.
    pub fn column_max(&self) -> Vec<f64> {
        let cols = self.branches() + 1;
        (0..cols)
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// CSV with header `epoch,main,branch1,...,branchK`, LF line endings and
    /// values at 10 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,main");
        for b in 1..=self.branches() {
            write!(out, ",branch{b}").unwrap();
        }
        out.push('\n');
        for (epoch, row) in self.rows.iter().enumerate() {
            write!(out, "{epoch}").unwrap();
            for v in row {
                write!(out, ",{}", format_sig(*v, 10)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Tabulates every schedule over the shared epoch count.
pub fn dump_schedules(
    branch_specs: &[BranchScheduleSpec],
    main_spec: &MainScheduleSpec,
) -> Result<ScheduleTable> {
    let total = main_spec.total_epochs;
    main_spec.validate()?;
    for (b, spec) in branch_specs.iter().enumerate() {
        if spec.total_epochs != total {
            return Err(Error::InvalidSchedule(format!(
                "branch {} has T = {} but the main schedule has T = {total}",
                b + 1,
                spec.total_epochs
            )));
        }
        spec.validate()?;
    }
    let rows = (0..total)
        .map(|epoch| {
            let mut row = vec![main_lr_at(main_spec, epoch)?];
            for spec in branch_specs {
                row.push(pmoc_lr_at(spec, epoch)?);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScheduleTable { rows })
}

/// Formats `x` with `digits` significant digits, switching to exponent
/// notation outside `[1e-4, 10^digits)` (as C's `%.{digits}g`).
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn branch(period: usize) -> BranchScheduleSpec {
        BranchScheduleSpec {
            total_epochs: 120,
            period,
            eta_min: 0.004,
            gamma_pow: 1.806,
            lambda_decay: 0.5,
        }
    }

    fn main_spec() -> MainScheduleSpec {
        MainScheduleSpec {
            eta: 0.004,
            warmup_epochs: 10,
            warmup_start_frac: 0.01,
            floor_frac: 0.002,
            total_epochs: 120,
        }
    }

    #[test]
    fn single_cycle_branch() {
        let d = derive_branch_schedule(&branch(120)).unwrap();
        assert_eq!(d.cycles, 1);
        assert_eq!(d.eta_base, 0.004);
        assert_eq!(d.per_cycle_decay, 0.5);
    }

    #[test]
    fn ten_cycle_branch_matches_reported_range() {
        let d = derive_branch_schedule(&branch(12)).unwrap();
        assert_eq!(d.cycles, 10);
        assert!((d.eta_base - 0.2559).abs() < 1e-3, "{}", d.eta_base);
    }

    #[test]
    fn two_cycle_branch() {
        let d = derive_branch_schedule(&branch(60)).unwrap();
        assert_eq!(d.cycles, 2);
        assert!((d.eta_base - 0.013990).abs() < 1e-5, "{}", d.eta_base);
        assert!((d.per_cycle_decay - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        assert!(derive_branch_schedule(&branch(121)).is_err());
        assert!(derive_branch_schedule(&branch(0)).is_err());
        let mut s = branch(12);
        s.eta_min = 0.0;
        assert!(matches!(
            derive_branch_schedule(&s),
            Err(Error::InvalidSchedule(_))
        ));
        s = branch(12);
        s.lambda_decay = 0.0;
        assert!(derive_branch_schedule(&s).is_err());
        s.lambda_decay = 1.5;
        assert!(derive_branch_schedule(&s).is_err());
        s = branch(12);
        s.gamma_pow = -1.0;
        assert!(derive_branch_schedule(&s).is_err());
    }

    #[test]
    fn pmoc_values() {
        let s = branch(12);
        let base = derive_branch_schedule(&s).unwrap().eta_base;
        assert_eq!(pmoc_lr_at(&s, 0).unwrap(), base);
        // one cycle of decay applied at the start of cycle 1
        assert!((pmoc_lr_at(&s, 12).unwrap() - 0.23876).abs() < 1e-4);
        assert!((pmoc_lr_at(&s, 6).unwrap() - 0.12794).abs() < 1e-4);
        assert!(matches!(
            pmoc_lr_at(&s, 120),
            Err(Error::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn partial_trailing_cycle_is_truncated_cosine() {
        let s = BranchScheduleSpec {
            total_epochs: 10,
            period: 4,
            eta_min: 0.1,
            gamma_pow: 1.0,
            lambda_decay: 0.5,
        };
        let d = derive_branch_schedule(&s).unwrap();
        assert_eq!(d.cycles, 2);
        let lr8 = pmoc_lr_at(&s, 8).unwrap();
        assert!((lr8 - d.eta_base * 0.5).abs() < 1e-15);
        assert!(pmoc_lr_at(&s, 9).unwrap() < lr8);
    }

    #[test]
    fn main_values() {
        let m = main_spec();
        assert!((main_lr_at(&m, 0).unwrap() - 0.01 * 0.004).abs() < 1e-18);
        assert_eq!(main_lr_at(&m, 10).unwrap(), 0.004);
        assert!((main_lr_at(&m, 65).unwrap() - 2.004e-3).abs() < 1e-6);
        assert!(main_lr_at(&m, 119).unwrap() >= 0.002 * 0.004);
        assert!(main_lr_at(&m, 120).is_err());
    }

    #[test]
    fn main_spec_validation() {
        let mut m = main_spec();
        m.warmup_epochs = 120;
        assert!(main_lr_at(&m, 0).is_err());
        m = main_spec();
        m.floor_frac = 1.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn dump_with_seven_periods() {
        let specs: Vec<_> = [120, 60, 30, 24, 20, 15, 12].map(branch).to_vec();
        let table = dump_schedules(&specs, &main_spec()).unwrap();
        assert_eq!(table.rows.len(), 120);
        assert_eq!(table.branches(), 7);
        let maxima = table.column_max();
        for (spec, max) in specs.iter().zip(&maxima[1..]) {
            assert_eq!(*max, spec.derive().unwrap().eta_base);
        }
        let global = maxima.iter().copied().fold(0.0, f64::max);
        assert!((global - 0.2559).abs() < 1e-3);
        assert!(table.rows.iter().all(|r| r.iter().sum::<f64>() > 0.0));
    }

    #[test]
    fn dump_rejects_mismatched_horizons() {
        let mut b = branch(12);
        b.total_epochs = 60;
        assert!(dump_schedules(&[b], &main_spec()).is_err());
    }

    #[test]
    fn csv_layout() {
        let specs = [branch(120), branch(60)];
        let csv = dump_schedules(&specs, &main_spec()).unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,main,branch1,branch2"));
        assert_eq!(lines.next(), Some("0,4e-5,0.004,0.01398685793"));
        assert_eq!(csv.lines().count(), 121);
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn significant_digit_formatting() {
        assert_eq!(format_sig(0.2559049391, 10), "0.2559049391");
        assert_eq!(format_sig(1.0, 10), "1");
        assert_eq!(format_sig(4e-5, 10), "4e-5");
        assert_eq!(format_sig(123456.789, 4), "1.235e5");
        assert_eq!(format_sig(-0.5, 10), "-0.5");
        assert_eq!(format_sig(0.0, 10), "0");
    }
}
