//! Central finite differences, used to cross-check [`crate::autodiff`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `g[i] = (f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} evaluated to {up} / {down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over whole gradient vectors, or the absolute
/// difference norm when both are below `1e-8`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_difference_gradient(
            |x| Ok(x.data()[0] * x.data()[0]),
            &Tensor::vector(vec![3.0]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_sum() {
        let x = Tensor::vector(vec![0.3, -4.0, 12.5, 1e3]);
        let g =
            finite_difference_gradient(|x| Ok(x.data().iter().sum()), &x, DEFAULT_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(vec![0.0]);
        let err = finite_difference_gradient(|x| Ok(1.0 / x.data()[0].abs()), &x, 0.0);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
