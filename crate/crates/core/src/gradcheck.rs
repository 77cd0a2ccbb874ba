//! Central-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor in the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max_i |g_analytic − g_fd| / max(|g_fd|, 1e-6)
    pub max_rel_error: f64,
    /// Coordinate (index into the checked coordinate list) attaining it.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error between an analytic and a central-difference gradient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(REL_FLOOR))
        .enumerate()
        .fold(
            (0.0, 0),
            |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) },
        )
}

/// Compare `∂f/∂x` from the gradient record against central differences
/// `(f(x + h e_i) − f(x − h e_i)) / 2h` over every coordinate of `x`.
///
/// `f` must build its graph from the tensor it is handed.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let values = x.to_vec();
    let probe = Tensor::leaf(values.clone(), x.shape(), true)?;
    let root = f(&probe)?;
    check_finite(root.item()?, usize::MAX)?;
    root.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| alloc::vec![0.0; values.len()]);

    let mut numeric = Vec::with_capacity(values.len());
    let mut shifted = values.clone();
    for i in 0..values.len() {
        shifted[i] = values[i] + h;
        let plus = f(&Tensor::new(shifted.clone(), x.shape())?)?.item()?;
        check_finite(plus, i)?;
        shifted[i] = values[i] - h;
        let minus = f(&Tensor::new(shifted.clone(), x.shape())?)?.item()?;
        check_finite(minus, i)?;
        shifted[i] = values[i];
        numeric.push((plus - minus) / (2.0 * h));
    }
    let (max_rel_error, worst) = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

/// Check selected coordinates of leaf parameters that `eval` reads from
/// captured state. `eval` rebuilds the graph on every call; the leaves are
/// perturbed in place and restored afterwards.
pub fn finite_diff_check_params<F>(eval: F, coords: &[(Tensor, usize)], h: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (p, _) in coords {
        p.zero_grad();
    }
    let root = eval()?;
    check_finite(root.item()?, usize::MAX)?;
    root.backward()?;
    let analytic: Vec<f64> = coords.iter().map(|(p, i)| p.grad().map_or(0.0, |g| g[*i])).collect();

    let mut numeric = Vec::with_capacity(coords.len());
    for (n, (p, i)) in coords.iter().enumerate() {
        let orig = p.data()[*i];
        p.update_leaf(|d| d[*i] = orig + h)?;
        let plus = eval()?.item()?;
        p.update_leaf(|d| d[*i] = orig - h)?;
        let minus = eval()?.item()?;
        p.update_leaf(|d| d[*i] = orig)?;
        check_finite(plus, n)?;
        check_finite(minus, n)?;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let (max_rel_error, worst) = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

fn check_finite(v: f64, coordinate: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { coordinate, value: v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn sum_of_squares_within_1e6() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::new(rng.uniform_vec(6, -1.0, 1.0), &[6]).unwrap();
        let r = finite_diff_check(|t| Ok(t.square().sum_all()), &x, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        for (a, v) in r.analytic.iter().zip(x.data().iter()) {
            assert!((a - 2.0 * v).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_is_exact() {
        let x = Tensor::new(alloc::vec![0.3, -1.2, 2.0, 0.7], &[4]).unwrap();
        let w = Tensor::new(alloc::vec![1.5, -2.0, 0.25, 3.0], &[4]).unwrap();
        let r = finite_diff_check(|t| Ok(t.mul(&w)?.sum_all().add_scalar(4.0)), &x, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        // log of a value pushed to exactly zero by the probe stays finite
        // thanks to the floor; an explicit division by zero does not.
        let x = Tensor::new(alloc::vec![1.0, 1e-4], &[2]).unwrap();
        let err = finite_diff_check(
            |t| {
                let d = t.to_vec();
                let inv = if d[1] <= 0.0 { f64::INFINITY } else { 1.0 };
                Ok(t.sum_all().mul_scalar(inv))
            },
            &x,
            1e-4,
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                coordinate: 1,
                value: f64::INFINITY
            }
        );
    }

    #[test]
    fn param_variant_restores_values() {
        let p = Tensor::leaf(alloc::vec![0.5, -0.5, 1.5], &[3], true).unwrap();
        let q = p.clone();
        let r =
            finite_diff_check_params(|| Ok(q.powf(3.0).sum_all()), &[(p.clone(), 0), (p.clone(), 2)], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(p.to_vec(), alloc::vec![0.5, -0.5, 1.5]);
    }
}
