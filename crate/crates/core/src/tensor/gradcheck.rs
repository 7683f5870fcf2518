//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Tensor;

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is ~0 are judged on absolute error instead of amplified rounding noise.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against `(f(p + h) - f(p - h)) / 2h`.
///
/// `objective` returns the scalar value and one gradient tensor per entry of
/// `params`. When `coords_per_param` is set, a seeded random subset of that
/// many coordinates is checked per tensor instead of all of them. `params`
/// is restored before returning.
pub fn grad_check<F>(
    params: &mut [Tensor],
    mut objective: F,
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (f0, grads) = objective(params)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("objective value {f0}")));
    }
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "objective returned {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            params[pi].data_mut()[c] = orig + h;
            let fp = objective(params)?.0;
            params[pi].data_mut()[c] = orig - h;
            let fm = objective(params)?.0;
            params[pi].data_mut()[c] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at parameter {pi} coordinate {c}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[pi].data()[c];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, c, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn quadratic_is_exact() {
        let mut params = vec![Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap()];
        let report = grad_check(
            &mut params,
            |p| {
                let mut g = Graph::new();
                let v = g.param(p[0].clone());
                let s = g.sum_squares(v);
                let half = g.scale(s, 0.5);
                g.backward(half)?;
                Ok((g.value(half).item(), vec![g.grad_tensor(v)]))
            },
            1e-4,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = vec![Tensor::new(&[2], vec![1.0, 2.0]).unwrap()];
        let report = grad_check(
            &mut params,
            |p| {
                let v: f64 = p[0].data().iter().map(|x| x * x).sum();
                Ok((v, vec![p[0].clone()]))
            },
            1e-4,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut params = vec![Tensor::zeros(&[1])];
        let res = grad_check(&mut params, |p| Ok((f64::NAN, vec![p[0].clone()])), 1e-4, None, 0);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
