//! Central finite-difference gradient checking.
//!
//! The differenced function always evaluates in `f64` so the check isolates
//! errors in the analytic backward pass from rounding in the forward pass.
//! Errors are scaled by the largest gradient magnitude seen across the
//! probed coordinates; a plain per-element relative error would amplify
//! rounding noise on coordinates whose true gradient happens to be tiny.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{KwsError, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
}

/// Compares `analytic` gradients against central differences of `f` at
/// `point`, probing only `indices`. `f` receives a perturbed copy of the
/// point and returns the scalar objective.
pub fn max_rel_error<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(point.len(), analytic.len());
    let mut buf = point.to_vec();
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = buf[i];
        buf[i] = orig + step;
        let plus = f(&buf)?;
        buf[i] = orig - step;
        let minus = f(&buf)?;
        buf[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        if !fd.is_finite() || !analytic[i].is_finite() {
            return Err(KwsError::NonFinite(format!(
                "gradient check at coordinate {i}"
            )));
        }
        pairs.push((fd, analytic[i]));
    }

    let scale = pairs
        .iter()
        .map(|(fd, an)| fd.abs().max(an.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let max_rel = pairs
        .iter()
        .map(|(fd, an)| (fd - an).abs() / scale)
        .fold(0.0f64, f64::max);
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        probes: indices.len(),
    })
}

/// Draws `count` distinct probe indices, or every index when there are
/// fewer than `count`.
pub fn probe_indices<R: Rng>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        sample(rng, len, count).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_passes() {
        // f(x) = sum x_i^2, grad = 2x
        let point: Vec<f64> = (0..20).map(|i| 0.1 * i as f64 - 1.0).collect();
        let analytic: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        let indices: Vec<usize> = (0..20).collect();
        let report = max_rel_error(
            |x| Ok(x.iter().map(|v| v * v).sum()),
            &point,
            &analytic,
            &indices,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let point = vec![0.5f64, -0.25];
        let analytic = vec![1.0f64, 0.5]; // sign error on the second coordinate
        let report = max_rel_error(
            |x| Ok(x[0] - x[1]),
            &point,
            &analytic,
            &[0, 1],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let point = vec![0.0f64];
        let analytic = vec![0.0f64];
        let err = max_rel_error(|_| Ok(f64::NAN), &point, &analytic, &[0], DEFAULT_STEP);
        assert!(err.is_err());
    }

    #[test]
    fn probe_indices_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = probe_indices(1000, 100, &mut rng);
        assert_eq!(idx.len(), 100);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_eq!(probe_indices(5, 100, &mut rng), vec![0, 1, 2, 3, 4]);
    }
}
