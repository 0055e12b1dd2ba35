//! Central finite-difference verification of analytic field gradients.
//!
//! Each sampled component of a displacement field is perturbed by `+/-h`,
//! the loss is re-evaluated, and the symmetric difference quotient is
//! compared against the analytic gradient. The divisor uses the actually
//! realized perturbation (measured from the stored values), so the check
//! is exact even when `h` is not representable.

use alloc::vec::Vec;

use crate::warp::DisplacementField;

/// Where to probe: `field` selects which of the loss's field arguments,
/// then channel and linear voxel index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSpec {
    pub field: usize,
    pub channel: usize,
    pub voxel: usize,
}

/// One verified component.
#[derive(Clone, Copy, Debug)]
pub struct ComponentCheck {
    pub sample: SampleSpec,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

/// Aggregate outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    /// Components that exceeded the tolerance.
    pub failures: Vec<ComponentCheck>,
}

impl GradCheckOutcome {
    /// Fraction of checked components within tolerance.
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Checks `grads` (one per field, same order as `fields`) against central
/// finite differences of `loss` at the listed samples.
///
/// `loss` is called with the perturbed copies of all fields and must return
/// the same scalar the analytic gradients differentiate. Components whose
/// relative error (floor `1e-8`) stays below `rel_tol` count as passed.
pub fn check_gradients<F>(
    fields: &[&DisplacementField],
    grads: &[&DisplacementField],
    samples: &[SampleSpec],
    step: f64,
    rel_tol: f64,
    mut loss: F,
) -> GradCheckOutcome
where
    F: FnMut(&[DisplacementField]) -> f64,
{
    assert_eq!(fields.len(), grads.len());
    let mut work: Vec<DisplacementField> = fields.iter().map(|f| (*f).clone()).collect();
    let mut outcome = GradCheckOutcome {
        checked: 0,
        passed: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for &s in samples {
        let n = fields[s.field].voxel_count();
        let idx = s.channel * n + s.voxel;
        let base = fields[s.field].data()[idx];

        work[s.field].data_mut()[idx] = base + step;
        let plus_value = work[s.field].data()[idx];
        let loss_plus = loss(&work);

        work[s.field].data_mut()[idx] = base - step;
        let minus_value = work[s.field].data()[idx];
        let loss_minus = loss(&work);

        work[s.field].data_mut()[idx] = base;

        let fd = (loss_plus - loss_minus) / (plus_value - minus_value);
        let analytic = grads[s.field].data()[idx];
        let rel = relative_error(analytic, fd, 1e-8);

        outcome.checked += 1;
        outcome.max_rel_error = outcome.max_rel_error.max(rel);
        if rel < rel_tol {
            outcome.passed += 1;
        } else {
            outcome.failures.push(ComponentCheck {
                sample: s,
                analytic,
                finite_difference: fd,
                rel_error: rel,
            });
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn quadratic_loss_checks_out() {
        // loss = sum of squares / 2 has gradient equal to the field itself.
        let dims = Dims::new(4, 4, 4);
        let u = DisplacementField::from_fn(dims, |x, y, z| {
            [x as f64 * 0.1, y as f64 * -0.2, z as f64 * 0.05]
        });
        let grad = u.clone();
        let samples: Vec<SampleSpec> = (0..30)
            .map(|i| SampleSpec { field: 0, channel: i % 3, voxel: (i * 7) % dims.voxel_count() })
            .collect();
        let outcome = check_gradients(&[&u], &[&grad], &samples, 1e-3, 1e-6, |fs| {
            fs[0].data().iter().map(|&v| 0.5 * v * v).sum()
        });
        assert_eq!(outcome.passed, outcome.checked);
        assert!(outcome.max_rel_error < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let dims = Dims::new(3, 3, 3);
        let u = DisplacementField::from_fn(dims, |_, _, _| [1.0, 1.0, 1.0]);
        let mut wrong = u.clone();
        for g in wrong.data_mut() {
            *g *= 3.0;
        }
        let samples = [SampleSpec { field: 0, channel: 0, voxel: 5 }];
        let outcome = check_gradients(&[&u], &[&wrong], &samples, 1e-3, 1e-3, |fs| {
            fs[0].data().iter().map(|&v| 0.5 * v * v).sum()
        });
        assert_eq!(outcome.passed, 0);
        assert_eq!(outcome.failures.len(), 1);
    }
}
