//! Adam with bias correction, stored per parameter.

use super::{Parameter, Scalar, Tensor};

/// Optimizer hyperparameters. `lr` is the only field schedulers mutate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper<E = f32> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub epsilon: E,
}

impl<E: Scalar> AdamHyper<E> {
    pub fn with_lr(lr: E) -> Self {
        AdamHyper {
            lr,
            beta1: E::from_f64_lossy(0.9),
            beta2: E::from_f64_lossy(0.999),
            epsilon: E::from_f64_lossy(1e-8),
        }
    }
}

/// First/second moment buffers plus the step counter; lives in the
/// parameter's optimizer-state slot.
#[derive(Debug, Clone)]
pub struct AdamState<E = f32> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
    pub t: u64,
    pub hyper: AdamHyper<E>,
}

/// What a step did; stepping a frozen parameter is a signalled no-op, not an
/// error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonTrainable,
}

/// Allocates zeroed moment buffers for `param`.
pub fn init<E: Scalar>(param: &mut Parameter<E>, hyper: AdamHyper<E>) {
    param.state = Some(AdamState {
        m: Tensor::zeros(param.value.shape()),
        v: Tensor::zeros(param.value.shape()),
        t: 0,
        hyper,
    });
}

/// One Adam update from `param.grad`. Initializes the state slot with
/// default hyperparameters if it is missing.
pub fn step<E: Scalar>(param: &mut Parameter<E>) -> StepOutcome {
    if !param.trainable {
        return StepOutcome::SkippedNonTrainable;
    }
    if param.state.is_none() {
        init(param, AdamHyper::with_lr(E::from_f64_lossy(1e-3)));
    }
    let state = param.state.as_mut().expect("state initialized above");
    state.t += 1;
    let h = state.hyper;
    let one = E::one();
    let bc1 = one - h.beta1.powi(state.t as i32);
    let bc2 = one - h.beta2.powi(state.t as i32);

    for ((value, grad), (m, v)) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(param.grad.data())
        .zip(
            state
                .m
                .data_mut()
                .iter_mut()
                .zip(state.v.data_mut().iter_mut()),
        )
    {
        let g = *grad;
        *m = h.beta1 * *m + (one - h.beta1) * g;
        *v = h.beta2 * *v + (one - h.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *value = *value - h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    StepOutcome::Applied
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param<E: Scalar>(value: f64, lr: f64) -> Parameter<E> {
        let mut p = Parameter::new(Tensor::filled(&[1], E::from_f64_lossy(value)));
        init(&mut p, AdamHyper::with_lr(E::from_f64_lossy(lr)));
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for &g in &[3.7f32, -0.002] {
            let mut p = scalar_param::<f32>(1.0, 0.01);
            p.grad.data_mut()[0] = g;
            assert_eq!(step(&mut p), StepOutcome::Applied);
            let delta = p.value.data()[0] - 1.0;
            assert!(
                (delta + 0.01 * g.signum()).abs() < 1e-5,
                "grad {g}: delta {delta}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = scalar_param::<f32>(0.25, 0.1);
        for _ in 0..10 {
            step(&mut p);
        }
        assert_eq!(p.value.data()[0], 0.25);
    }

    #[test]
    fn non_trainable_step_is_a_signalled_noop() {
        let mut p = scalar_param::<f32>(1.0, 0.1);
        p.trainable = false;
        p.grad.data_mut()[0] = 5.0;
        assert_eq!(step(&mut p), StepOutcome::SkippedNonTrainable);
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(p.state.as_ref().unwrap().t, 0);
    }

    /// Five steps on the quadratic loss a/2 * x^2 against a hand-rolled
    /// recurrence in f64.
    fn quadratic_trajectory<E: Scalar>(steps: usize) -> (f64, f64) {
        let (a, lr, x0) = (2.0f64, 0.05f64, 1.3f64);
        let mut p = scalar_param::<E>(x0, lr);

        // oracle recurrence
        let (b1, b2, eps) = (0.9f64, 0.999, 1e-8);
        let (mut m, mut v, mut x) = (0.0f64, 0.0, x0);
        for t in 1..=steps {
            let g = a * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        for _ in 0..steps {
            let g = E::from_f64_lossy(a) * p.value.data()[0];
            p.grad.data_mut()[0] = g;
            step(&mut p);
        }
        (p.value.data()[0].to_f64_lossy(), x)
    }

    #[test]
    fn five_step_quadratic_matches_recurrence_oracle() {
        let (got64, want) = quadratic_trajectory::<f64>(5);
        assert!((got64 - want).abs() < 1e-7, "f64: {got64} vs {want}");
        let (got32, want) = quadratic_trajectory::<f32>(5);
        assert!((got32 - want).abs() < 1e-5, "f32: {got32} vs {want}");
    }
}
