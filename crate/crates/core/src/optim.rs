//! AdamW and the linear warmup/decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, TensorError};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Result<Self, TensorError> {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self, TensorError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TensorError::Invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(self)
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update of `param` in place with learning rate `hp.lr * lr_mult`.
pub fn adamw_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    hp: &AdamW,
    lr_mult: f64,
) -> Result<(), TensorError> {
    if param.len() != grad.len() || state.m.len() != param.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = T::from_f64_lossy(hp.lr * lr_mult);
    let (b1, b2) = (T::from_f64_lossy(hp.beta1), T::from_f64_lossy(hp.beta2));
    let bc1 = T::from_f64_lossy(1.0 - hp.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - hp.beta2.powi(t));
    let eps = T::from_f64_lossy(hp.eps);
    let decay = T::one() - lr * T::from_f64_lossy(hp.weight_decay);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *p *= decay;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Learning-rate multiplier: rises linearly from 0 to 1 over `warmup` steps,
/// then falls linearly to 0 at `total`.
pub fn linear_warmup_schedule(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    (total - step) as f64 / (total - warmup).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(linear_warmup_schedule(0, 80, 1000), 0.0);
        assert_eq!(linear_warmup_schedule(40, 80, 1000), 0.5);
        assert_eq!(linear_warmup_schedule(80, 80, 1000), 1.0);
        assert_eq!(linear_warmup_schedule(1000, 80, 1000), 0.0);
        assert_eq!(linear_warmup_schedule(540, 80, 1000), 0.5);
        assert_eq!(linear_warmup_schedule(3, 0, 4), 0.25);
    }

    #[test]
    fn non_positive_lr_rejected() {
        assert!(AdamW::new(0.0).is_err());
        assert!(AdamW::new(-1e-3).is_err());
        assert!(AdamW::new(f64::NAN).is_err());
        assert!(AdamW::new(5e-4).is_ok());
    }

    #[test]
    fn single_scalar_step_matches_hand_arithmetic() {
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g² => p -= lr * g / (|g| + eps)
        let hp = AdamW::new(0.1).unwrap();
        let mut p = [1.0f64];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[0.5], &mut st, &hp, 1.0).unwrap();
        let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15, "{} vs {want}", p[0]);

        let hp = AdamW {
            weight_decay: 0.01,
            ..hp
        };
        let mut p = [2.0f64];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[-0.25], &mut st, &hp, 0.5).unwrap();
        let decayed = 2.0 * (1.0 - 0.05 * 0.01);
        let want = decayed + 0.05 * 0.25 / (0.25 + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_multiplier_leaves_param_untouched_without_decay() {
        let hp = AdamW::new(1e-3).unwrap();
        let mut p = [0.7f32, -0.2];
        let mut st = AdamState::new(2);
        adamw_step(&mut p, &[1.0, 1.0], &mut st, &hp, 0.0).unwrap();
        assert_eq!(p, [0.7, -0.2]);
        assert_eq!(st.step, 1);
    }
}
