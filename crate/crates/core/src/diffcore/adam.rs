use serde::{Deserialize, Serialize};

use super::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    /// A gradient entry was NaN or infinite; nothing was modified.
    RejectedNonFinite,
}

/// One Adam update with decoupled weight decay. Leaves `params.grad` as is.
pub fn adam_step(params: &mut ParamVector, cfg: &AdamConfig) -> StepStatus {
    if params.grad.iter().any(|g| !g.is_finite()) {
        return StepStatus::RejectedNonFinite;
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..params.values.len() {
        let g = params.grad[i];
        let m = cfg.beta1 * params.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * params.v[i] + (1.0 - cfg.beta2) * g * g;
        params.m[i] = m;
        params.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params.values[i] = params.values[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    StepStatus::Applied
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = ParamVector::from_values(vec![1.0, -2.0, 0.5]);
        assert_eq!(adam_step(&mut p, &AdamConfig::default()), StepStatus::Applied);
        assert_eq!(p.values, vec![1.0, -2.0, 0.5]);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first moment / sqrt(second) = sign(g)
        for &g in &[0.3, -7.0, 1e3] {
            let mut p = ParamVector::from_values(vec![1.0]);
            p.grad[0] = g;
            let cfg = AdamConfig {
                lr: 0.01,
                ..Default::default()
            };
            adam_step(&mut p, &cfg);
            let moved = (p.values[0] - 1.0).abs();
            assert!((moved - 0.01).abs() < 1e-6, "g={g} moved {moved}");
            assert_eq!(p.grad[0], g);
        }
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let mut p = ParamVector::from_values(vec![2.0, -4.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        adam_step(&mut p, &cfg);
        let f = 1.0 - 0.01 * 0.1;
        assert!((p.values[0] - 2.0 * f).abs() < 1e-15);
        assert!((p.values[1] + 4.0 * f).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ParamVector::from_values(vec![1.0, 1.0]);
        p.grad = vec![1.0, f64::NAN];
        assert_eq!(adam_step(&mut p, &AdamConfig::default()), StepStatus::RejectedNonFinite);
        assert_eq!(p.values, vec![1.0, 1.0]);
        assert_eq!(p.step_count(), 0);
    }
}
