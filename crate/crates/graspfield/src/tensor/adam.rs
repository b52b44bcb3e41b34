//! Adam with bias correction.

use crate::error::{Error, Result};

/// Hyperparameters. Defaults follow the usual 0.9 / 0.999 / 1e-8; the
/// learning rate is set per call site (schedules mutate it between steps).
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update, in place. `t` increments by exactly 1.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {} grads {} state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    crate::tensor::ensure_finite("adam_step", params)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut p = vec![0.5f32, -1.25, 3.0];
        let orig = p.clone();
        let mut st = AdamState::new(3);
        let hp = AdamHyper::with_lr(0.1);
        for _ in 0..25 {
            adam_step(&mut p, &[0.0, 0.0, 0.0], &mut st, &hp).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.t, 25);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // after bias correction m_hat/sqrt(v_hat) is sign(g) up to eps
        for &g in &[0.3f32, -2.0, 1e-3] {
            let mut p = vec![1.0f32];
            let mut st = AdamState::new(1);
            let hp = AdamHyper::with_lr(0.05);
            adam_step(&mut p, &[g], &mut st, &hp).unwrap();
            let step = 1.0 - p[0];
            assert!((step.abs() - 0.05).abs() < 1e-4, "step {step} for g {g}");
            assert_eq!(step.signum(), g.signum());
        }
    }

    #[test]
    fn ten_step_trajectory_matches_scalar_reference() {
        // independent scalar re-implementation on f(x) = x^2 from x = 1
        let mut x_ref = 1.0f32;
        let (mut m, mut v) = (0.0f32, 0.0f32);
        let (b1, b2, eps, lr) = (0.9f32, 0.999f32, 1e-8f32, 0.1f32);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            reference.push(x_ref);
        }

        let mut p = vec![1.0f32];
        let mut st = AdamState::new(1);
        let hp = AdamHyper::with_lr(0.1);
        for want in reference {
            let g = 2.0 * p[0];
            adam_step(&mut p, &[g], &mut st, &hp).unwrap();
            assert!((p[0] - want).abs() < 1e-6, "{} vs {}", p[0], want);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0f32; 3];
        let mut st = AdamState::new(3);
        let hp = AdamHyper::with_lr(0.1);
        assert!(adam_step(&mut p, &[0.0; 2], &mut st, &hp).is_err());
    }
}
