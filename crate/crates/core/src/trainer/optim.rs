use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer `{s}` (sgd|adam)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Step counter plus Adam's first and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One update. A non-finite gradient aborts with the (1-based) step index
/// and leaves `params` untouched.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, cfg: &OptimizerConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let step = state.step + 1;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i} at step {step}")));
    }
    state.step = step;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= cfg.lr * g;
            }
        }
        OptimizerKind::Adam => {
            let bc1 = 1.0 - cfg.beta1.powf(step as f64);
            let bc2 = 1.0 - cfg.beta2.powf(step as f64);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgd(lr: f64) -> OptimizerConfig {
        OptimizerConfig { kind: OptimizerKind::Sgd, lr, ..OptimizerConfig::default() }
    }

    #[test]
    fn sgd_update() {
        let mut p = [1.0];
        let mut s = OptimizerState::new(1);
        optimizer_step(&mut p, &[2.0], &mut s, &sgd(0.1)).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimizerConfig { lr: 0.01, ..OptimizerConfig::default() };
        for g in [1e-3, -0.5, 7.0] {
            let mut p = [0.3];
            let mut s = OptimizerState::new(1);
            optimizer_step(&mut p, &[g], &mut s, &cfg).unwrap();
            let delta = p[0] - 0.3;
            assert!((delta.abs() - 0.01).abs() < 1e-6, "g={g} delta={delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient() {
        let mut p = [1.0, -2.0];
        let mut s = OptimizerState::new(2);
        optimizer_step(&mut p, &[0.0, 0.0], &mut s, &sgd(0.1)).unwrap();
        assert_eq!(p, [1.0, -2.0]);

        let cfg = OptimizerConfig::default();
        let mut s = OptimizerState::new(2);
        s.m = vec![0.5, 0.5];
        s.v = vec![0.25, 0.25];
        s.step = 3;
        let mut q = [1.0, -2.0];
        optimizer_step(&mut q, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(s.step, 4);
        assert!((s.m[0] - 0.45).abs() < 1e-15);
        // adam keeps moving on accumulated momentum
        assert_ne!(q, [1.0, -2.0]);
    }

    #[test]
    fn adam_zero_state_zero_gradient_is_still() {
        let mut p = [1.0];
        let mut s = OptimizerState::new(1);
        optimizer_step(&mut p, &[0.0], &mut s, &OptimizerConfig::default()).unwrap();
        assert_eq!(p, [1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = [1.0];
        let mut s = OptimizerState::new(1);
        optimizer_step(&mut p, &[1.0], &mut s, &sgd(0.1)).unwrap();
        let e = optimizer_step(&mut p, &[f64::NAN], &mut s, &sgd(0.1)).unwrap_err().to_string();
        assert!(e.contains("step 2"), "{e}");
        assert!((p[0] - 0.9).abs() < 1e-15);
    }
}
