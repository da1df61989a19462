use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// SGD with momentum, L2 weight decay folded into the gradient, and step
/// learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    /// 0 disables decay.
    pub lr_decay_every: usize,
}

impl SgdConfig {
    pub fn plain(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay_factor: 1.0,
            lr_decay_every: 0,
        }
    }

    pub fn with_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            momentum,
            ..Self::plain(learning_rate)
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "{path}.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "{path}.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "{path}.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "{path}.lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        let steps = (epoch / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay_factor.powi(steps)
    }
}

/// Momentum buffers plus the epoch counter driving lr decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Tensor>,
    epoch: usize,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            epoch: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v ← m·v + (g + λ·p)`, `p ← p − η_epoch·v`, applied in place.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::dim(format!(
            "sgd_step: {} params, {} grads, {} momentum buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        p.ensure_same_shape(g, "sgd_step param/grad")?;
        p.ensure_same_shape(v, "sgd_step param/momentum")?;
    }
    let lr = cfg.lr_at_epoch(state.epoch);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.momentum * *vv + (gv + cfg.weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &[Tensor::scalar(1.0)], &mut st, &SgdConfig::plain(0.1)).unwrap();
        assert_eq!(p[0].item(), -0.1);
    }

    #[test]
    fn two_step_momentum_matches_recurrence() {
        let cfg = SgdConfig::with_momentum(0.1, 0.9);
        let (g1, g2) = (0.7, -0.3);
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = OptimizerState::new(&p);
        sgd_step(&mut p, &[Tensor::scalar(g1)], &mut st, &cfg).unwrap();
        sgd_step(&mut p, &[Tensor::scalar(g2)], &mut st, &cfg).unwrap();
        // hand-rolled recurrence
        let v1 = g1;
        let p1 = 2.0 - 0.1 * v1;
        let v2 = 0.9 * v1 + g2;
        let p2 = p1 - 0.1 * v2;
        assert_eq!(st.velocity()[0].item(), v2);
        assert_eq!(p[0].item(), p2);
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 100,
        };
        assert_eq!(cfg.lr_at_epoch(0), 0.1);
        assert_eq!(cfg.lr_at_epoch(99), 0.1);
        assert!((cfg.lr_at_epoch(100) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(250) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = OptimizerState::new(&p);
        let err = sgd_step(&mut p, &[Tensor::zeros(&[3])], &mut st, &SgdConfig::plain(0.1));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn validate_flags_field() {
        let err = SgdConfig::plain(0.0).validate("local.sgd").unwrap_err();
        assert!(err.to_string().contains("local.sgd.learning_rate"));
    }
}
