//! AdamW with decoupled weight decay and a step-halving learning-rate schedule.

use crate::error::{Error, Result};
use crate::grad::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays.
    pub lr_decay_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            lr_decay_factor: 2.0,
            lr_decay_every: 20,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !open01(self.beta1) || !open01(self.beta2) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got {} / {}", self.beta1, self.beta2)));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight decay must be >= 0 and eps > 0".into()));
        }
        if self.lr_decay_every == 0 || self.lr_decay_factor < 1.0 {
            return Err(Error::Config("lr decay needs every >= 1 and factor >= 1".into()));
        }
        Ok(())
    }
}

/// `lr0 / factor^floor(epoch / every)`.
pub fn decay_lr(cfg: &OptimConfig, epoch: usize) -> f64 {
    cfg.lr / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One AdamW update with bias correction on every trainable, unfrozen entry.
///
/// Frozen entries and buffers are left bit-identical, including their
/// moments and step counts.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if let Some(e) = store.entries().iter().find(|e| e.is_trainable() && e.grad.is_none()) {
        return Err(Error::Contract(format!("no gradient for unfrozen parameter {}", e.name)));
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (lr_t, wd, eps) = (T::of(lr), T::of(cfg.weight_decay), T::of(cfg.eps));
    for e in store.entries_mut().iter_mut().filter(|e| e.is_trainable()) {
        e.t += 1;
        let bc1 = T::one() - T::of(cfg.beta1.powi(e.t as i32));
        let bc2 = T::one() - T::of(cfg.beta2.powi(e.t as i32));
        let grad = e.grad.as_ref().expect("checked above");
        for (((w, &g), m), v) in e.value.iter_mut().zip(grad).zip(e.m.iter_mut()).zip(e.v.iter_mut()) {
            *w = *w - lr_t * wd * *w;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::params::ParamKind;

    fn scalar_store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", &[1], vec![w], ParamKind::Trainable).unwrap();
        s.zero_grads();
        s.entry_mut(crate::grad::ParamId(0)).grad = Some(vec![g]);
        s
    }

    #[test]
    fn decoupled_decay_applies_at_zero_gradient() {
        let mut s = scalar_store(1.0, 0.0);
        let cfg = OptimConfig { weight_decay: 0.01, ..OptimConfig::default() };
        adamw_step(&mut s, &cfg, 1e-4).unwrap();
        assert_eq!(s.entries()[0].value[0], 1.0 - 1e-4 * 0.01 * 1.0);
        assert!((1.0 - s.entries()[0].value[0] - 1e-6).abs() < 4.0 * f64::EPSILON);
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut s = scalar_store(0.3, 0.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let before = s.entries()[0].clone();
        adamw_step(&mut s, &cfg, 1e-4).unwrap();
        let after = &s.entries()[0];
        assert_eq!(after.value, before.value);
        assert_eq!(after.m, before.m);
        assert_eq!(after.v, before.v);
        assert_eq!(after.t, before.t + 1);
    }

    #[test]
    fn frozen_entry_is_untouched() {
        let mut s = scalar_store(0.7, 5.0);
        s.entry_mut(crate::grad::ParamId(0)).frozen = true;
        s.entry_mut(crate::grad::ParamId(0)).grad = Some(vec![5.0]);
        let before = s.entries()[0].clone();
        adamw_step(&mut s, &OptimConfig::default(), 1e-3).unwrap();
        assert_eq!(s.entries()[0].value, before.value);
        assert_eq!(s.entries()[0].t, 0);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", &[2], vec![0.0; 2], ParamKind::Trainable).unwrap();
        assert!(matches!(adamw_step(&mut s, &OptimConfig::default(), 1e-4), Err(Error::Contract(_))));
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        // with bias correction the first Adam step is lr * g / (|g| + eps)
        let mut s = scalar_store(0.0, 2.0);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        adamw_step(&mut s, &cfg, 1e-3).unwrap();
        assert!((s.entries()[0].value[0] + 1e-3 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule() {
        let cfg = OptimConfig { lr: 1e-4, lr_decay_every: 20, ..OptimConfig::default() };
        assert_eq!(decay_lr(&cfg, 0), 1e-4);
        assert_eq!(decay_lr(&cfg, 19), 1e-4);
        assert_eq!(decay_lr(&cfg, 20), 5e-5);
        assert_eq!(decay_lr(&cfg, 45), 2.5e-5);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { beta1: 1.0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { lr: 0.0, ..OptimConfig::default() }.validate().is_err());
    }
}
