use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamSet, Tensor};

/// Linear warmup to a constant peak learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub peak_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_steps: 500,
            peak_lr: 2e-5,
        }
    }
}

impl Schedule {
    /// Learning rate for 1-based update `step`; step 0 is treated as 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.max(1);
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.peak_lr
        } else {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "peak_lr {} must be >= 0",
                self.peak_lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay: Vec<bool>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            decay: vec![true; params.len()],
        }
    }

    /// Exempts the named parameter from weight decay.
    pub fn without_decay(mut self, params: &ParamSet, name: &str) -> Result<Self> {
        self.decay[params.id(name)?.0] = false;
        Ok(self)
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("gradient/parameter count mismatch".into()));
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
    }
    let next = state.step + 1;
    if let Some(bad) = grads.first_non_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {} at step {next}",
            params.name(bad)
        )));
    }
    state.step = next;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(next as i32);
    let bc2 = 1.0 - beta2.powi(next as i32);
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id);
        if g.shape() != params.get(id).shape() {
            return Err(Error::Shape(format!(
                "gradient shape mismatch for {}",
                params.name(id)
            )));
        }
        let wd = if state.decay[id.0] { weight_decay } else { 0.0 };
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for (((pi, &gi), mi), vi) in p
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_points() {
        let s = Schedule::default();
        assert!((s.lr_at(250) - 1e-5).abs() < 1e-20);
        assert_eq!(s.lr_at(500), 2e-5);
        assert_eq!(s.lr_at(10_000), 2e-5);
        assert_eq!(s.lr_at(0), s.lr_at(1));
        assert!((s.lr_at(1) - 2e-5 / 500.0).abs() < 1e-22);
    }

    #[test]
    fn schedule_is_monotone_and_continuous() {
        let s = Schedule::default();
        for step in 1..600 {
            assert!(s.lr_at(step + 1) >= s.lr_at(step));
        }
        assert!((s.lr_at(499) - s.lr_at(500)).abs() <= 2e-5 / 500.0 + 1e-20);
        assert_eq!(s.lr_at(500), s.lr_at(501));
    }

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = single(1.5);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&p, cfg);
        let g = Gradients::zeros_like(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
        }
        assert_eq!(p.get(p.id("w").unwrap()).data(), &[1.5]);
    }

    #[test]
    fn decay_shrinks_magnitude() {
        for start in [2.0, -2.0] {
            let mut p = single(start);
            let mut st = OptimizerState::new(&p, AdamWConfig::default());
            let g = Gradients::zeros_like(&p);
            adamw_step(&mut p, &g, &mut st, 0.1).unwrap();
            let after = p.get(p.id("w").unwrap()).data()[0];
            assert!(after.abs() < start.abs());
        }
    }

    #[test]
    fn exempt_parameter_does_not_decay() {
        let mut p = single(2.0);
        let mut st = OptimizerState::new(&p, AdamWConfig::default())
            .without_decay(&p, "w")
            .unwrap();
        let g = Gradients::zeros_like(&p);
        adamw_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert_eq!(p.get(p.id("w").unwrap()).data(), &[2.0]);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        let mut g = Gradients::zeros_like(&p);
        adamw_step(&mut p, &g, &mut st, 0.1).unwrap();
        g.get_mut(p.id("w").unwrap()).data_mut()[0] = f64::NAN;
        let err = adamw_step(&mut p, &g, &mut st, 0.1).unwrap_err();
        assert!(
            matches!(err, Error::Numeric(ref m) if m.contains("step 2")),
            "{err}"
        );
    }
}
