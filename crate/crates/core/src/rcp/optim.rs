use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numkern::Tensor;

/// Adaptive-moment optimizer settings with a warmup + cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl OptimConfig {
    /// Reference batch for linear learning-rate scaling.
    pub const REFERENCE_WINDOW: usize = 256;

    /// Defaults for a run of `total_steps` with windows of `window` samples:
    /// base lr `1.5e-4 · W / 256`, betas `(0.9, 0.95)`, decay `0.05`,
    /// warmup over the first 5% of steps.
    pub fn for_run(total_steps: u64, window: usize) -> Self {
        OptimConfig {
            base_lr: Self::scaled_lr(1.5e-4, window),
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_steps: total_steps / 20,
            total_steps,
        }
    }

    pub fn scaled_lr(lr: f64, window: usize) -> f64 {
        lr * window as f64 / Self::REFERENCE_WINDOW as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("optim.base_lr", "must be >= 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("optim.betas", "both betas must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be >= 0"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("optim.eps", "must be > 0"));
        }
        Ok(())
    }

    /// Linear warmup from 0, then cosine decay to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// bias vectors are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new<'a>(cfg: OptimConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())))
            .unzip();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let g = grads
                .get(i)
                .ok_or_else(|| Error::Contract(format!("missing gradient for parameter {i}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let decay = if p.ndim() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gv;
                v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *pv);
            }
        }
        if count != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {count}",
                self.m.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            ..OptimConfig::for_run(110, 256)
        };
        assert_eq!(cfg.lr_at(0), 0.0);
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10), 1.0);
        assert!((cfg.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(110).abs() < 1e-15);
        for s in 0..200 {
            assert!(cfg.lr_at(s) >= 0.0);
        }
    }

    #[test]
    fn defaults_follow_window_scaling() {
        let cfg = OptimConfig::for_run(1000, 512);
        assert!((cfg.base_lr - 3e-4).abs() < 1e-18);
        assert_eq!(cfg.warmup_steps, 50);
        assert_eq!(cfg.betas, (0.9, 0.95));
        assert_eq!(cfg.weight_decay, 0.05);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr·sign(g).
        let mut p = vec![Tensor::vector(vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::vector(vec![0.3, -2.0]).unwrap()];
        let mut opt = AdamW::new(OptimConfig::for_run(10, 256), &p);
        opt.step(p.iter_mut(), &g, 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![Tensor::from_rows(&[[1.0, 2.0]]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::from_rows(&[[5.0, -5.0]]).unwrap()];
        let mut opt = AdamW::new(OptimConfig::for_run(10, 256), &p);
        opt.step(p.iter_mut(), &g, 0.0).unwrap();
        assert_eq!(p, before);
    }
}
