use crate::error::{Error, Result};
use crate::numkern::Tensor;

/// Map applied to the class means once a sudden or gradual drift is active.
#[derive(Clone, Debug, PartialEq)]
pub enum MeanTransform {
    Identity,
    /// Class `c` takes the mean previously owned by class `(c + by) mod C`,
    /// i.e. the feature-to-label mapping changes while `P(X)` keeps its
    /// support.
    Cycle {
        by: usize,
    },
    /// Adds the same offset to every class mean.
    Translate {
        offset: Vec<f64>,
    },
    /// Replaces the means outright.
    Replace {
        means: Tensor,
    },
}

impl MeanTransform {
    pub fn apply(&self, means: &Tensor) -> Result<Tensor> {
        let (c, d) = means.require_matrix("mean transform")?;
        match self {
            MeanTransform::Identity => Ok(means.clone()),
            MeanTransform::Cycle { by } => {
                let idx: Vec<usize> = (0..c).map(|i| (i + by) % c.max(1)).collect();
                Ok(means.select_rows(&idx))
            }
            MeanTransform::Translate { offset } => {
                if offset.len() != d {
                    return Err(Error::shape("translate", means.shape(), &[offset.len()]));
                }
                let off = Tensor::vector(offset.clone())?;
                crate::numkern::kernels::add_row(means, &off)
            }
            MeanTransform::Replace { means: target } => {
                if target.shape() != means.shape() {
                    return Err(Error::shape("replace", means.shape(), target.shape()));
                }
                Ok(target.clone())
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            MeanTransform::Identity => "identity".into(),
            MeanTransform::Cycle { by } => format!("cycle({by})"),
            MeanTransform::Translate { .. } => "translate".into(),
            MeanTransform::Replace { .. } => "replace".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DriftSchedule {
    Stationary,
    /// Class frequencies move from uniform to `p_i ∝ ρ^(−i/(C−1))` over
    /// `ramp_steps` steps.
    Tailed {
        imbalance_ratio: f64,
        ramp_steps: u64,
    },
    /// Means switch to `post_transform(μ)` at `switch_step`.
    Sudden {
        switch_step: u64,
        post_transform: MeanTransform,
    },
    /// Means move linearly from `μ` to `target(μ)` on `[start_step, end_step]`.
    Gradual {
        start_step: u64,
        end_step: u64,
        target: MeanTransform,
    },
}

impl DriftSchedule {
    pub fn kind(&self) -> &'static str {
        match self {
            DriftSchedule::Stationary => "stationary",
            DriftSchedule::Tailed { .. } => "tailed",
            DriftSchedule::Sudden { .. } => "sudden",
            DriftSchedule::Gradual { .. } => "gradual",
        }
    }

    /// Checks the per-kind parameter constraints against a stream of
    /// `horizon` steps.
    pub fn validate(&self, horizon: u64) -> Result<()> {
        match self {
            DriftSchedule::Stationary => Ok(()),
            DriftSchedule::Tailed { imbalance_ratio, .. } => {
                if !(imbalance_ratio.is_finite() && *imbalance_ratio >= 1.0) {
                    return Err(Error::config(
                        "stream.imbalance_ratio",
                        format!("must be >= 1, got {imbalance_ratio}"),
                    ));
                }
                Ok(())
            }
            DriftSchedule::Sudden { switch_step, .. } => {
                if *switch_step > horizon {
                    return Err(Error::config(
                        "stream.switch_step",
                        format!("{switch_step} exceeds the {horizon}-step horizon"),
                    ));
                }
                Ok(())
            }
            DriftSchedule::Gradual {
                start_step, end_step, ..
            } => {
                if start_step >= end_step {
                    return Err(Error::config(
                        "stream.end_step",
                        format!("start_step {start_step} must precede end_step {end_step}"),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Human-readable description of the transform active at `t`.
    pub fn active_transform(&self, t: u64) -> String {
        match self {
            DriftSchedule::Stationary | DriftSchedule::Tailed { .. } => "identity".into(),
            DriftSchedule::Sudden {
                switch_step,
                post_transform,
            } => {
                if t >= *switch_step {
                    post_transform.describe()
                } else {
                    "identity".into()
                }
            }
            DriftSchedule::Gradual { target, .. } => {
                format!("lerp({:.4}, {})", self.gradual_fraction(t), target.describe())
            }
        }
    }

    pub(crate) fn gradual_fraction(&self, t: u64) -> f64 {
        match self {
            DriftSchedule::Gradual {
                start_step, end_step, ..
            } => {
                if t <= *start_step {
                    0.0
                } else if t >= *end_step {
                    1.0
                } else {
                    (t - start_step) as f64 / (end_step - start_step) as f64
                }
            }
            _ => 0.0,
        }
    }
}

/// Class distribution at step `t`.
///
/// The tailed ramp mixes the uniform and the target profile,
/// `p(t) = (1 − s)·u + s·p*` with `s = min(t / T_r, 1)`, which keeps every
/// head-minus-tail gap `p_i − p_j` (`i < j`) non-decreasing in `t`.
pub fn class_probs(schedule: &DriftSchedule, num_classes: usize, t: u64) -> Result<Tensor> {
    if num_classes < 2 {
        return Err(Error::config(
            "stream.num_classes",
            format!("need at least 2 classes, got {num_classes}"),
        ));
    }
    let c = num_classes;
    let uniform = 1.0 / c as f64;
    let probs = match schedule {
        DriftSchedule::Tailed {
            imbalance_ratio,
            ramp_steps,
        } => {
            let s = if t >= *ramp_steps {
                1.0
            } else {
                t as f64 / *ramp_steps as f64
            };
            let target = tailed_profile(*imbalance_ratio, c);
            target.iter().map(|p| (1.0 - s) * uniform + s * p).collect()
        }
        _ => vec![uniform; c],
    };
    Tensor::vector(probs)
}

/// `p_i ∝ ρ^(−i/(C−1))`, normalized.
pub fn tailed_profile(imbalance_ratio: f64, num_classes: usize) -> Vec<f64> {
    let denom = (num_classes - 1) as f64;
    let raw: Vec<f64> = (0..num_classes)
        .map(|i| imbalance_ratio.powf(-(i as f64) / denom))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tailed(rho: f64, ramp: u64) -> DriftSchedule {
        DriftSchedule::Tailed {
            imbalance_ratio: rho,
            ramp_steps: ramp,
        }
    }

    #[test]
    fn ramp_origin_is_uniform() {
        let p = class_probs(&tailed(100.0, 50), 5, 0).unwrap();
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn ratio_one_is_uniform() {
        for t in [0, 10, 1000] {
            let p = class_probs(&tailed(1.0, 50), 4, t).unwrap();
            for v in p.data() {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_class_target() {
        let p = class_probs(&tailed(100.0, 50), 2, 50).unwrap();
        assert!((p.data()[0] - 100.0 / 101.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_classes() {
        assert!(matches!(
            class_probs(&DriftSchedule::Stationary, 1, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn validation() {
        assert!(tailed(0.5, 1).validate(10).is_err());
        let s = DriftSchedule::Sudden {
            switch_step: 11,
            post_transform: MeanTransform::Identity,
        };
        assert!(s.validate(10).is_err());
        let g = DriftSchedule::Gradual {
            start_step: 5,
            end_step: 5,
            target: MeanTransform::Identity,
        };
        assert!(g.validate(10).is_err());
    }

    #[test]
    fn cycle_transform_rotates_rows() {
        let m = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let out = MeanTransform::Cycle { by: 1 }.apply(&m).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 0.0]);
    }

    proptest! {
        #[test]
        fn probs_are_a_distribution(rho in 1.0f64..500.0, c in 2usize..20, ramp in 1u64..200, t in 0u64..400) {
            let p = class_probs(&tailed(rho, ramp), c, t).unwrap();
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn head_tail_gaps_grow(rho in 1.0f64..500.0, c in 2usize..12, ramp in 1u64..100) {
            let sched = tailed(rho, ramp);
            let mut prev = class_probs(&sched, c, 0).unwrap();
            for t in 1..=ramp {
                let cur = class_probs(&sched, c, t).unwrap();
                for i in 0..c {
                    for j in i + 1..c {
                        let before = prev.data()[i] - prev.data()[j];
                        let after = cur.data()[i] - cur.data()[j];
                        prop_assert!(after >= before - 1e-15);
                    }
                }
                prev = cur;
            }
        }
    }
}
