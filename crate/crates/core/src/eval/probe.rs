use serde::{Deserialize, Serialize};

use super::{Split, SplitValues};
use crate::error::{Error, Result};
use crate::numkern::{kernels, Tensor};

/// Full-batch gradient descent settings for the linear probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 2.0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("eval.probe.epochs", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("eval.probe.lr", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Top-1 accuracy in [0, 1]. `per_class` holds class accuracies and
    /// `all` is the share of all test samples classified correctly.
    pub top1: SplitValues,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Softmax regression fitted from zero by full-batch gradient descent.
pub fn fit_probe(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let (n, e) = features.require_matrix("probe features")?;
    if labels.len() != n {
        return Err(Error::shape("probe labels", &[labels.len()], &[n]));
    }
    let mut seen = vec![false; num_classes];
    for &c in labels {
        *seen
            .get_mut(c)
            .ok_or_else(|| Error::Contract(format!("label {c} out of range for {num_classes} classes")))? = true;
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(Error::EmptyClass { class: c });
    }

    let mut w = Tensor::zeros(vec![e, num_classes]);
    let mut b = Tensor::zeros(vec![num_classes]);
    let inv_n = 1.0 / n as f64;
    for _ in 0..cfg.epochs {
        let logits = kernels::add_row(&kernels::matmul(features, &w)?, &b)?;
        let mut resid = kernels::softmax_rows(&logits)?;
        {
            let r = resid.data_mut();
            for (i, &c) in labels.iter().enumerate() {
                r[i * num_classes + c] -= 1.0;
            }
            r.iter_mut().for_each(|v| *v *= inv_n);
        }
        let gw = kernels::matmul_tn(features, &resid)?;
        let mut gb = vec![0.0; num_classes];
        for i in 0..n {
            for (g, &v) in gb.iter_mut().zip(resid.row(i)) {
                *g += v;
            }
        }
        for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= cfg.lr * g;
        }
        for (p, g) in b.data_mut().iter_mut().zip(&gb) {
            *p -= cfg.lr * g;
        }
    }
    w.ensure_finite("probe weights")?;
    Ok((w, b))
}

/// Arg-max class per row; ties go to the lowest class id.
pub fn predict(features: &Tensor, w: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let logits = kernels::add_row(&kernels::matmul(features, w)?, b)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fits on the training features and scores split-wise top-1 on the test set.
pub fn linear_probe(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    splits: &[Split],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let c = splits.len();
    let (w, b) = fit_probe(train_features, train_labels, c, cfg)?;
    let pred = predict(test_features, &w, &b)?;
    if pred.len() != test_labels.len() {
        return Err(Error::shape("probe test labels", &[test_labels.len()], &[pred.len()]));
    }
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&p, &y) in pred.iter().zip(test_labels) {
        if y >= c {
            return Err(Error::Contract(format!("test label {y} out of range for {c} classes")));
        }
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    if let Some(k) = totals.iter().position(|&t| t == 0) {
        return Err(Error::EmptyClass { class: k });
    }
    let per_class: Vec<f64> = hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).collect();
    let mut top1 = SplitValues::macro_average(per_class, splits);
    top1.all = hits.iter().sum::<usize>() as f64 / test_labels.len() as f64;
    Ok(ProbeReport {
        top1,
        weights: w,
        bias: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::Rng;

    #[test]
    fn one_hot_features_are_perfectly_probed() {
        let c = 4;
        let labels: Vec<usize> = (0..40).map(|i| i % c).collect();
        let mut x = Tensor::zeros(vec![40, c]);
        for (i, &y) in labels.iter().enumerate() {
            x.data_mut()[i * c + y] = 1.0;
        }
        let r = linear_probe(&x, &labels, &x, &labels, &[Split::Many; 4], &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1.all, 1.0);
        assert_eq!(r.top1.per_class, vec![1.0; 4]);
    }

    #[test]
    fn separable_two_class_fixture() {
        // Margin 0.5 around the hyperplane x0 = 0.
        let mut rng = Rng::new(4);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let y = i % 2;
            let x0 = if y == 0 {
                -0.5 - rng.uniform()
            } else {
                0.5 + rng.uniform()
            };
            rows.push([x0, rng.uniform_in(-1.0, 1.0)]);
            labels.push(y);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let r = linear_probe(
            &x,
            &labels,
            &x,
            &labels,
            &[Split::Many, Split::Few],
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(r.top1.all, 1.0);
        assert_eq!(r.top1.few, Some(1.0));
    }

    #[test]
    fn permuted_labels_land_near_chance() {
        let c = 5;
        let n = 1000;
        let mut rng = Rng::new(8);
        let x = Tensor::matrix(n, 6, (0..n * 6).map(|_| rng.normal()).collect()).unwrap();
        let train: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let test: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let r = linear_probe(&x, &train, &x, &test, &[Split::Many; 5], &ProbeConfig::default()).unwrap();
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.top1.all - p).abs() < 3.0 * sigma, "{}", r.top1.all);
    }

    #[test]
    fn absent_training_class_is_an_error() {
        let x = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        let err = linear_probe(
            &x,
            &[0, 0],
            &x,
            &[0, 1],
            &[Split::Many, Split::Few],
            &ProbeConfig::default(),
        );
        assert!(matches!(err, Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn probe_is_deterministic() {
        let mut rng = Rng::new(1);
        let x = Tensor::matrix(50, 3, (0..150).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = linear_probe(&x, &y, &x, &y, &[Split::Many; 3], &ProbeConfig::default()).unwrap();
        let b = linear_probe(&x, &y, &x, &y, &[Split::Many; 3], &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
