//! Frozen-encoder evaluation: split-wise linear probing, angle geometry of
//! the feature space, and OOD detection scores.
//!
//! Classes are grouped into Many / Medium / Few splits by how often they
//! occur in the probe's training set. Every split value is a macro average
//! over its classes.

mod angles;
mod ood;
mod probe;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use angles::{
    angle_deg, class_centroids, id_ood_separability, inter_separability, intra_compactness, DEGENERATE_NORM,
};
pub use ood::{auroc, fpr_at_tpr, ood_score};
pub use probe::{fit_probe, linear_probe, predict, ProbeConfig, ProbeReport};

use crate::error::{Error, Result};
use crate::model::ParamPair;
use crate::numkern::{kernels, Rng, Tensor};
use crate::rcp::NORM_EPS;
use crate::stream::{sample_balanced, sample_batch, sample_ood_from, DriftSchedule, Source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Many, Split::Medium, Split::Few];

    pub fn name(self) -> &'static str {
        match self {
            Split::Many => "many",
            Split::Medium => "medium",
            Split::Few => "few",
        }
    }
}

/// `count > many_min` is Many, `count < few_max` is Few, the rest Medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for SplitThresholds {
    fn default() -> Self {
        SplitThresholds {
            many_min: 100,
            few_max: 20,
        }
    }
}

impl SplitThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.few_max > self.many_min {
            return Err(Error::config("eval.few_max", "must not exceed eval.many_min"));
        }
        Ok(())
    }

    pub fn classify(&self, count: usize) -> Split {
        if count > self.many_min {
            Split::Many
        } else if count < self.few_max {
            Split::Few
        } else {
            Split::Medium
        }
    }

    pub fn assign(&self, counts: &[usize]) -> Vec<Split> {
        counts.iter().map(|&n| self.classify(n)).collect()
    }
}

/// Per-class values with their split and overall aggregates. A split with
/// no classes has no value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitValues {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: f64,
    pub per_class: Vec<f64>,
}

impl SplitValues {
    /// Unweighted mean over the classes of each split; `all` over every class.
    pub fn macro_average(per_class: Vec<f64>, splits: &[Split]) -> Self {
        debug_assert_eq!(per_class.len(), splits.len());
        let mean_of = |keep: &dyn Fn(Split) -> bool| {
            let vals: Vec<f64> = per_class
                .iter()
                .zip(splits)
                .filter(|(_, &s)| keep(s))
                .map(|(&v, _)| v)
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        SplitValues {
            many: mean_of(&|s| s == Split::Many),
            medium: mean_of(&|s| s == Split::Medium),
            few: mean_of(&|s| s == Split::Few),
            all: mean_of(&|_| true).unwrap_or(f64::NAN),
            per_class,
        }
    }

    pub fn get(&self, split: Split) -> Option<f64> {
        match split {
            Split::Many => self.many,
            Split::Medium => self.medium,
            Split::Few => self.few,
        }
    }
}

/// Student-encoder outputs (before the head), L2-normalized per row.
pub fn extract_features(pair: &ParamPair, x: &Tensor) -> Result<Tensor> {
    let v = pair.encode(x)?;
    Ok(kernels::l2_normalize_rows(&v, NORM_EPS)?.0)
}

/// Sizes of the evaluation sets and probe settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probe training samples, drawn from the stream distribution at the
    /// evaluation step, so their class counts follow the drift.
    pub probe_train_size: usize,
    /// Balanced test set size per class.
    pub test_per_class: usize,
    pub ood_samples: usize,
    pub many_min: usize,
    pub few_max: usize,
    pub tpr_target: f64,
    /// Stream step whose distribution is evaluated; defaults to the
    /// training horizon.
    pub step: Option<u64>,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let t = SplitThresholds::default();
        EvalConfig {
            probe_train_size: 2000,
            test_per_class: 50,
            ood_samples: 500,
            many_min: t.many_min,
            few_max: t.few_max,
            tpr_target: 0.95,
            step: None,
            probe: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn thresholds(&self) -> SplitThresholds {
        SplitThresholds {
            many_min: self.many_min,
            few_max: self.few_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds().validate()?;
        self.probe.validate()?;
        if self.probe_train_size == 0 {
            return Err(Error::config("eval.probe_train_size", "must be >= 1"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("eval.test_per_class", "must be >= 1"));
        }
        if self.ood_samples == 0 {
            return Err(Error::config("eval.ood_samples", "must be >= 1"));
        }
        if !(self.tpr_target > 0.0 && self.tpr_target <= 1.0) {
            return Err(Error::config("eval.tpr_target", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Raw inputs for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalData {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    pub ood_x: Tensor,
    pub num_classes: usize,
}

impl EvalData {
    /// Draws with the child streams `eval/probe_train`, `eval/test` and
    /// `eval/ood`.
    pub fn draw(source: &Source, schedule: &DriftSchedule, t: u64, cfg: &EvalConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let train = sample_batch(
            source,
            schedule,
            t,
            cfg.probe_train_size,
            &rng.split("eval/probe_train"),
        )?;
        let (test_x, test_y) = sample_balanced(source, schedule, t, cfg.test_per_class, &rng.split("eval/test"))?;
        let ood_x = sample_ood_from(source, cfg.ood_samples, &rng.split("eval/ood"))?;
        Ok(EvalData {
            train_x: train.features,
            train_y: train.class_ids,
            test_x,
            test_y,
            ood_x,
            num_classes: source.num_classes(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.train_y {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngleReport {
    pub intra: SplitValues,
    pub inter: SplitValues,
    pub id_ood: SplitValues,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OodReport {
    pub auroc: f64,
    pub fpr: f64,
    pub tpr_target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_counts: Vec<usize>,
    pub splits: Vec<Split>,
    pub angles: AngleReport,
    pub probe: ProbeReport,
    pub ood: OodReport,
}

/// Extracts features with the student encoder and runs every metric.
///
/// Centroids, angles and OOD scores use the balanced test set; the probe is
/// fitted on the drift-distributed training draw.
pub fn evaluate(pair: &ParamPair, data: &EvalData, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let train_f = extract_features(pair, &data.train_x)?;
    let test_f = extract_features(pair, &data.test_x)?;
    let ood_f = extract_features(pair, &data.ood_x)?;
    let class_counts = data.class_counts();
    let splits = cfg.thresholds().assign(&class_counts);

    let centroids = class_centroids(&test_f, &data.test_y, data.num_classes)?;
    let angles = AngleReport {
        intra: intra_compactness(&test_f, &data.test_y, &centroids, &splits)?,
        inter: inter_separability(&centroids, &splits)?,
        id_ood: id_ood_separability(&centroids, &ood_f, &splits)?,
    };
    let probe = linear_probe(&train_f, &data.train_y, &test_f, &data.test_y, &splits, &cfg.probe)?;
    let id_scores = ood_score(&test_f, &centroids)?;
    let ood_scores = ood_score(&ood_f, &centroids)?;
    let ood = OodReport {
        auroc: auroc(&id_scores, &ood_scores)?,
        fpr: fpr_at_tpr(&id_scores, &ood_scores, cfg.tpr_target)?,
        tpr_target: cfg.tpr_target,
    };
    Ok(EvalReport {
        class_counts,
        splits,
        angles,
        probe,
        ood,
    })
}

impl EvalReport {
    fn split_metrics(&self) -> [(&'static str, &SplitValues); 4] {
        [
            ("probe_top1", &self.probe.top1),
            ("intra_deg", &self.angles.intra),
            ("inter_deg", &self.angles.inter),
            ("id_ood_deg", &self.angles.id_ood),
        ]
    }

    /// `metric,split,value`; splits without classes are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,split,value\n");
        for (name, v) in self.split_metrics() {
            for s in Split::ALL {
                if let Some(x) = v.get(s) {
                    writeln!(out, "{name},{},{x}", s.name()).expect("string write");
                }
            }
            writeln!(out, "{name},all,{}", v.all).expect("string write");
        }
        writeln!(out, "ood_auroc,all,{}", self.ood.auroc).expect("string write");
        writeln!(out, "ood_fpr,all,{}", self.ood.fpr).expect("string write");
        out
    }

    /// One JSON object keyed by metric name.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (name, v) in self.split_metrics() {
            map.insert(name.into(), serde_json::to_value(v).expect("serializable"));
        }
        map.insert("ood_auroc".into(), self.ood.auroc.into());
        map.insert("ood_fpr".into(), self.ood.fpr.into());
        map.insert("ood_tpr_target".into(), self.ood.tpr_target.into());
        map.insert("class_counts".into(), serde_json::json!(self.class_counts));
        map.insert(
            "splits".into(),
            serde_json::to_value(&self.splits).expect("serializable"),
        );
        serde_json::Value::Object(map)
    }

    /// The headline numbers kept in run manifests.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "probe_top1_all": self.probe.top1.all,
            "probe_top1_few": self.probe.top1.few,
            "intra_deg_all": self.angles.intra.all,
            "inter_deg_all": self.angles.inter.all,
            "id_ood_deg_all": self.angles.id_ood.all,
            "ood_auroc": self.ood.auroc,
            "ood_fpr": self.ood.fpr,
        })
    }
}
