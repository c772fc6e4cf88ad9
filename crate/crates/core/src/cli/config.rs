//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [stream]
//! num_classes = 10
//! dim = 32
//! samples_per_step = 64
//! horizon = 4000
//! schedule = { kind = "tailed", imbalance_ratio = 100.0, ramp_steps = 1000 }
//!
//! [rcp]
//! window_size = 256
//! ```
//!
//! Everything except `rcp.window_size` has a default. Unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{Activation, HeadSpec, MlpSpec};
use crate::numkern::{Rng, Tensor};
use crate::rcp::{CheckpointPlan, OptimConfig, PretrainConfig, TrainConfig, WindowConfig};
use crate::stream::{
    load_idx, AugConfig, DriftSchedule, LabeledDataset, MeanTransform, MixtureConfig, Source, SourceModel,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub stream: StreamSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub rcp: RcpSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub num_classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub mean_spread: f64,
    pub ood_classes: usize,
    pub separation: f64,
    pub samples_per_step: usize,
    /// Number of stream timestamps available for training.
    pub horizon: u64,
    pub schedule: ScheduleSection,
    pub augment: AugSection,
    /// Read samples from IDX files instead of the synthetic mixture.
    pub idx: Option<IdxSection>,
}

impl Default for StreamSection {
    fn default() -> Self {
        let mix = MixtureConfig::default();
        StreamSection {
            num_classes: mix.num_classes,
            dim: mix.dim,
            sigma: mix.sigma,
            mean_spread: mix.mean_spread,
            ood_classes: mix.ood_classes,
            separation: mix.separation,
            samples_per_step: 64,
            horizon: 4000,
            schedule: ScheduleSection::Stationary,
            augment: AugSection::default(),
            idx: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Labels held out of the stream and used as OOD samples.
    #[serde(default)]
    pub ood_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Stationary,
    Tailed {
        imbalance_ratio: f64,
        ramp_steps: u64,
    },
    Sudden {
        switch_step: u64,
        transform: TransformSection,
    },
    Gradual {
        start_step: u64,
        end_step: u64,
        transform: TransformSection,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSection {
    Identity,
    Cycle { by: usize },
    Translate { offset: Vec<f64> },
    Replace { means: Vec<Vec<f64>> },
}

impl TransformSection {
    fn build(&self) -> Result<MeanTransform> {
        Ok(match self {
            TransformSection::Identity => MeanTransform::Identity,
            TransformSection::Cycle { by } => MeanTransform::Cycle { by: *by },
            TransformSection::Translate { offset } => MeanTransform::Translate { offset: offset.clone() },
            TransformSection::Replace { means } => MeanTransform::Replace {
                means: Tensor::from_rows(means)
                    .map_err(|e| Error::config("stream.schedule.transform.means", e.to_string()))?,
            },
        })
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<DriftSchedule> {
        Ok(match self {
            ScheduleSection::Stationary => DriftSchedule::Stationary,
            ScheduleSection::Tailed {
                imbalance_ratio,
                ramp_steps,
            } => DriftSchedule::Tailed {
                imbalance_ratio: *imbalance_ratio,
                ramp_steps: *ramp_steps,
            },
            ScheduleSection::Sudden { switch_step, transform } => DriftSchedule::Sudden {
                switch_step: *switch_step,
                post_transform: transform.build()?,
            },
            ScheduleSection::Gradual {
                start_step,
                end_step,
                transform,
            } => DriftSchedule::Gradual {
                start_step: *start_step,
                end_step: *end_step,
                target: transform.build()?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSection {
    pub noise_sigma: f64,
    pub scale_range: [f64; 2],
    pub mask_prob: f64,
}

impl Default for AugSection {
    fn default() -> Self {
        let a = AugConfig::default();
        AugSection {
            noise_sigma: a.noise_sigma,
            scale_range: [a.scale_range.0, a.scale_range.1],
            mask_prob: a.mask_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden widths of the encoder between the input and `embed`.
    pub hidden: Vec<usize>,
    pub embed: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![128],
            embed: 64,
            head_hidden: 128,
            activation: Activation::Relu,
            momentum: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RcpSection {
    /// Required.
    pub window_size: Option<usize>,
    pub temperature: f64,
    pub qk_scale: bool,
    pub intervention: bool,
    /// Defaults to the matched sample budget `horizon · samples_per_step / W`.
    pub steps: Option<u64>,
}

impl Default for RcpSection {
    fn default() -> Self {
        let w = WindowConfig::new(1);
        RcpSection {
            window_size: None,
            temperature: w.temperature,
            qk_scale: w.qk_scale,
            intervention: w.intervention,
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// Learning rate at a window of 256; scaled linearly with the window.
    pub lr_per_256: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_frac: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::for_run(0, OptimConfig::REFERENCE_WINDOW);
        OptimSection {
            lr_per_256: o.base_lr,
            betas: [o.betas.0, o.betas.1],
            weight_decay: o.weight_decay,
            eps: o.eps,
            warmup_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
    /// Checkpoint read by `eval` and `export-features`; defaults to the
    /// final checkpoint `pretrain` writes into `out_dir`.
    pub checkpoint: Option<PathBuf>,
    /// Intermediate checkpoint period in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub checkpoint_pattern: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            checkpoint_every: 0,
            checkpoint_pattern: "checkpoint_{step}.rcpk".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    /// Window sizes compared by `ablate-window`; defaults to `rcp.window_size`.
    pub windows: Vec<usize>,
    /// Seeds per window; defaults to the run seed.
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<document>".to_string() } else { path };
            Error::config(key, e.into_inner().to_string().trim())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn window_size(&self) -> Result<usize> {
        match self.rcp.window_size {
            Some(w) if w >= 1 => Ok(w),
            Some(_) => Err(Error::config("rcp.window_size", "must be >= 1")),
            None => Err(Error::config("rcp.window_size", "required key is missing")),
        }
    }

    /// SHA-256 over the canonical JSON form (sorted keys, defaults filled in).
    /// The output directory is excluded so a run can be replayed elsewhere.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.io.out_dir = PathBuf::new();
        let value = serde_json::to_value(&canon).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.window_size()?;
        let s = &self.stream;
        if s.samples_per_step == 0 {
            return Err(Error::config("stream.samples_per_step", "must be >= 1"));
        }
        if s.horizon == 0 {
            return Err(Error::config("stream.horizon", "must be >= 1"));
        }
        if !self.io.checkpoint_pattern.contains("{step}") {
            return Err(Error::config("io.checkpoint_pattern", "must contain `{step}`"));
        }
        if !(0.0..1.0).contains(&self.optim.warmup_frac) {
            return Err(Error::config("optim.warmup_frac", "must lie in [0, 1)"));
        }
        if self.ablate.windows.contains(&0) {
            return Err(Error::config("ablate.windows", "window sizes must be >= 1"));
        }
        self.eval.validate()
    }

    pub fn aug(&self) -> AugConfig {
        let a = &self.stream.augment;
        AugConfig {
            noise_sigma: a.noise_sigma,
            scale_range: (a.scale_range[0], a.scale_range[1]),
            mask_prob: a.mask_prob,
        }
    }

    /// Synthetic mixture (child stream `source` of the run seed) or IDX data.
    pub fn build_source(&self, seed: u64) -> Result<Source> {
        let s = &self.stream;
        match &s.idx {
            Some(idx) => {
                let (x, y) = load_idx(&idx.images, &idx.labels)?;
                Ok(Source::Dataset(LabeledDataset::new(x, y, &idx.ood_labels)?))
            }
            None => {
                let mix = MixtureConfig {
                    num_classes: s.num_classes,
                    dim: s.dim,
                    sigma: s.sigma,
                    mean_spread: s.mean_spread,
                    ood_classes: s.ood_classes,
                    separation: s.separation,
                };
                Ok(Source::Mixture(SourceModel::generate(
                    &mix,
                    &Rng::new(seed).split("source"),
                )?))
            }
        }
    }

    fn steps_for(&self, window: usize) -> u64 {
        self.rcp
            .steps
            .unwrap_or_else(|| (self.stream.horizon * self.stream.samples_per_step as u64 / window as u64).max(1))
    }

    /// Everything `pretrain` needs, with `window` in place of
    /// `rcp.window_size`.
    pub fn pretrain_config(
        &self,
        source: Source,
        window: usize,
        checkpoint_dir: Option<&Path>,
    ) -> Result<PretrainConfig> {
        self.validate()?;
        let schedule = self.stream.schedule.build()?;
        schedule.validate(self.stream.horizon)?;
        source.supports(&schedule)?;
        let m = &self.model;
        let mut widths = vec![source.dim()];
        widths.extend(&m.hidden);
        widths.push(m.embed);
        let encoder = MlpSpec::new(widths, m.activation)?;
        let head = HeadSpec {
            embed: m.embed,
            hidden: m.head_hidden,
            activation: m.activation,
        };
        let steps = self.steps_for(window);
        let o = &self.optim;
        let optim = OptimConfig {
            base_lr: OptimConfig::scaled_lr(o.lr_per_256, window),
            betas: (o.betas[0], o.betas[1]),
            weight_decay: o.weight_decay,
            eps: o.eps,
            warmup_steps: (steps as f64 * o.warmup_frac) as u64,
            total_steps: steps,
        };
        let window_cfg = WindowConfig {
            window_size: window,
            temperature: self.rcp.temperature,
            qk_scale: self.rcp.qk_scale,
            intervention: self.rcp.intervention,
        };
        let train = TrainConfig {
            window: window_cfg,
            optim,
            aug: self.aug(),
        };
        train.validate()?;
        Ok(PretrainConfig {
            source,
            schedule,
            samples_per_step: self.stream.samples_per_step,
            encoder,
            head,
            momentum: m.momentum,
            train,
            steps,
            checkpoint: checkpoint_dir.map(|dir| CheckpointPlan {
                dir: dir.to_path_buf(),
                pattern: self.io.checkpoint_pattern.clone(),
                every: self.io.checkpoint_every,
            }),
            config_hash: self.hash(),
        })
    }

    /// Step whose distribution the evaluation draws from.
    pub fn eval_step(&self) -> u64 {
        self.eval.step.unwrap_or(self.stream.horizon.saturating_sub(1))
    }

    pub fn ablation_windows(&self) -> Result<Vec<usize>> {
        if self.ablate.windows.is_empty() {
            Ok(vec![self.window_size()?])
        } else {
            Ok(self.ablate.windows.clone())
        }
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablate.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablate.seeds.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
seed = 3
[stream]
num_classes = 4
dim = 8
samples_per_step = 8
horizon = 20
schedule = { kind = "tailed", imbalance_ratio = 10.0, ramp_steps = 5 }
[rcp]
window_size = 8
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml(SMOKE).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.window_size().unwrap(), 8);
        assert_eq!(c.model, ModelSection::default());
        assert_eq!(c.steps_for(8), 20);
        assert_eq!(c.steps_for(16), 10);
    }

    #[test]
    fn missing_window_names_the_key() {
        let c = RunConfig::from_toml("seed = 1\n").unwrap();
        let err = c.validate().unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "rcp.window_size"),
            "{err}"
        );
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml("[rcp]\nwindow_size = 4\nwindow_szie = 3\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "rcp.window_szie"),
            "{err}"
        );
        let err = RunConfig::from_toml("[stream]\nschedule = { kind = \"tailed\", ratio = 3.0, ramp_steps = 1 }\n")
            .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn type_errors_carry_the_path() {
        let err = RunConfig::from_toml("[model]\nembed = \"wide\"\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "model.embed"),
            "{err}"
        );
    }

    #[test]
    fn hash_ignores_layout_and_out_dir() {
        let reordered = r#"
[rcp]
window_size   = 8

[stream]
horizon = 20
dim = 8
schedule = { ramp_steps = 5, imbalance_ratio = 10.0, kind = "tailed" }
samples_per_step = 8
num_classes = 4

[io]
out_dir = "elsewhere"
"#;
        let a = RunConfig::from_toml(SMOKE).unwrap();
        let mut b = RunConfig::from_toml(reordered).unwrap();
        b.seed = 3;
        assert_eq!(a.hash(), b.hash());
        b.rcp.temperature = 0.3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn schedules_and_transforms_build() {
        let c = RunConfig::from_toml(
            "[stream]\nschedule = { kind = \"gradual\", start_step = 2, end_step = 9, transform = { kind = \"cycle\", by = 1 } }\n",
        )
        .unwrap();
        assert_eq!(
            c.stream.schedule.build().unwrap(),
            DriftSchedule::Gradual {
                start_step: 2,
                end_step: 9,
                target: MeanTransform::Cycle { by: 1 }
            }
        );
    }
}
