use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::optim::{AdamW, OptimConfig};
use super::{form_views, window_loss, WindowConfig};
use crate::error::{Error, Result};
use crate::model::{ema_update, init_params, save_checkpoint, HeadSpec, MlpSpec, ParamPair};
use crate::numkern::{kernels, Graph, Rng};
use crate::stream::{augment_pair, AugConfig, DriftSchedule, Source, StreamBatch, StreamCursor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub window: WindowConfig,
    pub optim: OptimConfig,
    pub aug: AugConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.optim.validate()?;
        self.aug.validate()
    }
}

/// Identifies a step in error reports.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub step: u64,
    pub config_hash: &'a str,
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub lambda: f64,
    pub window: usize,
    /// Largest `|Σ_j A_ij − 1|` over both attention matrices (0 when the
    /// intervention is off).
    pub max_row_sum_error: f64,
}

fn training_error(ctx: StepContext<'_>, reason: impl Into<String>) -> Error {
    Error::Training {
        step: ctx.step,
        config_hash: ctx.config_hash.to_string(),
        reason: reason.into(),
    }
}

/// One optimization step on a window.
///
/// augment → views → intervention → InfoNCE → backprop into the student
/// encoder and head → teacher EMA from the pre-step student → AdamW.
pub fn train_step(
    pair: &mut ParamPair,
    opt: &mut AdamW,
    batch: &StreamBatch,
    cfg: &TrainConfig,
    rng: &Rng,
    ctx: StepContext<'_>,
) -> Result<StepReport> {
    if batch.len() != cfg.window.window_size {
        return Err(Error::Contract(format!(
            "batch of {} samples for a window of {}",
            batch.len(),
            cfg.window.window_size
        )));
    }
    let (view_a, view_b) = augment_pair(batch, &cfg.aug, rng)?;

    let mut g = Graph::new();
    let bound = pair.bind(&mut g);
    let views = form_views(pair, &mut g, &bound, &view_a, &view_b)?;
    let wl = window_loss(&mut g, &views, &cfg.window)?;
    let loss = g.value(wl.loss).item()?;
    if !loss.is_finite() {
        return Err(training_error(ctx, format!("non-finite loss {loss}")));
    }
    let mut max_row_sum_error = 0.0f64;
    if let Some(iv) = wl.intervened {
        for a in [iv.a1, iv.a2] {
            for s in kernels::row_sums(g.value(a)) {
                max_row_sum_error = max_row_sum_error.max((s - 1.0).abs());
            }
        }
    }

    let grads = g.backward(wl.loss)?;
    let mut flat = Vec::with_capacity(bound.encoder.len() + bound.head.len());
    for &v in bound.encoder.iter().chain(&bound.head) {
        let t = grads.get_or_zeros(v, g.value(v).shape());
        if !t.is_finite() {
            return Err(training_error(ctx, "non-finite gradient"));
        }
        flat.push(t);
    }

    let lr = cfg.optim.lr_at(ctx.step);
    let lambda = pair.momentum();
    ema_update(pair, lambda)?;
    opt.step(pair.trainable_mut(), &flat, lr)?;

    Ok(StepReport {
        step: ctx.step,
        loss,
        lr,
        lambda,
        window: cfg.window.window_size,
        max_row_sum_error,
    })
}

/// Parameters, optimizer state and step counter of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub pair: ParamPair,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub config_hash: String,
    pub step: u64,
}

impl Trainer {
    pub fn new(pair: ParamPair, cfg: TrainConfig, config_hash: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.optim.clone(), pair.student().iter().chain(pair.head()));
        Ok(Trainer {
            pair,
            opt,
            cfg,
            config_hash: config_hash.into(),
            step: 0,
        })
    }

    pub fn step(&mut self, batch: &StreamBatch, rng: &Rng) -> Result<StepReport> {
        let ctx = StepContext {
            step: self.step,
            config_hash: &self.config_hash,
        };
        let report = train_step(&mut self.pair, &mut self.opt, batch, &self.cfg, rng, ctx)?;
        self.step += 1;
        Ok(report)
    }
}

/// Where and how often checkpoints are written. `pattern` must contain
/// `{step}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub pattern: String,
    /// 0 writes only the final checkpoint.
    pub every: u64,
}

impl CheckpointPlan {
    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(self.pattern.replace("{step}", &format!("{step:06}")))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub source: Source,
    pub schedule: DriftSchedule,
    pub samples_per_step: usize,
    pub encoder: MlpSpec,
    pub head: HeadSpec,
    pub momentum: f64,
    pub train: TrainConfig,
    pub steps: u64,
    pub checkpoint: Option<CheckpointPlan>,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub pair: ParamPair,
    pub trace: Vec<StepReport>,
    /// Every checkpoint written, in order; the last one is the final state.
    pub checkpoints: Vec<PathBuf>,
}

fn checkpoint_meta(cfg: &PretrainConfig, seed: u64, step: u64) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.config_hash,
        "seed": seed,
        "step": step,
        "window": cfg.train.window.window_size,
        "temperature": cfg.train.window.temperature,
        "intervention": cfg.train.window.intervention,
    })
}

/// Runs `cfg.steps` windows of a seeded stream from fresh parameters.
///
/// Random streams: `model` for initialization, `stream` for the data and
/// `aug/step/{i}` for the augmentations of step `i`.
pub fn pretrain(cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.train.validate()?;
    let root = Rng::new(seed);
    let pair = init_params(&cfg.encoder, &cfg.head, cfg.momentum, &root.split("model"))?;
    let mut trainer = Trainer::new(pair, cfg.train.clone(), cfg.config_hash.clone())?;
    let mut cursor = StreamCursor::new(
        cfg.source.clone(),
        cfg.schedule.clone(),
        cfg.samples_per_step,
        &root.split("stream"),
    )?;
    if let Some(plan) = &cfg.checkpoint {
        fs::create_dir_all(&plan.dir).map_err(|e| Error::io(&plan.dir, e))?;
    }

    let mut trace = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoints = Vec::new();
    for i in 0..cfg.steps {
        let batch = cursor.next_window(cfg.train.window.window_size)?;
        trace.push(trainer.step(&batch, &root.split_index("aug/step", i))?);
        if let Some(plan) = &cfg.checkpoint {
            let done = i + 1;
            if plan.every > 0 && done % plan.every == 0 && done != cfg.steps {
                let path = plan.path_for(done);
                save_checkpoint(&path, &trainer.pair, &checkpoint_meta(cfg, seed, done))?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(plan) = &cfg.checkpoint {
        let path = plan.path_for(cfg.steps);
        save_checkpoint(&path, &trainer.pair, &checkpoint_meta(cfg, seed, cfg.steps))?;
        checkpoints.push(path);
    }
    Ok(PretrainOutcome {
        pair: trainer.pair,
        trace,
        checkpoints,
    })
}

/// `step,loss,lr,lambda,window`, one row per step.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[StepReport]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,loss,lr,lambda,window\n");
    for r in trace {
        writeln!(out, "{},{},{},{},{}", r.step, r.loss, r.lr, r.lambda, r.window).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::stream::{MixtureConfig, SourceModel};

    pub(crate) fn small_config(window: usize, steps: u64) -> PretrainConfig {
        let mix = MixtureConfig {
            num_classes: 4,
            dim: 8,
            ood_classes: 1,
            mean_spread: 2.0,
            ..MixtureConfig::default()
        };
        let source = SourceModel::generate(&mix, &Rng::new(11)).unwrap();
        PretrainConfig {
            source: Source::Mixture(source),
            schedule: DriftSchedule::Stationary,
            samples_per_step: window,
            encoder: MlpSpec::new(vec![8, 16, 8], Activation::Relu).unwrap(),
            head: HeadSpec {
                embed: 8,
                hidden: 16,
                activation: Activation::Relu,
            },
            momentum: 0.99,
            train: TrainConfig {
                window: WindowConfig::new(window),
                optim: OptimConfig {
                    base_lr: 1e-2,
                    ..OptimConfig::for_run(steps, window)
                },
                aug: AugConfig::default(),
            },
            steps,
            checkpoint: None,
            config_hash: "test".into(),
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = small_config(8, 0);
        let out = pretrain(&cfg, 3).unwrap();
        assert!(out.trace.is_empty());
        let init = init_params(&cfg.encoder, &cfg.head, cfg.momentum, &Rng::new(3).split("model")).unwrap();
        assert_eq!(out.pair, init);
    }

    #[test]
    fn zero_lr_only_moves_teacher() {
        let mut cfg = small_config(8, 3);
        cfg.train.optim.base_lr = 0.0;
        let init = init_params(&cfg.encoder, &cfg.head, cfg.momentum, &Rng::new(5).split("model")).unwrap();
        let out = pretrain(&cfg, 5).unwrap();
        assert_eq!(out.pair.student(), init.student());
        assert_eq!(out.pair.head(), init.head());
        // Teacher equals the student already, so EMA leaves it in place too.
        assert_eq!(out.pair.teacher(), init.teacher());
    }

    #[test]
    fn wrong_batch_size_is_rejected() {
        let cfg = small_config(8, 1);
        let pair = init_params(&cfg.encoder, &cfg.head, 0.9, &Rng::new(0)).unwrap();
        let mut trainer = Trainer::new(pair, cfg.train.clone(), "h").unwrap();
        let mut cursor = StreamCursor::new(cfg.source.clone(), cfg.schedule.clone(), 8, &Rng::new(0)).unwrap();
        let batch = cursor.next_window(5).unwrap();
        assert!(trainer.step(&batch, &Rng::new(0)).is_err());
    }

    #[test]
    fn row_sums_stay_stochastic() {
        let out = pretrain(&small_config(16, 5), 9).unwrap();
        for r in &out.trace {
            assert!(r.max_row_sum_error < 1e-10);
            assert!(r.loss.is_finite());
        }
    }

    #[test]
    fn checkpoint_plan_writes_periodic_and_final() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(8, 5);
        cfg.checkpoint = Some(CheckpointPlan {
            dir: dir.path().to_path_buf(),
            pattern: "ck_{step}.rcpk".into(),
            every: 2,
        });
        let out = pretrain(&cfg, 1).unwrap();
        let names: Vec<_> = out
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["ck_000002.rcpk", "ck_000004.rcpk", "ck_000005.rcpk"]);
        let ck = crate::model::load_checkpoint(&out.checkpoints[2]).unwrap();
        assert_eq!(ck.pair, out.pair);
        assert_eq!(ck.meta["step"], 5);
    }
}
