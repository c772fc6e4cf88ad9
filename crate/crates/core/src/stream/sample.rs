use super::schedule::{class_probs, DriftSchedule};
use super::source::{Source, SourceModel};
use crate::error::{Error, Result};
use crate::numkern::{Rng, Tensor};

/// Snapshot of the generating distribution, kept for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftState {
    pub class_probs: Vec<f64>,
    pub transform: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub features: Tensor,
    /// Ground truth; never reaches the contrastive loss.
    pub class_ids: Vec<usize>,
    pub timestamp: u64,
    pub drift_state: DriftState,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Draws `n` samples from the distribution in force at step `t`.
pub fn sample_batch(source: &Source, schedule: &DriftSchedule, t: u64, n: usize, rng: &Rng) -> Result<StreamBatch> {
    source.supports(schedule)?;
    let probs = class_probs(schedule, source.num_classes(), t)?;
    let means = match source {
        Source::Mixture(m) => Some(m.active_means(schedule, t)?),
        Source::Dataset(_) => None,
    };
    let mut rng = rng.clone();
    let mut data = Vec::with_capacity(n * source.dim());
    let mut class_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.categorical(probs.data());
        source.draw(c, means.as_ref(), &mut rng, &mut data);
        class_ids.push(c);
    }
    Ok(StreamBatch {
        features: Tensor::matrix(n, source.dim(), data)?,
        class_ids,
        timestamp: t,
        drift_state: DriftState {
            class_probs: probs.into_data(),
            transform: schedule.active_transform(t),
        },
    })
}

/// Reads a stream in windows of arbitrary length.
///
/// Step `t` contributes `samples_per_step` samples drawn with the child
/// stream `stream/step/{t}`, so the sample sequence does not depend on how
/// it is later cut into windows.
#[derive(Clone, Debug)]
pub struct StreamCursor {
    source: Source,
    schedule: DriftSchedule,
    samples_per_step: usize,
    rng: Rng,
    step: u64,
    buffer: Option<StreamBatch>,
    offset: usize,
}

impl StreamCursor {
    pub fn new(source: Source, schedule: DriftSchedule, samples_per_step: usize, rng: &Rng) -> Result<Self> {
        if samples_per_step == 0 {
            return Err(Error::config("stream.samples_per_step", "must be >= 1"));
        }
        source.supports(&schedule)?;
        Ok(StreamCursor {
            source,
            schedule,
            samples_per_step,
            rng: rng.clone(),
            step: 0,
            buffer: None,
            offset: 0,
        })
    }

    pub fn source(&self) -> &Source {
        &self.source
    }

    pub fn schedule(&self) -> &DriftSchedule {
        &self.schedule
    }

    /// Step index of the next unread sample.
    pub fn position(&self) -> u64 {
        self.step
    }

    /// Next `n` samples, spanning as many stream steps as needed.
    pub fn next_window(&mut self, n: usize) -> Result<StreamBatch> {
        let first_step = self.step;
        let mut parts = Vec::new();
        let mut ids = Vec::with_capacity(n);
        let mut state = None;
        let mut remaining = n;
        while remaining > 0 {
            if self.buffer.is_none() {
                let rng = self.rng.split_index("stream/step", self.step);
                self.buffer = Some(sample_batch(
                    &self.source,
                    &self.schedule,
                    self.step,
                    self.samples_per_step,
                    &rng,
                )?);
                self.offset = 0;
            }
            let buf = self.buffer.as_ref().expect("filled above");
            let take = remaining.min(buf.len() - self.offset);
            let rows: Vec<usize> = (self.offset..self.offset + take).collect();
            parts.push(buf.features.select_rows(&rows));
            ids.extend_from_slice(&buf.class_ids[self.offset..self.offset + take]);
            state = Some(buf.drift_state.clone());
            self.offset += take;
            remaining -= take;
            if self.offset == buf.len() {
                self.buffer = None;
                self.step += 1;
            }
        }
        let features = if parts.is_empty() {
            Tensor::zeros(vec![0, self.source.dim()])
        } else {
            Tensor::vstack(&parts)?
        };
        let drift_state = match state {
            Some(s) => s,
            None => DriftState {
                class_probs: class_probs(&self.schedule, self.source.num_classes(), first_step)?.into_data(),
                transform: self.schedule.active_transform(first_step),
            },
        };
        Ok(StreamBatch {
            features,
            class_ids: ids,
            timestamp: first_step,
            drift_state,
        })
    }
}

/// Vector-space augmentation: `mask ⊙ (scale · x + noise)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub noise_sigma: f64,
    pub scale_range: (f64, f64),
    pub mask_prob: f64,
}

impl AugConfig {
    pub fn identity() -> Self {
        AugConfig {
            noise_sigma: 0.0,
            scale_range: (1.0, 1.0),
            mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("stream.augment.noise_sigma", "must be >= 0"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::config(
                "stream.augment.scale_range",
                format!("need 0 < lo <= 1 <= hi, got [{lo}, {hi}]"),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::config("stream.augment.mask_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            noise_sigma: 0.5,
            scale_range: (0.8, 1.2),
            mask_prob: 0.2,
        }
    }
}

fn augment_view(x: &Tensor, cfg: &AugConfig, mut rng: Rng) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let scale = rng.uniform_in(cfg.scale_range.0, cfg.scale_range.1);
        for &v in x.row(i) {
            let noise = cfg.noise_sigma * rng.normal();
            let keep = rng.uniform() >= cfg.mask_prob;
            out.push(if keep { scale * v + noise } else { 0.0 });
        }
    }
    Tensor::from_raw(vec![n, d], out)
}

/// Two independently augmented views of the same batch.
pub fn augment_pair(batch: &StreamBatch, cfg: &AugConfig, rng: &Rng) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let a = augment_view(&batch.features, cfg, rng.split("aug/view_a"));
    let b = augment_view(&batch.features, cfg, rng.split("aug/view_b"));
    Ok((a, b))
}

/// `n` draws around the OOD centres (uniform over centres).
pub fn sample_ood(source: &SourceModel, n: usize, rng: &Rng) -> Result<Tensor> {
    let k = source.ood_means().rows();
    let d = source.dim();
    if n == 0 {
        return Ok(Tensor::zeros(vec![0, d]));
    }
    if k == 0 {
        return Err(Error::config("stream.ood_classes", "must be >= 1 to draw OOD samples"));
    }
    let sigma = source.max_sigma();
    let mut rng = rng.clone();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let j = rng.below(k);
        data.extend(source.ood_means().row(j).iter().map(|&m| m + sigma * rng.normal()));
    }
    Tensor::matrix(n, d, data)
}

/// OOD draws for any source; file-backed sources resample their held-out pool.
pub fn sample_ood_from(source: &Source, n: usize, rng: &Rng) -> Result<Tensor> {
    match source {
        Source::Mixture(m) => sample_ood(m, n, rng),
        Source::Dataset(ds) => {
            let pool = ds.ood_pool();
            if n == 0 {
                return Ok(Tensor::zeros(vec![0, ds.dim()]));
            }
            if pool.rows() == 0 {
                return Err(Error::config(
                    "stream.ood_labels",
                    "no held-out labels to draw OOD samples from",
                ));
            }
            let mut rng = rng.clone();
            let idx: Vec<usize> = (0..n).map(|_| rng.below(pool.rows())).collect();
            Ok(pool.select_rows(&idx))
        }
    }
}

/// `per_class` samples of every class at step `t`, grouped by class.
pub fn sample_balanced(
    source: &Source,
    schedule: &DriftSchedule,
    t: u64,
    per_class: usize,
    rng: &Rng,
) -> Result<(Tensor, Vec<usize>)> {
    source.supports(schedule)?;
    let means = match source {
        Source::Mixture(m) => Some(m.active_means(schedule, t)?),
        Source::Dataset(_) => None,
    };
    let mut rng = rng.clone();
    let c = source.num_classes();
    let mut data = Vec::with_capacity(c * per_class * source.dim());
    let mut labels = Vec::with_capacity(c * per_class);
    for class in 0..c {
        for _ in 0..per_class {
            source.draw(class, means.as_ref(), &mut rng, &mut data);
            labels.push(class);
        }
    }
    Ok((Tensor::matrix(labels.len(), source.dim(), data)?, labels))
}
