use super::schedule::{class_probs, DriftSchedule};
use crate::error::{Error, Result};
use crate::numkern::{Rng, Tensor};

/// Separation every pair of means must exceed, in units of the largest
/// class standard deviation.
pub const SEPARATION_MARGIN: f64 = 4.0;

/// Isotropic Gaussian mixture with a disjoint set of OOD centres.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceModel {
    means: Tensor,
    sigmas: Vec<f64>,
    ood_means: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Standard deviation of each mean coordinate.
    pub mean_spread: f64,
    pub ood_classes: usize,
    /// Minimum centre distance in units of `sigma`; must exceed
    /// [`SEPARATION_MARGIN`].
    pub separation: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            num_classes: 10,
            dim: 32,
            sigma: 1.0,
            mean_spread: 1.0,
            ood_classes: 4,
            separation: 4.5,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl SourceModel {
    pub fn new(means: Tensor, sigmas: Vec<f64>, ood_means: Tensor) -> Result<Self> {
        let (c, d) = means.require_matrix("source means")?;
        let (_, d_ood) = ood_means.require_matrix("ood means")?;
        if c < 2 {
            return Err(Error::config("stream.num_classes", "need at least 2 classes"));
        }
        if d_ood != d {
            return Err(Error::shape("source model", means.shape(), ood_means.shape()));
        }
        if sigmas.len() != c || sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("stream.sigma", "need one positive sigma per class"));
        }
        let bound = SEPARATION_MARGIN * sigmas.iter().copied().fold(0.0, f64::max);
        for i in 0..c {
            for j in i + 1..c {
                let dij = dist(means.row(i), means.row(j));
                if dij <= bound {
                    return Err(Error::config(
                        "stream.mean_spread",
                        format!("class means {i} and {j} are {dij:.3} apart, need > {bound:.3}"),
                    ));
                }
            }
            for k in 0..ood_means.rows() {
                let dik = dist(means.row(i), ood_means.row(k));
                if dik <= bound {
                    return Err(Error::config(
                        "stream.mean_spread",
                        format!("OOD centre {k} is {dik:.3} from class {i}, need > {bound:.3}"),
                    ));
                }
            }
        }
        Ok(SourceModel {
            means,
            sigmas,
            ood_means,
        })
    }

    /// Draws centres from `N(0, spread²·I)` by rejection until every
    /// pairwise (and ID-to-OOD) distance exceeds `separation · sigma`.
    pub fn generate(cfg: &MixtureConfig, rng: &Rng) -> Result<Self> {
        if cfg.separation <= SEPARATION_MARGIN {
            return Err(Error::config(
                "stream.separation",
                format!("must exceed {SEPARATION_MARGIN}, got {}", cfg.separation),
            ));
        }
        if cfg.dim == 0 {
            return Err(Error::config("stream.dim", "must be >= 1"));
        }
        let need = cfg.separation * cfg.sigma;
        let mut rng = rng.split("source/means");
        let mut placed: Vec<Vec<f64>> = Vec::new();
        let total = cfg.num_classes + cfg.ood_classes;
        let mut attempts = 0usize;
        while placed.len() < total {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::config(
                    "stream.mean_spread",
                    "could not place well-separated class centres; increase mean_spread",
                ));
            }
            let cand: Vec<f64> = (0..cfg.dim).map(|_| cfg.mean_spread * rng.normal()).collect();
            // OOD centres only need distance from the ID centres.
            let checked = placed.len().min(cfg.num_classes);
            if placed[..checked].iter().all(|p| dist(p, &cand) > need) {
                placed.push(cand);
            }
        }
        let ood: Vec<Vec<f64>> = placed.split_off(cfg.num_classes);
        let means = Tensor::from_rows(&placed)?;
        let ood_means = if ood.is_empty() {
            Tensor::zeros(vec![0, cfg.dim])
        } else {
            Tensor::from_rows(&ood)?
        };
        SourceModel::new(means, vec![cfg.sigma; cfg.num_classes], ood_means)
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn ood_means(&self) -> &Tensor {
        &self.ood_means
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigmas.iter().copied().fold(0.0, f64::max)
    }

    /// Class means in force at step `t`.
    pub fn active_means(&self, schedule: &DriftSchedule, t: u64) -> Result<Tensor> {
        match schedule {
            DriftSchedule::Sudden {
                switch_step,
                post_transform,
            } if t >= *switch_step => post_transform.apply(&self.means),
            DriftSchedule::Gradual { target, .. } => {
                let s = schedule.gradual_fraction(t);
                let end = target.apply(&self.means)?;
                let data = self
                    .means
                    .data()
                    .iter()
                    .zip(end.data())
                    .map(|(a, b)| (1.0 - s) * a + s * b)
                    .collect();
                Tensor::new(self.means.shape().to_vec(), data)
            }
            _ => Ok(self.means.clone()),
        }
    }
}

/// A labeled feature table sampled class-first, so a drift schedule can
/// reshape its class frequencies.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    ood: Tensor,
}

impl LabeledDataset {
    /// Rows whose label is in `ood_labels` are set aside as the OOD pool;
    /// the remaining labels are renumbered densely in ascending order.
    pub fn new(features: Tensor, labels: Vec<usize>, ood_labels: &[usize]) -> Result<Self> {
        let (n, d) = features.require_matrix("dataset")?;
        if labels.len() != n {
            return Err(Error::shape("dataset labels", features.shape(), &[labels.len()]));
        }
        if n == 0 {
            return Err(Error::config("stream.idx.images", "dataset is empty"));
        }
        let mut kept: Vec<usize> = labels.iter().copied().filter(|l| !ood_labels.contains(l)).collect();
        kept.sort_unstable();
        kept.dedup();
        let mut by_class = vec![Vec::new(); kept.len()];
        let mut id_rows = Vec::new();
        let mut id_labels = Vec::new();
        let mut ood_rows = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            if ood_labels.contains(l) {
                ood_rows.push(i);
            } else {
                let c = kept.binary_search(l).expect("label was collected above");
                by_class[c].push(id_rows.len());
                id_rows.push(i);
                id_labels.push(c);
            }
        }
        if kept.len() < 2 {
            return Err(Error::config(
                "stream.ood_labels",
                "fewer than 2 in-distribution classes remain",
            ));
        }
        let ood = if ood_rows.is_empty() {
            Tensor::zeros(vec![0, d])
        } else {
            features.select_rows(&ood_rows)
        };
        Ok(LabeledDataset {
            features: features.select_rows(&id_rows),
            labels: id_labels,
            by_class,
            ood,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ood_pool(&self) -> &Tensor {
        &self.ood
    }
}

/// Where stream samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Mixture(SourceModel),
    Dataset(LabeledDataset),
}

impl Source {
    pub fn num_classes(&self) -> usize {
        match self {
            Source::Mixture(m) => m.num_classes(),
            Source::Dataset(d) => d.num_classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Source::Mixture(m) => m.dim(),
            Source::Dataset(d) => d.dim(),
        }
    }

    /// File-backed sources have no mean geometry to move.
    pub fn supports(&self, schedule: &DriftSchedule) -> Result<()> {
        match (self, schedule) {
            (Source::Dataset(_), DriftSchedule::Sudden { .. } | DriftSchedule::Gradual { .. }) => Err(Error::config(
                "stream.drift",
                "file-backed streams support only stationary and tailed drift",
            )),
            _ => Ok(()),
        }
    }

    /// Draws one labeled sample of class `class` at step `t`.
    pub(crate) fn draw(&self, class: usize, means: Option<&Tensor>, rng: &mut Rng, out: &mut Vec<f64>) {
        match self {
            Source::Mixture(m) => {
                let mu = means.expect("mixture draws need active means").row(class);
                let sigma = m.sigmas[class];
                out.extend(mu.iter().map(|&v| v + sigma * rng.normal()));
            }
            Source::Dataset(d) => {
                let rows = &d.by_class[class];
                let pick = rows[rng.below(rows.len())];
                out.extend_from_slice(d.features.row(pick));
            }
        }
    }
}

/// Smallest step `t < horizon` at which the generating distribution changes,
/// with the L1 size of that change (class probabilities plus active means).
/// `None` means no consecutive pair differs by more than `tol`.
pub fn drift_witness(
    source: &SourceModel,
    schedule: &DriftSchedule,
    horizon: u64,
    tol: f64,
) -> Result<Option<(u64, f64)>> {
    let c = source.num_classes();
    let mut prev_p = class_probs(schedule, c, 0)?;
    let mut prev_m = source.active_means(schedule, 0)?;
    for t in 0..horizon {
        let p = class_probs(schedule, c, t + 1)?;
        let m = source.active_means(schedule, t + 1)?;
        let gap: f64 = prev_p
            .data()
            .iter()
            .zip(p.data())
            .chain(prev_m.data().iter().zip(m.data()))
            .map(|(a, b)| (a - b).abs())
            .sum();
        if gap > tol {
            return Ok(Some((t, gap)));
        }
        prev_p = p;
        prev_m = m;
    }
    Ok(None)
}
