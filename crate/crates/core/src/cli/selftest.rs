//! The invariant suite behind `driftlab selftest`.
//!
//! Every property is recomputed from scratch against a closed form or a
//! direct brute-force oracle.

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use crate::eval::{self, Split};
use crate::model::{ema_update, init_params, Activation, HeadSpec, MlpSpec, ParamPair};
use crate::numkern::{grad_check, kernels, Graph, Rng, Tensor, Var};
use crate::rcp::{check_window_gradients, info_nce, intervene, WindowConfig};
use crate::stream::{drift_witness, DriftSchedule, MeanTransform, MixtureConfig, SourceModel};

type Outcome = std::result::Result<String, String>;
type Property = (&'static str, Box<dyn Fn() -> Outcome>);
/// Schedule kind with its first witness step and gap, if any.
type WitnessRow = (&'static str, Option<(u64, f64)>);

/// Result of one property.
#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub outcome: Outcome,
    pub seconds: f64,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("finite draws")
}

fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    kernels::l2_normalize_rows(&random(rows, cols, rng), 1e-12)
        .expect("valid eps")
        .0
}

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `Σ op(x) ⊙ R` for a fixed random `R`, so every output coordinate
/// contributes to the gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    let r = g.constant(Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?);
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

const KERNEL_TOL: f64 = 1e-6;
const KERNEL_H: f64 = 1e-6;

fn kernel_check(op: impl Fn(&mut Graph, Var) -> crate::Result<Var>, x: &Tensor) -> Outcome {
    let err = grad_check(
        |g, x| {
            let y = op(g, x)?;
            weighted_sum(g, y, 99)
        },
        x,
        KERNEL_H,
    )
    .map_err(|e| e.to_string())?;
    require(err < KERNEL_TOL, format!("max rel err {err:.2e}"))
}

fn kernel_properties() -> Vec<Property> {
    let mut rng = Rng::new(1);
    let x = random(3, 4, &mut rng);
    let other = random(4, 2, &mut rng);
    let same = random(3, 4, &mut rng);
    let bias = Tensor::vector((0..4).map(|_| rng.normal()).collect()).expect("finite");
    // Keep inputs away from the ReLU kink.
    let relu_x = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });

    let x1 = x.clone();
    let x2 = x.clone();
    let x3 = x.clone();
    let x4 = x.clone();
    let x5 = x.clone();
    let x6 = x.clone();
    let x7 = x.clone();
    let x8 = x.clone();
    let x9 = x.clone();
    vec![
        (
            "grad.matmul",
            Box::new(move || {
                let b = other.clone();
                kernel_check(
                    move |g, x| {
                        let c = g.constant(b.clone());
                        g.matmul(x, c)
                    },
                    &x1,
                )
            }),
        ),
        (
            "grad.matmul_nt",
            Box::new(move || {
                let b = same.clone();
                kernel_check(
                    move |g, x| {
                        let c = g.constant(b.clone());
                        let y = g.matmul_nt(x, c)?;
                        let z = g.matmul_nt(x, x)?;
                        g.add(y, z)
                    },
                    &x2,
                )
            }),
        ),
        (
            "grad.add_row",
            Box::new(move || {
                let b = bias.clone();
                kernel_check(
                    move |g, x| {
                        let c = g.constant(b.clone());
                        let y = g.add_row(x, c)?;
                        Ok(g.tanh(y))
                    },
                    &x3,
                )
            }),
        ),
        (
            "grad.relu",
            Box::new(move || kernel_check(|g, x| Ok(g.relu(x)), &relu_x)),
        ),
        ("grad.tanh", Box::new(move || kernel_check(|g, x| Ok(g.tanh(x)), &x4))),
        (
            "grad.softmax_rows",
            Box::new(move || kernel_check(|g, x| g.softmax_rows(x), &x5)),
        ),
        (
            "grad.log_softmax_rows",
            Box::new(move || kernel_check(|g, x| g.log_softmax_rows(x), &x6)),
        ),
        (
            "grad.l2_normalize_rows",
            Box::new(move || kernel_check(|g, x| g.l2_normalize_rows(x, 1e-12), &x7)),
        ),
        (
            "grad.cross_entropy_rows",
            Box::new(move || {
                let err =
                    grad_check(|g, x| g.cross_entropy_rows(x, &[0, 3, 1]), &x8, KERNEL_H).map_err(|e| e.to_string())?;
                require(err < KERNEL_TOL, format!("max rel err {err:.2e}"))
            }),
        ),
        (
            "grad.cross_entropy_cols",
            Box::new(move || {
                let err = grad_check(|g, x| g.cross_entropy_cols(x, &[2, 0, 1, 1]), &x9, KERNEL_H)
                    .map_err(|e| e.to_string())?;
                require(err < KERNEL_TOL, format!("max rel err {err:.2e}"))
            }),
        ),
    ]
}

/// Full window loss through a 2-layer encoder and the head, W = 4, e = 3.
pub fn composite_gradient_error(seed: u64) -> crate::Result<f64> {
    let enc = MlpSpec::new(vec![3, 6, 3], Activation::Tanh)?;
    let head = HeadSpec {
        embed: 3,
        hidden: 5,
        activation: Activation::Tanh,
    };
    let root = Rng::new(seed);
    let pair = init_params(&enc, &head, 0.99, &root.split("model"))?;
    let mut rng = root.split("views");
    let a = random(4, 3, &mut rng);
    let b = random(4, 3, &mut rng);
    check_window_gradients(&pair, &a, &b, &WindowConfig::new(4), 1e-5)
}

fn composite_gradient() -> Outcome {
    let err = composite_gradient_error(5).map_err(|e| e.to_string())?;
    require(err < 1e-4, format!("max rel err {err:.2e}"))
}

/// Largest `|C − V|` over `instances` random singleton windows.
pub fn singleton_intervention_gap(instances: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let e = 1 + i % 7;
        let q = random(1, e, &mut rng);
        let k = random(1, e, &mut rng);
        let v = random(1, e, &mut rng);
        let out = intervene(&q, &k, &v, &WindowConfig::new(1))?;
        worst = worst.max(out.c.max_abs_diff(&v));
    }
    Ok(worst)
}

fn singleton_identity() -> Outcome {
    let gap = singleton_intervention_gap(100, 17).map_err(|e| e.to_string())?;
    require(gap == 0.0, format!("max |C - V| = {gap:e} over 100 instances"))
}

fn softmax_rows_stochastic() -> Outcome {
    let mut rng = Rng::new(23);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let x = random(1 + i % 9, 2 + i % 5, &mut rng).map(|v| v * (1 + i) as f64);
        let s = kernels::softmax_rows(&x).map_err(|e| e.to_string())?;
        if s.data().iter().any(|&p| p < 0.0) {
            return Err("negative probability".into());
        }
        for r in kernels::row_sums(&s) {
            worst = worst.max((r - 1.0).abs());
        }
    }
    require(worst < 1e-12, format!("max |row sum - 1| = {worst:.1e}"))
}

/// Relative deviation of the frozen-student EMA from `λ^t` after `t` steps.
pub fn ema_decay_error(lambda: f64, steps: u32) -> crate::Result<f64> {
    let enc = MlpSpec::new(vec![2, 3], Activation::Identity)?;
    let head = HeadSpec {
        embed: 3,
        hidden: 2,
        activation: Activation::Identity,
    };
    let student = vec![Tensor::full(vec![2, 3], 1.0), Tensor::full(vec![3], 1.0)];
    let head_params = vec![
        Tensor::zeros(vec![3, 2]),
        Tensor::zeros(vec![2]),
        Tensor::zeros(vec![2, 3]),
        Tensor::zeros(vec![3]),
    ];
    let mut pair = ParamPair::from_parts(enc, head, student, head_params, lambda)?;
    for t in pair.teacher_mut() {
        *t = Tensor::zeros(t.shape().to_vec());
    }
    for _ in 0..steps {
        ema_update(&mut pair, lambda)?;
    }
    // θ^m_t − θ^g = λ^t (θ^m_0 − θ^g) with θ^m_0 = 0, θ^g = 1.
    let want = lambda.powi(steps as i32);
    let mut worst = 0.0f64;
    for t in pair.teacher() {
        for &v in t.data() {
            worst = worst.max(((1.0 - v) - want).abs() / want);
        }
    }
    Ok(worst)
}

fn ema_decay() -> Outcome {
    let err = ema_decay_error(0.999, 1000).map_err(|e| e.to_string())?;
    require(err < 1e-6, format!("rel err {err:.1e} at t=1000, lambda=0.999"))
}

fn info_nce_uniform() -> Outcome {
    let mut worst = 0.0f64;
    for w in [2usize, 8, 64] {
        let c = Tensor::full(vec![w, 4], 0.3);
        let loss = info_nce(&c, &c, 0.2).map_err(|e| e.to_string())?;
        worst = worst.max((loss - (w as f64).ln()).abs());
    }
    require(
        worst <= 1e-10,
        format!("max |loss - ln W| = {worst:.1e} for W in {{2, 8, 64}}"),
    )
}

fn info_nce_orthonormal() -> Outcome {
    let c = Tensor::identity(2);
    let loss = info_nce(&c, &c, 0.2).map_err(|e| e.to_string())?;
    let e5 = 5f64.exp();
    let want = -(e5 / (e5 + 1.0)).ln();
    require((loss - want).abs() <= 1e-9, format!("loss {loss} vs {want}"))
}

// Direct O(n²) oracles, written without the library's centroid or angle code.

fn deg(dot: f64) -> f64 {
    dot.clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI
}

fn brute_centroids(f: &Tensor, y: &[usize], c: usize) -> Vec<Vec<f64>> {
    let e = f.cols();
    (0..c)
        .map(|k| {
            let mut m = vec![0.0; e];
            let mut n = 0.0;
            for (i, &yi) in y.iter().enumerate() {
                if yi == k {
                    n += 1.0;
                    for (mj, &v) in m.iter_mut().zip(f.row(i)) {
                        *mj += v;
                    }
                }
            }
            let norm = m.iter().map(|v| (v / n) * (v / n)).sum::<f64>().sqrt();
            m.iter().map(|v| v / n / norm).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Brute-force (intra, inter, id_ood) "All" values.
fn brute_angles(f: &Tensor, y: &[usize], c: usize, ood: &Tensor) -> (f64, f64, f64) {
    let mu = brute_centroids(f, y, c);
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    let mut id_ood = Vec::new();
    for k in 0..c {
        let mut a = Vec::new();
        for (i, &yi) in y.iter().enumerate() {
            if yi == k {
                a.push(deg(dot(f.row(i), &mu[k])));
            }
        }
        intra.push(mean(&a));
        let b: Vec<f64> = (0..c).filter(|&j| j != k).map(|j| deg(dot(&mu[k], &mu[j]))).collect();
        inter.push(mean(&b));
        let o: Vec<f64> = (0..ood.rows()).map(|j| deg(dot(&mu[k], ood.row(j)))).collect();
        id_ood.push(mean(&o));
    }
    (mean(&intra), mean(&inter), mean(&id_ood))
}

fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut u = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u / (id.len() * ood.len()) as f64
}

fn brute_fpr(id: &[f64], ood: &[f64], target: f64) -> f64 {
    let mut best: Option<(f64, f64)> = None;
    for &t in id.iter().chain(ood) {
        let tpr = id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64;
        if tpr >= target && best.is_none_or(|(bt, _)| t > bt) {
            let fpr = ood.iter().filter(|&&s| s >= t).count() as f64 / ood.len() as f64;
            best = Some((t, fpr));
        }
    }
    best.map_or(1.0, |(_, f)| f)
}

/// Largest deviation between library metrics and the brute-force oracles
/// over `instances` random problems with at most 50 samples.
pub fn metric_oracle_gap(instances: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let c = 2 + i % 4;
        let e = 3 + i % 5;
        let n = c * (2 + rng.below(50 / c - 1));
        let f = unit_rows(n, e, &mut rng);
        // Every class appears at least once.
        let y: Vec<usize> = (0..n).map(|j| if j < c { j } else { rng.below(c) }).collect();
        let ood = unit_rows(1 + rng.below(30), e, &mut rng);
        let splits: Vec<Split> = (0..c).map(|k| Split::ALL[k % 3]).collect();

        let mu = eval::class_centroids(&f, &y, c)?;
        let intra = eval::intra_compactness(&f, &y, &mu, &splits)?.all;
        let inter = eval::inter_separability(&mu, &splits)?.all;
        let id_ood = eval::id_ood_separability(&mu, &ood, &splits)?.all;
        let (bi, bx, bo) = brute_angles(&f, &y, c, &ood);
        worst = worst
            .max((intra - bi).abs())
            .max((inter - bx).abs())
            .max((id_ood - bo).abs());

        // Quantized scores so ties occur.
        let id_s: Vec<f64> = (0..1 + rng.below(50))
            .map(|_| (rng.normal() * 4.0).round() / 4.0)
            .collect();
        let ood_s: Vec<f64> = (0..1 + rng.below(50))
            .map(|_| (rng.normal() * 4.0).round() / 4.0 - 0.5)
            .collect();
        worst = worst.max((eval::auroc(&id_s, &ood_s)? - brute_auroc(&id_s, &ood_s)).abs());
        worst = worst.max((eval::fpr_at_tpr(&id_s, &ood_s, 0.95)? - brute_fpr(&id_s, &ood_s, 0.95)).abs());
    }
    Ok(worst)
}

fn metric_oracles() -> Outcome {
    let gap = metric_oracle_gap(25, 31).map_err(|e| e.to_string())?;
    require(gap <= 1e-10, format!("max deviation {gap:.1e} over 25 instances"))
}

fn auroc_tie_symmetry() -> Outcome {
    let mut rng = Rng::new(37);
    for _ in 0..200 {
        let a: Vec<f64> = (0..1 + rng.below(40)).map(|_| rng.below(5) as f64).collect();
        let b: Vec<f64> = (0..1 + rng.below(40)).map(|_| rng.below(5) as f64).collect();
        let s = eval::auroc(&a, &b).map_err(|e| e.to_string())? + eval::auroc(&b, &a).map_err(|e| e.to_string())?;
        if s != 1.0 {
            return Err(format!("auroc(a,b) + auroc(b,a) = {s:e}"));
        }
    }
    Ok("exact over 200 tied instances".into())
}

/// Witness results for one schedule of each kind.
pub fn witness_table(horizon: u64) -> crate::Result<Vec<WitnessRow>> {
    let mix = MixtureConfig::default();
    let source = SourceModel::generate(&mix, &Rng::new(41))?;
    let schedules = [
        DriftSchedule::Stationary,
        DriftSchedule::Tailed {
            imbalance_ratio: 100.0,
            ramp_steps: horizon / 2,
        },
        DriftSchedule::Sudden {
            switch_step: horizon / 3,
            post_transform: MeanTransform::Cycle { by: 1 },
        },
        DriftSchedule::Gradual {
            start_step: horizon / 4,
            end_step: horizon / 2,
            target: MeanTransform::Translate {
                offset: vec![0.5; mix.dim],
            },
        },
    ];
    schedules
        .iter()
        .map(|s| Ok((s.kind(), drift_witness(&source, s, horizon, 1e-6)?)))
        .collect()
}

fn stream_witness() -> Outcome {
    let table = witness_table(200).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for (kind, w) in &table {
        let ok = (*kind == "stationary") == w.is_none();
        if !ok {
            return Err(format!("{kind}: unexpected witness {w:?}"));
        }
        parts.push(match w {
            Some((t, gap)) => format!("{kind}@{t} gap {gap:.1e}"),
            None => format!("{kind}: none"),
        });
    }
    Ok(parts.join(", "))
}

/// Runs every property, catching panics as failures.
pub fn run_properties() -> Vec<PropertyResult> {
    let mut props: Vec<Property> = kernel_properties();
    props.push(("grad.composite_window_loss", Box::new(composite_gradient)));
    props.push(("intervention.singleton_identity", Box::new(singleton_identity)));
    props.push(("softmax.rows_stochastic", Box::new(softmax_rows_stochastic)));
    props.push(("ema.decay_law", Box::new(ema_decay)));
    props.push(("info_nce.uniform_ln_w", Box::new(info_nce_uniform)));
    props.push(("info_nce.orthonormal_pair", Box::new(info_nce_orthonormal)));
    props.push(("metrics.brute_force_oracles", Box::new(metric_oracles)));
    props.push(("metrics.auroc_tie_symmetry", Box::new(auroc_tie_symmetry)));
    props.push(("stream.drift_witness", Box::new(stream_witness)));

    props
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
            PropertyResult {
                name,
                outcome,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Prints one `PASS`/`FAIL` line per property; exit code 0 iff all pass.
pub fn cmd_selftest(out: &mut dyn Write) -> i32 {
    let results = run_properties();
    let mut failed = 0;
    for r in &results {
        let (tag, detail) = match &r.outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "{tag} {:<32} {detail} ({:.2}s)", r.name, r.seconds);
    }
    let _ = writeln!(out, "{} properties, {failed} failed", results.len());
    if failed == 0 {
        0
    } else {
        1
    }
}
