//! Causal intervention over the drift-adaptation window.
//!
//! Within a window of `W` samples every sample is treated as one stratum of
//! the drift confounder. The backdoor sum over strata, weighted by a uniform
//! prior, becomes a row-softmax over query/key affinities applied to the
//! values:
//!
//! ```text
//! A = softmax_rows(Q Kᵀ · s)      C = A V
//! ```
//!
//! `Q = h(g(x̃))` and `V = g(x̃)` come from the student, `K = m(x̂)` from the
//! teacher and carries no gradient. Both views are intervened against the
//! other view's keys and the two results are contrasted with a symmetric
//! InfoNCE whose positives sit on the diagonal.

mod optim;
mod train;

pub use optim::{AdamW, OptimConfig};
pub use train::{
    pretrain, train_step, write_trace_csv, CheckpointPlan, PretrainConfig, PretrainOutcome, StepContext, StepReport,
    TrainConfig, Trainer,
};

use crate::error::{Error, Result};
use crate::model::{forward_head, forward_student, forward_teacher, BoundParams, ParamPair};
use crate::numkern::{grad_check, kernels, Graph, Tensor, Var};

/// Row-norm floor used before cosine similarities.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct WindowConfig {
    /// Samples per drift-adaptation window.
    pub window_size: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Multiply logits by `1/√e` when set.
    pub qk_scale: bool,
    /// When false the loss contrasts `q` against the other view's `k`
    /// directly (plain momentum contrast).
    pub intervention: bool,
}

impl WindowConfig {
    pub fn new(window_size: usize) -> Self {
        WindowConfig {
            window_size,
            temperature: 0.2,
            qk_scale: false,
            intervention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::config("rcp.window_size", "must be >= 1"));
        }
        check_temperature(self.temperature)
    }

    fn logit_scale(&self, embed: usize) -> f64 {
        if self.qk_scale {
            1.0 / (embed as f64).sqrt()
        } else {
            1.0
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config("rcp.temperature", format!("must be > 0, got {t}")))
    }
}

/// Everything one intervention produced.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionTensors {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic `W×W` weights.
    pub a: Tensor,
    pub c: Tensor,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    q.require_matrix("intervene")?;
    if k.shape() != q.shape() {
        return Err(Error::shape("intervene (Q vs K)", q.shape(), k.shape()));
    }
    if v.shape() != q.shape() {
        return Err(Error::shape("intervene (Q vs V)", q.shape(), v.shape()));
    }
    Ok(())
}

/// Off-tape intervention; same kernels as [`intervene_graph`].
pub fn intervene(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &WindowConfig) -> Result<InterventionTensors> {
    check_qkv(q, k, v)?;
    let mut logits = kernels::matmul_nt(q, k)?;
    let s = cfg.logit_scale(q.cols());
    if s != 1.0 {
        logits = kernels::scale(&logits, s);
    }
    let a = kernels::softmax_rows(&logits)?;
    let c = kernels::matmul(&a, v)?;
    Ok(InterventionTensors {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        a,
        c,
    })
}

/// Records `A = softmax(Q Kᵀ · s)`, `C = A V` and returns `(A, C)`.
pub fn intervene_graph(g: &mut Graph, q: Var, k: Var, v: Var, cfg: &WindowConfig) -> Result<(Var, Var)> {
    check_qkv(g.value(q), g.value(k), g.value(v))?;
    let mut logits = g.matmul_nt(q, k)?;
    let s = cfg.logit_scale(g.value(q).cols());
    if s != 1.0 {
        logits = g.scale(logits, s);
    }
    let a = g.softmax_rows(logits)?;
    let c = g.matmul(a, v)?;
    Ok((a, c))
}

/// Student/teacher outputs for both augmented views.
#[derive(Clone, Copy, Debug)]
pub struct Views {
    pub q1: Var,
    pub v1: Var,
    pub k1: Var,
    pub q2: Var,
    pub v2: Var,
    pub k2: Var,
}

/// `Vⁱ = g(viewᵢ)`, `Qⁱ = h(Vⁱ)`, `Kⁱ = m(viewᵢ)`; keys enter the tape as
/// constants.
pub fn form_views(
    pair: &ParamPair,
    g: &mut Graph,
    bound: &BoundParams,
    view_a: &Tensor,
    view_b: &Tensor,
) -> Result<Views> {
    if view_a.shape() != view_b.shape() {
        return Err(Error::shape("form_views", view_a.shape(), view_b.shape()));
    }
    let xa = g.constant(view_a.clone());
    let xb = g.constant(view_b.clone());
    let v1 = forward_student(pair, g, bound, xa)?;
    let q1 = forward_head(pair, g, bound, v1)?;
    let v2 = forward_student(pair, g, bound, xb)?;
    let q2 = forward_head(pair, g, bound, v2)?;
    let k1 = g.constant(forward_teacher(pair, view_a)?);
    let k2 = g.constant(forward_teacher(pair, view_b)?);
    Ok(Views { q1, v1, k1, q2, v2, k2 })
}

/// Result of intervening both views.
#[derive(Clone, Copy, Debug)]
pub struct Intervened {
    pub a1: Var,
    pub c1: Var,
    pub a2: Var,
    pub c2: Var,
}

/// `C1 = intervene(Q¹, K², V¹)`, `C2 = intervene(Q², K¹, V²)`.
pub fn symmetric_intervention(g: &mut Graph, views: &Views, cfg: &WindowConfig) -> Result<Intervened> {
    let (a1, c1) = intervene_graph(g, views.q1, views.k2, views.v1, cfg)?;
    let (a2, c2) = intervene_graph(g, views.q2, views.k1, views.v2, cfg)?;
    Ok(Intervened { a1, c1, a2, c2 })
}

/// Cross-entropy of `softmax(â b̂ᵀ / T)` at the diagonal, averaged over
/// both directions.
pub fn info_nce_graph(g: &mut Graph, first: Var, second: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let (w, _) = g.value(first).require_matrix("info_nce")?;
    if g.value(second).shape() != g.value(first).shape() {
        return Err(Error::shape(
            "info_nce",
            g.value(first).shape(),
            g.value(second).shape(),
        ));
    }
    let n1 = g.l2_normalize_rows(first, NORM_EPS)?;
    let n2 = g.l2_normalize_rows(second, NORM_EPS)?;
    let sim = g.matmul_nt(n1, n2)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let diag: Vec<usize> = (0..w).collect();
    let forward = g.cross_entropy_rows(logits, &diag)?;
    let backward = g.cross_entropy_cols(logits, &diag)?;
    let total = g.add(forward, backward)?;
    Ok(g.scale(total, 0.5))
}

/// Value of the symmetric InfoNCE between two `W×e` matrices.
pub fn info_nce(c1: &Tensor, c2: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(c1.clone());
    let b = g.constant(c2.clone());
    let loss = info_nce_graph(&mut g, a, b, temperature)?;
    g.value(loss).item()
}

/// Window loss and, when the intervention is on, its attention matrices.
#[derive(Clone, Copy, Debug)]
pub struct WindowLoss {
    pub loss: Var,
    pub intervened: Option<Intervened>,
}

/// Full objective for one window: intervention + InfoNCE, or the plain
/// `q`-against-`k` momentum contrast when `cfg.intervention` is off.
pub fn window_loss(g: &mut Graph, views: &Views, cfg: &WindowConfig) -> Result<WindowLoss> {
    if cfg.intervention {
        let iv = symmetric_intervention(g, views, cfg)?;
        let loss = info_nce_graph(g, iv.c1, iv.c2, cfg.temperature)?;
        Ok(WindowLoss {
            loss,
            intervened: Some(iv),
        })
    } else {
        let l1 = directional_nce(g, views.q1, views.k2, cfg.temperature)?;
        let l2 = directional_nce(g, views.q2, views.k1, cfg.temperature)?;
        let total = g.add(l1, l2)?;
        Ok(WindowLoss {
            loss: g.scale(total, 0.5),
            intervened: None,
        })
    }
}

/// Largest finite-difference relative gradient error of the window loss
/// over every student-encoder and head parameter tensor.
pub fn check_window_gradients(
    pair: &ParamPair,
    view_a: &Tensor,
    view_b: &Tensor,
    cfg: &WindowConfig,
    h: f64,
) -> Result<f64> {
    let n_enc = pair.student().len();
    let all: Vec<Tensor> = pair.student().iter().chain(pair.head()).cloned().collect();
    let mut worst = 0.0f64;
    for (i, x) in all.iter().enumerate() {
        let err = grad_check(
            |g, xv| {
                let mut bound = pair.bind(g);
                if i < n_enc {
                    bound.encoder[i] = xv;
                } else {
                    bound.head[i - n_enc] = xv;
                }
                let views = form_views(pair, g, &bound, view_a, view_b)?;
                Ok(window_loss(g, &views, cfg)?.loss)
            },
            x,
            h,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn directional_nce(g: &mut Graph, anchor: Var, target: Var, temperature: f64) -> Result<Var> {
    let (w, _) = g.value(anchor).require_matrix("info_nce")?;
    let na = g.l2_normalize_rows(anchor, NORM_EPS)?;
    let nb = g.l2_normalize_rows(target, NORM_EPS)?;
    let sim = g.matmul_nt(na, nb)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let diag: Vec<usize> = (0..w).collect();
    g.cross_entropy_rows(logits, &diag)
}
