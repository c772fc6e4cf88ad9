//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the index order is a
//! topological order and the backward sweep simply walks indices downward.
//! A tape is built fresh for every training step and dropped afterwards.

use std::cell::Cell;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    PickMean {
        x: Var,
        targets: Vec<usize>,
    },
    /// Softmax probabilities are kept for the backward pass; `by_cols`
    /// normalizes over each column instead of each row.
    CrossEntropy {
        x: Var,
        targets: Vec<usize>,
        probs: Tensor,
        by_cols: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate gradient faults used to prove that the self-test notices a
/// broken backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SoftmaxBackwardSignFlip,
}

thread_local! {
    static ACTIVE_FAULT: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Activates `fault` on the current thread until the guard is dropped.
pub fn inject_fault(fault: Fault) -> FaultGuard {
    let prev = ACTIVE_FAULT.with(|f| f.replace(Some(fault)));
    FaultGuard { prev }
}

pub struct FaultGuard {
    prev: Option<Fault>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        ACTIVE_FAULT.with(|f| f.set(self.prev));
    }
}

fn fault_active(fault: Fault) -> bool {
    ACTIVE_FAULT.with(|f| f.get()) == Some(fault)
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros when `v` did not influence
    /// the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant. Constants never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_row(self.value(x), self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::sub(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = kernels::scale(self.value(a), s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = kernels::relu(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = kernels::tanh(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = kernels::log_softmax_rows(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmaxRows(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (out, norms) = kernels::l2_normalize_rows(self.value(a), eps)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::L2NormalizeRows { x: a, eps, norms }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_raw(Vec::new(), vec![self.value(a).sum()]);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::from_raw(Vec::new(), vec![self.value(a).sum() / n as f64]);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    /// Mean over rows of `x[i, targets[i]]`.
    pub fn pick_mean(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.require_matrix("pick_mean")?;
        if targets.len() != r || r == 0 {
            return Err(Error::shape("pick_mean", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!("target {bad} out of range for {c} columns")));
        }
        let total: f64 = targets.iter().enumerate().map(|(i, &j)| t.get(i, j)).sum();
        let out = Tensor::from_raw(Vec::new(), vec![total / r as f64]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            out,
            Op::PickMean {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` rows against class targets.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, targets, false)
    }

    /// Cross-entropy of the columns, i.e. of the rows of `logitsᵀ`, without
    /// materializing the transpose.
    pub fn cross_entropy_cols(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy(logits, targets, true)
    }

    fn cross_entropy(&mut self, logits: Var, targets: &[usize], by_cols: bool) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = t.require_matrix("cross_entropy")?;
        let (groups, width) = if by_cols { (c, r) } else { (r, c) };
        if targets.len() != groups || groups == 0 {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&j| j >= width) {
            return Err(Error::Contract(format!(
                "target {bad} out of range for {width} classes"
            )));
        }
        let x = t.data();
        let mut probs = x.to_vec();
        let mut lse = vec![0.0; groups];
        if by_cols {
            // Row-major sweeps keep the column reductions cache friendly.
            let mut max = vec![f64::NEG_INFINITY; c];
            for i in 0..r {
                for (m, &v) in max.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                    *m = m.max(v);
                }
            }
            let mut total = vec![0.0; c];
            for i in 0..r {
                for ((p, s), &m) in probs[i * c..(i + 1) * c].iter_mut().zip(&mut total).zip(&max) {
                    *p = (*p - m).exp();
                    *s += *p;
                }
            }
            for i in 0..r {
                for (p, s) in probs[i * c..(i + 1) * c].iter_mut().zip(&total) {
                    *p /= s;
                }
            }
            for j in 0..c {
                lse[j] = total[j].ln() + max[j];
            }
        } else {
            for i in 0..r {
                let row = &mut probs[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for p in row.iter_mut() {
                    *p = (*p - m).exp();
                    s += *p;
                }
                for p in row.iter_mut() {
                    *p /= s;
                }
                lse[i] = s.ln() + m;
            }
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(g, &k)| {
                let (i, j) = if by_cols { (k, g) } else { (g, k) };
                lse[g] - x[i * c + j]
            })
            .sum();
        let out = Tensor::from_raw(Vec::new(), vec![total / groups as f64]);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                x: logits,
                targets: targets.to_vec(),
                probs: Tensor::from_raw(vec![r, c], probs),
                by_cols,
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, found shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let da = kernels::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.requires_grad(*a) {
                    let da = kernels::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, kernels::transpose(g)?);
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let (r, c) = g.require_matrix("add_row backward")?;
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (acc, v) in db.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_raw(shape, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, kernels::scale(g, -1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, kernels::mul(g, self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::mul(g, self.value(*a))?);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, kernels::scale(g, *s));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_raw(x.shape().to_vec(), data));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_raw(y.shape().to_vec(), data));
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − ⟨g, y⟩_row)
                let y = &node.value;
                let (r, c) = y.require_matrix("softmax backward")?;
                let sign = if fault_active(Fault::SoftmaxBackwardSignFlip) {
                    -1.0
                } else {
                    1.0
                };
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = sign * yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(vec![r, c], dx));
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g − softmax(x) · Σ_row g
                let y = &node.value;
                let (r, c) = y.require_matrix("log_softmax backward")?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        dx[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(vec![r, c], dx));
            }
            Op::L2NormalizeRows { x, eps, norms } => {
                // Regular rows: dx = (g − y ⟨y, g⟩) / ‖x‖. Rows below eps
                // were divided by the constant eps.
                let y = &node.value;
                let (r, c) = y.require_matrix("l2_normalize backward")?;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    if norms[i] >= *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gr[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_raw(vec![r, c], dx));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.data()[0] / t.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), v));
            }
            Op::PickMean { x, targets } => {
                let t = self.value(*x);
                let (r, c) = (t.rows(), t.cols());
                let mut dx = vec![0.0; r * c];
                let v = g.data()[0] / r as f64;
                for (i, &j) in targets.iter().enumerate() {
                    dx[i * c + j] = v;
                }
                self.accumulate(grads, *x, Tensor::from_raw(t.shape().to_vec(), dx));
            }
            Op::CrossEntropy {
                x,
                targets,
                probs,
                by_cols,
            } => {
                // dx = (softmax − onehot) · g / groups
                let c = probs.cols();
                let v = g.data()[0] / targets.len() as f64;
                let mut dx = kernels::scale(probs, v);
                let d = dx.data_mut();
                for (grp, &k) in targets.iter().enumerate() {
                    let (i, j) = if *by_cols { (k, grp) } else { (grp, k) };
                    d[i * c + j] -= v;
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let k = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let w = g.param(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
        let y = g.matmul(k, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(k).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x ⊙ x) → df = 2x
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, -2.0]]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2, 2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap());
        let ce = g.cross_entropy_rows(logits, &[1]).unwrap();
        assert!((g.value(ce).item().unwrap() - 3f64.ln()).abs() < 1e-15);
        let grads = g.backward(ce).unwrap();
        let d = grads.get(logits).unwrap();
        assert!((d.get(0, 1) - (1.0 / 3.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn column_cross_entropy_equals_rows_of_transpose() {
        let t = Tensor::from_rows(&[[0.3, -1.0, 2.0], [1.5, 0.2, -0.7]]).unwrap();
        let targets = [1, 0, 1];
        let mut g = Graph::new();
        let a = g.param(t.clone());
        let cols = g.cross_entropy_cols(a, &targets).unwrap();
        let ga = g.backward(cols).unwrap().get(a).unwrap().clone();
        let mut h = Graph::new();
        let b = h.param(t);
        let bt = h.transpose(b).unwrap();
        let rows = h.cross_entropy_rows(bt, &targets).unwrap();
        let gb = h.backward(rows).unwrap().get(b).unwrap().clone();
        assert!((g.value(cols).item().unwrap() - h.value(rows).item().unwrap()).abs() < 1e-14);
        for (u, v) in ga.data().iter().zip(gb.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn fault_guard_restores() {
        {
            let _g = inject_fault(Fault::SoftmaxBackwardSignFlip);
            assert!(fault_active(Fault::SoftmaxBackwardSignFlip));
        }
        assert!(!fault_active(Fault::SoftmaxBackwardSignFlip));
    }
}
