//! Encoder `g`, query head `h` and the momentum teacher `m`.
//!
//! The teacher mirrors the encoder layer by layer and is only ever written
//! by [`ema_update`]; it never appears on a gradient tape.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{kernels, Graph, Rng, Tensor, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => kernels::relu(x),
            Activation::Tanh => kernels::tanh(x),
            Activation::Identity => x.clone(),
        }
    }

    fn apply_graph(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected stack `d → hidden… → e`; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            activation,
        };
        spec.validate("model.layer_widths")?;
        Ok(spec)
    }

    fn validate(&self, key: &str) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::config(key, "need an input and at least one layer"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config(key, "all widths must be >= 1"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Two-layer projection `e → hidden → e` on top of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub embed: usize,
    pub hidden: usize,
    pub activation: Activation,
}

impl HeadSpec {
    fn as_mlp(&self) -> MlpSpec {
        MlpSpec {
            layer_widths: vec![self.embed, self.hidden, self.embed],
            activation: self.activation,
        }
    }
}

/// Student encoder, student head and the shape-identical teacher encoder.
///
/// Parameters are stored as `[w0, b0, w1, b1, …]` with `w: in×out`,
/// `b: out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPair {
    encoder: MlpSpec,
    head: HeadSpec,
    student: Vec<Tensor>,
    head_params: Vec<Tensor>,
    teacher: Vec<Tensor>,
    momentum: f64,
}

fn check_momentum(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config(
            "model.momentum",
            format!("must lie in [0, 1), got {lambda}"),
        ))
    }
}

fn check_layout(spec: &MlpSpec, params: &[Tensor], what: &str) -> Result<()> {
    let want = 2 * spec.num_layers();
    if params.len() != want {
        return Err(Error::Contract(format!(
            "{what}: expected {want} tensors, found {}",
            params.len()
        )));
    }
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        let ws = params[2 * l].shape();
        let bs = params[2 * l + 1].shape();
        if ws != [w[0], w[1]] || bs != [w[1]] {
            return Err(Error::shape("parameter layout", ws, bs));
        }
    }
    Ok(())
}

/// Fan-in uniform bound `√(6 / fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn init_mlp(spec: &MlpSpec, rng: &Rng, label: &str) -> Vec<Tensor> {
    let mut params = Vec::with_capacity(2 * spec.num_layers());
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = init_bound(fan_in);
        let mut r = rng.split_index(label, l as u64);
        let data = (0..fan_in * fan_out).map(|_| r.uniform_in(-bound, bound)).collect();
        params.push(Tensor::from_raw(vec![fan_in, fan_out], data));
        params.push(Tensor::zeros(vec![fan_out]));
    }
    params
}

/// Fresh parameters: weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases,
/// teacher an exact copy of the student encoder.
pub fn init_params(encoder: &MlpSpec, head: &HeadSpec, momentum: f64, rng: &Rng) -> Result<ParamPair> {
    encoder.validate("model.layer_widths")?;
    head.as_mlp().validate("model.head")?;
    if head.embed != encoder.output_width() {
        return Err(Error::config(
            "model.head",
            format!(
                "head width {} != embedding width {}",
                head.embed,
                encoder.output_width()
            ),
        ));
    }
    check_momentum(momentum)?;
    let student = init_mlp(encoder, rng, "model/encoder/layer");
    let head_params = init_mlp(&head.as_mlp(), rng, "model/head/layer");
    Ok(ParamPair {
        encoder: encoder.clone(),
        head: head.clone(),
        teacher: student.clone(),
        student,
        head_params,
        momentum,
    })
}

fn mlp_forward(params: &[Tensor], act: Activation, x: &Tensor) -> Result<Tensor> {
    let layers = params.len() / 2;
    let mut h = x.clone();
    for l in 0..layers {
        h = kernels::matmul(&h, &params[2 * l])?;
        h = kernels::add_row(&h, &params[2 * l + 1])?;
        if l + 1 < layers {
            h = act.apply(&h);
        }
    }
    Ok(h)
}

fn mlp_forward_graph(g: &mut Graph, params: &[Var], act: Activation, x: Var) -> Result<Var> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = g.matmul(h, params[2 * l])?;
        h = g.add_row(h, params[2 * l + 1])?;
        if l + 1 < layers {
            h = act.apply_graph(g, h);
        }
    }
    Ok(h)
}

/// Tape handles for the trainable parameters of one step.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub encoder: Vec<Var>,
    pub head: Vec<Var>,
}

impl ParamPair {
    /// Builds a pair from explicit student tensors; the teacher starts as a
    /// copy.
    pub fn from_parts(
        encoder: MlpSpec,
        head: HeadSpec,
        student: Vec<Tensor>,
        head_params: Vec<Tensor>,
        momentum: f64,
    ) -> Result<Self> {
        encoder.validate("model.layer_widths")?;
        check_layout(&encoder, &student, "encoder")?;
        check_layout(&head.as_mlp(), &head_params, "head")?;
        check_momentum(momentum)?;
        Ok(ParamPair {
            encoder,
            head,
            teacher: student.clone(),
            student,
            head_params,
            momentum,
        })
    }

    pub(crate) fn from_all(
        encoder: MlpSpec,
        head: HeadSpec,
        student: Vec<Tensor>,
        head_params: Vec<Tensor>,
        teacher: Vec<Tensor>,
        momentum: f64,
    ) -> Result<Self> {
        check_layout(&encoder, &teacher, "teacher")?;
        let mut pair = ParamPair::from_parts(encoder, head, student, head_params, momentum)?;
        pair.teacher = teacher;
        Ok(pair)
    }

    pub fn encoder_spec(&self) -> &MlpSpec {
        &self.encoder
    }

    pub fn head_spec(&self) -> &HeadSpec {
        &self.head
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn student(&self) -> &[Tensor] {
        &self.student
    }

    pub fn head(&self) -> &[Tensor] {
        &self.head_params
    }

    pub fn teacher(&self) -> &[Tensor] {
        &self.teacher
    }

    /// Mutable trainable tensors: student encoder followed by head.
    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.student.iter_mut().chain(self.head_params.iter_mut())
    }

    pub fn teacher_mut(&mut self) -> &mut [Tensor] {
        &mut self.teacher
    }

    /// Registers the student encoder and head on `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            encoder: self.student.iter().map(|t| g.param(t.clone())).collect(),
            head: self.head_params.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.require_matrix("encoder input")?;
        if d != self.encoder.input_width() {
            return Err(Error::shape("encoder input", x.shape(), &[self.encoder.input_width()]));
        }
        Ok(())
    }

    /// `v = g(x)` without recording gradients.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        mlp_forward(&self.student, self.encoder.activation, x)
    }

    /// `q = h(v)` without recording gradients.
    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        let (_, e) = v.require_matrix("head input")?;
        if e != self.head.embed {
            return Err(Error::shape("head input", v.shape(), &[self.head.embed]));
        }
        mlp_forward(&self.head_params, self.head.activation, v)
    }
}

/// `v = g(x)` on the tape, differentiable in the student parameters.
pub fn forward_student(pair: &ParamPair, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
    pair.check_input(g.value(x))?;
    mlp_forward_graph(g, &bound.encoder, pair.encoder.activation, x)
}

/// `q = h(v)` on the tape.
pub fn forward_head(pair: &ParamPair, g: &mut Graph, bound: &BoundParams, v: Var) -> Result<Var> {
    let (_, e) = g.value(v).require_matrix("head input")?;
    if e != pair.head.embed {
        return Err(Error::shape("head input", g.value(v).shape(), &[pair.head.embed]));
    }
    mlp_forward_graph(g, &bound.head, pair.head.activation, v)
}

/// `k = m(x)`. Runs off-tape, so the teacher can never receive gradient.
pub fn forward_teacher(pair: &ParamPair, x: &Tensor) -> Result<Tensor> {
    pair.check_input(x)?;
    mlp_forward(&pair.teacher, pair.encoder.activation, x)
}

/// `θ^m ← λ·θ^m + (1 − λ)·θ^g`, elementwise. The student is untouched.
pub fn ema_update(pair: &mut ParamPair, lambda: f64) -> Result<()> {
    check_momentum(lambda)?;
    for (m, s) in pair.teacher.iter_mut().zip(&pair.student) {
        for (mv, sv) in m.data_mut().iter_mut().zip(s.data()) {
            *mv = lambda * *mv + (1.0 - lambda) * sv;
        }
    }
    Ok(())
}

/// Euclidean distance between teacher and student encoder parameters.
pub fn teacher_student_distance(pair: &ParamPair) -> f64 {
    pair.teacher
        .iter()
        .zip(&pair.student)
        .flat_map(|(m, s)| m.data().iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: Vec<usize>) -> MlpSpec {
        MlpSpec::new(widths, Activation::Relu).unwrap()
    }

    fn head(e: usize) -> HeadSpec {
        HeadSpec {
            embed: e,
            hidden: 8,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn init_copies_teacher_and_is_seeded() {
        let a = init_params(&spec(vec![4, 6, 3]), &head(3), 0.99, &Rng::new(5)).unwrap();
        let b = init_params(&spec(vec![4, 6, 3]), &head(3), 0.99, &Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(teacher_student_distance(&a), 0.0);
        for b in a.student().iter().skip(1).step_by(2) {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_bound_holds_for_fan_in_100() {
        let pair = init_params(&spec(vec![100, 20, 4]), &head(4), 0.9, &Rng::new(1)).unwrap();
        let bound = (6.0f64 / 100.0).sqrt();
        assert!(pair.student()[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn bad_momentum_and_widths() {
        assert!(init_params(&spec(vec![4, 3]), &head(3), 1.0, &Rng::new(0)).is_err());
        assert!(MlpSpec::new(vec![4], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![4, 0, 2], Activation::Relu).is_err());
        assert!(init_params(&spec(vec![4, 3]), &head(5), 0.5, &Rng::new(0)).is_err());
    }

    #[test]
    fn identity_and_zero_networks() {
        let enc = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let hd = HeadSpec {
            embed: 2,
            hidden: 2,
            activation: Activation::Identity,
        };
        let eye = Tensor::identity(2);
        let z = Tensor::zeros(vec![2]);
        let pair = ParamPair::from_parts(
            enc.clone(),
            hd.clone(),
            vec![eye.clone(), z.clone()],
            vec![eye.clone(), z.clone(), eye.clone(), z.clone()],
            0.9,
        )
        .unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        assert_eq!(pair.encode(&x).unwrap(), x);
        assert_eq!(pair.project(&x).unwrap(), x);
        assert_eq!(forward_teacher(&pair, &x).unwrap(), x);

        let bias = Tensor::vector(vec![0.25, -1.0]).unwrap();
        let zero = ParamPair::from_parts(
            enc,
            hd,
            vec![Tensor::zeros(vec![2, 2]), bias.clone()],
            vec![eye.clone(), z.clone(), eye, z],
            0.9,
        )
        .unwrap();
        let v = zero.encode(&x).unwrap();
        assert_eq!(v.row(0), bias.data());
        assert_eq!(v.row(1), bias.data());
    }

    #[test]
    fn two_layer_hand_forward() {
        // x = [1, 2]; W1 = [[1, -1], [0, 1]], b1 = [0, -2] → pre = [1, -1] + [0, -2]
        // relu → [1, 0]; W2 = [[2], [3]], b2 = [0.5] → 2.5
        let enc = MlpSpec::new(vec![2, 2, 1], Activation::Relu).unwrap();
        let hd = HeadSpec {
            embed: 1,
            hidden: 1,
            activation: Activation::Relu,
        };
        let one = Tensor::from_rows(&[[1.0]]).unwrap();
        let zb = Tensor::zeros(vec![1]);
        let pair = ParamPair::from_parts(
            enc,
            hd,
            vec![
                Tensor::from_rows(&[[1.0, -1.0], [0.0, 1.0]]).unwrap(),
                Tensor::vector(vec![0.0, -2.0]).unwrap(),
                Tensor::from_rows(&[[2.0], [3.0]]).unwrap(),
                Tensor::vector(vec![0.5]).unwrap(),
            ],
            vec![one.clone(), zb.clone(), one, zb],
            0.0,
        )
        .unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(pair.encode(&x).unwrap().data(), &[2.5]);

        let mut g = Graph::new();
        let bound = pair.bind(&mut g);
        let xv = g.constant(x);
        let v = forward_student(&pair, &mut g, &bound, xv).unwrap();
        assert_eq!(g.value(v).data(), &[2.5]);
        let q = forward_head(&pair, &mut g, &bound, v).unwrap();
        assert_eq!(g.value(q).data(), &[2.5]);
    }

    #[test]
    fn ema_scalar_case() {
        let enc = MlpSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let hd = HeadSpec {
            embed: 1,
            hidden: 1,
            activation: Activation::Identity,
        };
        let one = Tensor::from_rows(&[[1.0]]).unwrap();
        let zb = Tensor::zeros(vec![1]);
        let mut pair = ParamPair::from_parts(
            enc,
            hd,
            vec![Tensor::from_rows(&[[2.0]]).unwrap(), zb.clone()],
            vec![one.clone(), zb.clone(), one.clone(), zb.clone()],
            0.9,
        )
        .unwrap();
        pair.teacher_mut()[0] = one;
        ema_update(&mut pair, 0.9).unwrap();
        assert!((pair.teacher()[0].data()[0] - 1.1).abs() < 1e-15);
        assert_eq!(pair.student()[0].data()[0], 2.0);
        ema_update(&mut pair, 0.0).unwrap();
        assert_eq!(pair.teacher()[0], pair.student()[0]);
        assert!(ema_update(&mut pair, -0.1).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let pair = init_params(&spec(vec![4, 3]), &head(3), 0.5, &Rng::new(0)).unwrap();
        assert!(matches!(
            pair.encode(&Tensor::zeros(vec![2, 5])),
            Err(Error::Shape { .. })
        ));
        assert!(forward_teacher(&pair, &Tensor::zeros(vec![2, 3])).is_err());
    }
}
