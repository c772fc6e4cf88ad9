//! Records a small network on the tape, backpropagates, and compares every
//! gradient coordinate with central differences.

use driftlab::numkern::grad_check;
use driftlab::{Graph, Rng, Tensor};

fn main() -> driftlab::Result<()> {
    let mut rng = Rng::new(0);
    let x = Tensor::matrix(4, 3, (0..12).map(|_| rng.normal()).collect())?;
    let w = Tensor::matrix(3, 5, (0..15).map(|_| rng.normal()).collect())?;

    // loss = cross_entropy(tanh(x W), targets)
    let loss = |g: &mut Graph, wv: driftlab::Var| {
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, wv)?;
        let h = g.tanh(h);
        g.cross_entropy_rows(h, &[0, 2, 4, 1])
    };

    let mut g = Graph::new();
    let wv = g.param(w.clone());
    let out = loss(&mut g, wv)?;
    let grads = g.backward(out)?;
    println!("loss {:.6}", g.value(out).item()?);
    println!("|dL/dW| = {:.6}", grads.get(wv).expect("parameter gradient").l2_norm());

    let err = grad_check(loss, &w, 1e-6)?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}
