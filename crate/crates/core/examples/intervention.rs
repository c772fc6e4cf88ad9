//! The window intervention: every output row is a convex combination of the
//! window's value rows, weighted by query-key affinity.

use driftlab::numkern::kernels::{l2_normalize_rows, row_sums};
use driftlab::rcp::{info_nce, intervene, WindowConfig};
use driftlab::{Rng, Tensor};

fn unit(rows: usize, cols: usize, rng: &mut Rng) -> driftlab::Result<Tensor> {
    let t = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())?;
    Ok(l2_normalize_rows(&t, 1e-12)?.0)
}

fn main() -> driftlab::Result<()> {
    let mut rng = Rng::new(3);
    let w = 6;
    let q = unit(w, 4, &mut rng)?;
    let k = unit(w, 4, &mut rng)?;
    let v = unit(w, 4, &mut rng)?;

    let out = intervene(&q, &k, &v, &WindowConfig::new(w))?;
    println!(
        "row sums of A: {:?}",
        row_sums(&out.a).iter().map(|s| format!("{s:.15}")).collect::<Vec<_>>()
    );
    println!(
        "A[0] = {:?}",
        out.a.row(0).iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
    );

    // A window of one sample leaves the value untouched.
    let single = intervene(
        &q.select_rows(&[0]),
        &k.select_rows(&[0]),
        &v.select_rows(&[0]),
        &WindowConfig::new(1),
    )?;
    println!("W=1: max |C - V| = {:e}", single.c.max_abs_diff(&single.v));

    let matched = info_nce(&q, &q, 0.2)?;
    let unrelated = info_nce(&q, &k, 0.2)?;
    println!(
        "InfoNCE with aligned views {matched:.4}, with unrelated views {unrelated:.4}, ln W = {:.4}",
        (w as f64).ln()
    );
    Ok(())
}
