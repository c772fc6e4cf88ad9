//! Fits a softmax-regression probe on frozen features and reports accuracy
//! per frequency split.

use driftlab::eval::{linear_probe, ProbeConfig, Split};
use driftlab::{Rng, Tensor};

fn main() -> driftlab::Result<()> {
    let mut rng = Rng::new(5);
    let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let draw = |n_per: &[usize], rng: &mut Rng| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, &n) in n_per.iter().enumerate() {
            for _ in 0..n {
                x.extend(centers[c].iter().map(|v| v + 0.3 * rng.normal()));
                y.push(c);
            }
        }
        (Tensor::matrix(y.len(), 3, x).expect("finite"), y)
    };
    let (train_x, train_y) = draw(&[200, 40, 5], &mut rng);
    let (test_x, test_y) = draw(&[50, 50, 50], &mut rng);
    let splits = [Split::Many, Split::Medium, Split::Few];
    let report = linear_probe(&train_x, &train_y, &test_x, &test_y, &splits, &ProbeConfig::default())?;
    for s in Split::ALL {
        println!("{:<6} {:?}", s.name(), report.top1.get(s));
    }
    println!("all    {:.3}", report.top1.all);
    Ok(())
}
