//! Pre-trains on the smoke stream, then reports probe accuracy, feature
//! angles and OOD detection, split by class frequency.

use driftlab::cli::{pretrain_and_eval, RunConfig};

fn main() -> driftlab::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/smoke.toml"))?;
    let (_, report) = pretrain_and_eval(&cfg, cfg.window_size()?, cfg.seed)?;
    println!("class counts in the probe training draw: {:?}", report.class_counts);
    print!("{}", report.to_csv());
    Ok(())
}
