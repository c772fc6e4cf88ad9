//! Pre-trains an encoder on a drifting stream from a config file and prints
//! the loss trace. Pass a config path, or run with the bundled smoke config.

use driftlab::cli::{run_pretrain, RunConfig};

fn main() -> driftlab::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml(include_str!("../configs/smoke.toml"))?,
    };
    let window = cfg.window_size()?;
    let out = run_pretrain(&cfg, window, cfg.seed, None)?;
    let every = (out.trace.len() / 8).max(1);
    for r in out.trace.iter().step_by(every).chain(out.trace.last()) {
        println!(
            "step {:>5}  loss {:.4}  lr {:.2e}  lambda {:.4}",
            r.step, r.loss, r.lr, r.lambda
        );
    }
    println!("{} steps over windows of {window}", out.trace.len());
    Ok(())
}
