//! Runs the same budget with several window sizes and seeds, with and
//! without the intervention, and prints the per-window medians.

use driftlab::cli::{ablation_csv, ablation_rows, worker_threads, RunConfig};

fn main() -> driftlab::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("../configs/smoke.toml"))?;
    let windows = cfg.ablation_windows()?;
    let seeds = cfg.ablation_seeds();
    let threads = worker_threads()?;
    for on in [true, false] {
        let mut c = cfg.clone();
        c.rcp.intervention = on;
        let rows = ablation_rows(&c, &windows, &seeds, threads)?;
        println!("intervention {}:", if on { "on" } else { "off" });
        print!("{}", ablation_csv(&windows, &rows));
    }
    Ok(())
}
