//! Parses a run config, shows its hash, and demonstrates that layout and the
//! output directory do not change the hash while a setting does.

use driftlab::cli::RunConfig;

fn main() -> driftlab::Result<()> {
    let base = "[rcp]\nwindow_size = 64\n[stream]\nhorizon = 800\n";
    let shuffled = "[stream]\nhorizon    = 800\n\n[rcp]\nwindow_size = 64\n[io]\nout_dir = \"elsewhere\"\n";
    let changed = "[rcp]\nwindow_size = 128\n[stream]\nhorizon = 800\n";
    for (name, text) in [("base", base), ("reordered", shuffled), ("changed", changed)] {
        let cfg = RunConfig::from_toml(text)?;
        println!("{name:<10} hash {}", cfg.hash());
    }
    match RunConfig::from_toml("[rcp]\nwindow_sise = 64\n") {
        Err(e) => println!("typo is rejected: {e} (exit code {})", e.exit_code()),
        Ok(_) => println!("typo accepted"),
    }
    Ok(())
}
