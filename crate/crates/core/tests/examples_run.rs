//! Every example runs to completion. `cargo test` builds the examples next
//! to the test binaries, so they are found relative to this executable.

use std::path::PathBuf;
use std::process::Command;

const EXAMPLES: &[(&str, &str)] = &[
    ("gradient_check", "max relative error"),
    ("drift_stream", "stationary no change"),
    ("intervention", "W=1: max |C - V| = 0e0"),
    ("ema_teacher", "step 20"),
    ("pretrain", "160 steps over windows of 16"),
    ("evaluate", "probe_top1,all,"),
    ("ood_metrics", "auroc([1, 2, 3], [2]) = 0.5"),
    ("linear_probe", "all"),
    ("checkpoint_files", "checkpoint round trip equal: true"),
    ("window_ablation", "intervention off:"),
    ("idx_dataset", "4 in-distribution classes"),
    ("run_config", "typo is rejected"),
];

fn examples_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|deps| deps.parent()).unwrap().join("examples")
}

#[test]
fn every_example_runs() {
    let dir = examples_dir();
    let on_disk: Vec<String> = std::fs::read_dir(env!("CARGO_MANIFEST_DIR").to_string() + "/examples")
        .unwrap()
        .map(|e| e.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    for name in &on_disk {
        assert!(
            EXAMPLES.iter().any(|(n, _)| n == name),
            "example {name} is not exercised"
        );
    }
    for (name, expect) in EXAMPLES {
        let bin = dir.join(name);
        let o = Command::new(&bin)
            .output()
            .unwrap_or_else(|e| panic!("{}: {e}; plain `cargo test` builds the examples", bin.display()));
        let out = String::from_utf8_lossy(&o.stdout);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.contains(expect), "{name} output lacks {expect:?}:\n{out}");
    }
}
