//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary so the lines print in order.
//!
//! `DRIFTLAB_ACCEPT_SEEDS` shrinks the seed list of the two desk-scale
//! experiments for a quick look; the verdicts printed then say so.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use driftlab::cli::selftest::{
    composite_gradient_error, ema_decay_error, metric_oracle_gap, run_properties, singleton_intervention_gap,
    witness_table,
};
use driftlab::cli::{ablation_rows, median, AblationRow, RunConfig};
use driftlab::eval::auroc;
use driftlab::rcp::info_nce;
use driftlab::{Rng, Tensor};

const DESK: &str = include_str!("../configs/desk_tailed.toml");

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn run(n: u32, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let tag = if v.ok { "PASS" } else { "FAIL" };
    println!(
        "{tag} {n:>2} {title}: {} ({:.1}s)",
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.ok
}

fn seeds() -> Vec<u64> {
    match std::env::var("DRIFTLAB_ACCEPT_SEEDS") {
        Ok(s) => s.split(',').map(|x| x.trim().parse().expect("seed list")).collect(),
        Err(_) => vec![1, 2, 3, 4, 5],
    }
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let kernels: Vec<_> = run_properties()
        .into_iter()
        .filter(|p| p.name.starts_with("grad."))
        .collect();
    let failed: Vec<&str> = kernels.iter().filter(|p| !p.passed()).map(|p| p.name).collect();
    let composite = (1..=3).map(composite_gradient_error).collect::<Result<Vec<f64>, _>>();
    let secs = start.elapsed().as_secs_f64();
    match composite {
        Ok(errs) => {
            let worst = errs.iter().copied().fold(0.0, f64::max);
            verdict(
                failed.is_empty() && worst < 1e-4 && secs < 5.0,
                format!(
                    "{} kernel checks, failing {failed:?}; composite max rel err {worst:.1e} over 3 seeds; {secs:.2}s",
                    kernels.len()
                ),
            )
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn intervention_identity() -> Verdict {
    match singleton_intervention_gap(100, 2024) {
        Ok(gap) => verdict(gap == 0.0, format!("max |C - V| = {gap:e} over 100 windows of one")),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn ema_law() -> Verdict {
    match ema_decay_error(0.999, 1000) {
        Ok(err) => verdict(err < 1e-6, format!("relative error {err:.1e} against 0.999^1000")),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn info_nce_closed_forms() -> Verdict {
    let mut rng = Rng::new(3);
    let mut worst_uniform = 0.0f64;
    for w in [2usize, 8, 64] {
        // Identical rows make every similarity equal.
        let row: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let data: Vec<f64> = (0..w).flat_map(|_| row.iter().map(|v| v / norm)).collect();
        let c = Tensor::matrix(w, 5, data).expect("finite");
        let loss = info_nce(&c, &c, 0.2).expect("valid inputs");
        worst_uniform = worst_uniform.max((loss - (w as f64).ln()).abs());
    }
    let eye = Tensor::identity(2);
    let ortho = info_nce(&eye, &eye, 0.2).expect("valid inputs");
    let e5 = 5f64.exp();
    let want = -(e5 / (e5 + 1.0)).ln();
    let gap = (ortho - want).abs();
    verdict(
        worst_uniform <= 1e-10 && gap <= 1e-9,
        format!("uniform |loss - ln W| <= {worst_uniform:.1e}; orthonormal gap {gap:.1e}"),
    )
}

fn metric_oracles() -> Verdict {
    let gap = match metric_oracle_gap(25, 77) {
        Ok(g) => g,
        Err(e) => return verdict(false, e.to_string()),
    };
    let mut rng = Rng::new(78);
    let mut exact = true;
    for _ in 0..500 {
        let a: Vec<f64> = (0..1 + rng.below(50)).map(|_| rng.below(4) as f64).collect();
        let b: Vec<f64> = (0..1 + rng.below(50)).map(|_| rng.below(4) as f64).collect();
        exact &= auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap() == 1.0;
    }
    verdict(
        gap <= 1e-10 && exact,
        format!("max oracle deviation {gap:.1e} over 25 instances; tie symmetry exact: {exact}"),
    )
}

fn desk_config() -> RunConfig {
    RunConfig::from_toml(DESK).expect("desk config parses")
}

fn medians(rows: &[AblationRow], window: usize) -> (Option<f64>, Option<f64>, Option<f64>) {
    let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.window == window).collect();
    (
        median(&sel.iter().map(|r| Some(r.all)).collect::<Vec<_>>()),
        median(&sel.iter().map(|r| r.few).collect::<Vec<_>>()),
        median(&sel.iter().map(|r| Some(r.intra_all)).collect::<Vec<_>>()),
    )
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("absent".into(), |x| format!("{x:.3}"))
}

fn window_ordering(rows: &[AblationRow], secs: f64, n_seeds: usize) -> Verdict {
    let windows = [64, 256, 1024];
    let all: Vec<Option<f64>> = windows.iter().map(|&w| medians(rows, w).0).collect();
    let ordered = all
        .windows(2)
        .all(|p| matches!((p[0], p[1]), (Some(a), Some(b)) if a <= b));
    let cells: Vec<String> = windows
        .iter()
        .zip(&all)
        .map(|(w, a)| format!("W{w} {}", fmt(*a)))
        .collect();
    verdict(
        ordered && secs < 900.0 && n_seeds == 5,
        format!("median probe All {} over {n_seeds} seeds; {secs:.0}s", cells.join(", ")),
    )
}

fn intervention_vs_ablation(rcp: &[AblationRow], ablation: &[AblationRow], n_seeds: usize) -> Verdict {
    let (_, rcp_few, rcp_intra) = medians(rcp, 256);
    let (_, abl_few, abl_intra) = medians(ablation, 256);
    let few_ok = matches!((rcp_few, abl_few), (Some(a), Some(b)) if a >= b);
    let intra_ok = matches!((rcp_intra, abl_intra), (Some(a), Some(b)) if a <= b);
    verdict(
        few_ok && intra_ok && n_seeds == 5,
        format!(
            "W256 over {n_seeds} seeds: median Few {} vs {} ({}), median intra {} vs {} deg ({})",
            fmt(rcp_few),
            fmt(abl_few),
            if few_ok { "ok" } else { "violated" },
            fmt(rcp_intra),
            fmt(abl_intra),
            if intra_ok { "ok" } else { "violated" },
        ),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_driftlab")
}

fn driftlab(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn pretrain_eval(config: &Path, out: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let out_s = out.to_str().expect("utf-8 path");
    let cfg_s = config.to_str().expect("utf-8 path");
    for cmd in ["pretrain", "eval"] {
        let o = driftlab(&[cmd, "--config", cfg_s, "--out", out_s]);
        if !o.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out)
        .map_err(|e| e.to_string())?
        .map(|e| e.expect("dir entry").path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.ends_with(".rcpk") || name == "metrics.csv"
        })
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism(scratch: &Path) -> Verdict {
    let config = scratch.join("desk_w64.toml");
    let text = DESK.replace("window_size = 256", "window_size = 64");
    std::fs::write(&config, text).expect("write config");
    let a = pretrain_eval(&config, &scratch.join("det_a"));
    let b = pretrain_eval(&config, &scratch.join("det_b"));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
            let has_metrics = names.contains(&"metrics.csv");
            let has_ckpt = names.iter().any(|n| n.ends_with(".rcpk"));
            verdict(
                a == b && has_metrics && has_ckpt,
                format!(
                    "{} artifacts compared byte for byte: {}",
                    a.len(),
                    if a == b { "identical" } else { "differ" }
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

fn stream_validity() -> Verdict {
    match witness_table(400) {
        Ok(table) => {
            let ok = table.iter().all(|(kind, w)| (*kind == "stationary") == w.is_none())
                && table.iter().any(|(k, _)| *k == "stationary")
                && table.len() == 4;
            let cells: Vec<String> = table
                .iter()
                .map(|(k, w)| match w {
                    Some((t, gap)) => format!("{k} witness at t={t} gap {gap:.1e}"),
                    None => format!("{k} none"),
                })
                .collect();
            verdict(ok, cells.join("; "))
        }
        Err(e) => verdict(false, e.to_string()),
    }
}

fn selftest_binary() -> Verdict {
    let start = Instant::now();
    let o = driftlab(&["selftest"]);
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&o.stdout);
    let summary = text.lines().last().unwrap_or("").to_string();
    verdict(
        o.status.code() == Some(0) && secs < 60.0,
        format!("exit {:?}, {summary}, {secs:.1}s", o.status.code()),
    )
}

fn main() {
    let scratch: PathBuf = std::env::temp_dir().join(format!("driftlab-accept-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).expect("scratch dir");
    let seeds = seeds();
    let threads = driftlab::cli::worker_threads().expect("DRIFTLAB_THREADS");

    let mut results = vec![
        run(1, "gradient integrity", gradient_integrity),
        run(2, "intervention identity", intervention_identity),
        run(3, "EMA decay law", ema_law),
        run(4, "InfoNCE closed forms", info_nce_closed_forms),
        run(5, "metric oracles", metric_oracles),
    ];

    let cfg = desk_config();
    let mut rcp = Vec::new();
    results.push(run(6, "window ordering", || {
        let start = Instant::now();
        match ablation_rows(&cfg, &[64, 256, 1024], &seeds, threads) {
            Ok(rows) => {
                rcp = rows;
                window_ordering(&rcp, start.elapsed().as_secs_f64(), seeds.len())
            }
            Err(e) => verdict(false, e.to_string()),
        }
    }));
    results.push(run(7, "intervention vs ablation", || {
        let mut off = cfg.clone();
        off.rcp.intervention = false;
        match ablation_rows(&off, &[256], &seeds, threads) {
            Ok(ablation) => intervention_vs_ablation(&rcp, &ablation, seeds.len()),
            Err(e) => verdict(false, e.to_string()),
        }
    }));
    results.push(run(8, "determinism", || determinism(&scratch)));
    results.push(run(9, "stream validity", stream_validity));
    results.push(run(10, "selftest binary", selftest_binary));

    let _ = std::fs::remove_dir_all(&scratch);
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
