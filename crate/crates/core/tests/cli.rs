//! End-to-end runs of the `driftlab` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use driftlab::cli::{export_tensors, RunConfig};
use driftlab::eval::{extract_features, EvalData};
use driftlab::model::load_checkpoint;
use driftlab::stream::{encode_idx_images, encode_idx_labels, load_tensor};
use tempfile::TempDir;

const SMOKE: &str = include_str!("../configs/smoke.toml");

fn driftlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .args(args)
        .env_remove("DRIFTLAB_SELFTEST_FAULT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(out: &Path, command: &str) -> serde_json::Value {
    let text = fs::read_to_string(out.join(format!("manifest_{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// The smoke config with `steps` fixed.
fn smoke_with_steps(steps: u64) -> String {
    SMOKE.replace("window_size = 16", &format!("window_size = 16\nsteps = {steps}"))
}

#[test]
fn pretrain_writes_one_trace_row_per_step() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &smoke_with_steps(10));
    let out = dir.path().join("run");
    let o = driftlab(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,loss,lr,lambda,window"));
    assert_eq!(lines.count(), 10);
    assert!(out.join("checkpoint_000010.rcpk").exists());

    // Every file written is listed in the manifest, and nothing else is.
    let m = manifest(&out, "pretrain");
    let mut listed: Vec<String> = m["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    listed.push("manifest_pretrain.json".into());
    listed.sort();
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
}

#[test]
fn missing_window_size_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMOKE.replace("window_size = 16", ""));
    let o = driftlab(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rcp.window_size"), "{}", stderr(&o));
}

#[test]
fn unknown_key_names_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMOKE.replace("momentum = 0.99", "momentun = 0.99"),
    );
    let o = driftlab(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.momentun"), "{}", stderr(&o));
}

#[test]
fn tampered_checkpoint_magic_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &smoke_with_steps(5));
    let out = dir.path().join("run");
    assert_eq!(
        driftlab(&["pretrain", "--config", s(&cfg), "--out", s(&out)])
            .status
            .code(),
        Some(0)
    );
    let ck = out.join("checkpoint_000005.rcpk");
    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let o = driftlab(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMOKE);
    let o = driftlab(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("nothing"))]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn same_config_twice_gives_the_same_summary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMOKE);
    let mut summaries = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for cmd in ["pretrain", "eval"] {
            let o = driftlab(&[cmd, "--config", s(&cfg), "--out", s(&out)]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        }
        let m = manifest(&out, "eval");
        summaries.push((m["metrics"].clone(), m["config_hash"].clone()));
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn seed_and_intervention_overrides_change_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &smoke_with_steps(20));
    let mut hashes = Vec::new();
    for extra in [&[][..], &["--seed", "99"][..], &["--no-intervention"][..]] {
        let out = dir.path().join(format!("r{}", hashes.len()));
        let mut args = vec!["pretrain", "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        assert_eq!(driftlab(&args).status.code(), Some(0));
        let m = manifest(&out, "pretrain");
        hashes.push(m["config_hash"].as_str().unwrap().to_string());
    }
    assert_ne!(hashes[0], hashes[1]);
    assert_ne!(hashes[0], hashes[2]);
    let ck = load_checkpoint(dir.path().join("r2/checkpoint_000020.rcpk")).unwrap();
    assert_eq!(ck.meta["intervention"], false);
}

#[test]
fn exported_features_round_trip() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let text = smoke_with_steps(15).replace("runs/smoke", s(&out));
    let cfg_path = write_config(dir.path(), "c.toml", &text);
    for cmd in ["pretrain", "export-features"] {
        let o = driftlab(&[cmd, "--config", s(&cfg_path)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let features = load_tensor(out.join("features.rcpt")).unwrap();
    let labels = load_tensor(out.join("labels.rcpt")).unwrap();

    let cfg = RunConfig::from_toml(&text).unwrap();
    let (want_f, want_l) = export_tensors(&cfg).unwrap();
    assert_eq!(features, want_f);
    assert_eq!(labels, want_l);

    // Independently: the leading rows are the encoder's features of the test draw.
    let source = cfg.build_source(cfg.seed).unwrap();
    let schedule = cfg.stream.schedule.build().unwrap();
    let data = EvalData::draw(
        &source,
        &schedule,
        cfg.eval_step(),
        &cfg.eval,
        &driftlab::Rng::new(cfg.seed),
    )
    .unwrap();
    let ck = load_checkpoint(out.join("checkpoint_000015.rcpk")).unwrap();
    let direct = extract_features(&ck.pair, &data.test_x).unwrap();
    for i in 0..direct.rows() {
        assert_eq!(features.row(i), direct.row(i));
        assert_eq!(labels.data()[i], data.test_y[i] as f64);
    }
    assert!(labels.data()[direct.rows()..].iter().all(|&l| l == -1.0));
    assert_eq!(features.rows(), direct.rows() + cfg.eval.ood_samples);
}

#[test]
fn empty_dataset_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    fs::write(&images, encode_idx_images(2, 2, &[])).unwrap();
    fs::write(&labels, encode_idx_labels(&[])).unwrap();
    let text = format!(
        "{SMOKE}\n[stream.idx]\nimages = {:?}\nlabels = {:?}\n",
        s(&images),
        s(&labels)
    );
    let cfg = write_config(dir.path(), "c.toml", &text);
    for cmd in ["pretrain", "export-features"] {
        let o = driftlab(&[cmd, "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains("stream.idx.images"), "{}", stderr(&o));
    }
}

#[test]
fn zero_test_samples_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &SMOKE.replace("test_per_class = 10", "test_per_class = 0"),
    );
    let o = driftlab(&["export-features", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eval.test_per_class"));
}

#[test]
fn ablate_window_writes_median_table() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMOKE);
    let out = dir.path().join("abl");
    let o = driftlab(&["ablate-window", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "window,many,medium,few,all");
    assert_eq!(rows.len(), 4);
    for (row, w) in rows[1..].iter().zip(["8", "16", "32"]) {
        assert_eq!(row.split(',').next(), Some(w));
    }
    let runs = fs::read_to_string(out.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 3 * 2);
}

#[test]
fn selftest_exits_zero() {
    let o = driftlab(&["selftest"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS grad.composite_window_loss")));
}

#[test]
fn injected_softmax_fault_fails_selftest_by_name() {
    let o = Command::new(env!("CARGO_BIN_EXE_driftlab"))
        .arg("selftest")
        .env("DRIFTLAB_SELFTEST_FAULT", "softmax_backward_sign_flip")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&o.stdout);
    assert_ne!(o.status.code(), Some(0), "{text}");
    assert!(text.lines().any(|l| l.starts_with("FAIL grad.softmax_rows")), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(driftlab(&["bogus"]).status.code(), Some(2));
    assert_eq!(driftlab(&["pretrain"]).status.code(), Some(2));
}
