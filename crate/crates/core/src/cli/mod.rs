//! Experiment runner behind the `driftlab` binary.
//!
//! Exit codes: 0 ok, 1 selftest failure or internal error, 2 config,
//! 3 training, 4 checkpoint, 5 I/O.

pub mod config;
pub mod selftest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use selftest::cmd_selftest;

use crate::error::{Error, Result};
use crate::eval::{evaluate, extract_features, EvalData, EvalReport};
use crate::model::{load_checkpoint, Checkpoint};
use crate::numkern::{inject_fault, Fault, Rng, Tensor};
use crate::rcp::{pretrain, write_trace_csv, PretrainOutcome};
use crate::stream::save_tensor;

pub const ARTIFACT_VERSION: &str = concat!("driftlab ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Resilient contrastive pre-training on drifting streams"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration (not needed by `selftest`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `io.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Train with the plain momentum-contrast loss instead of the
    /// intervention.
    #[arg(long, global = true)]
    pub no_intervention: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train from scratch and write checkpoints, the loss trace and a manifest.
    Pretrain,
    /// Score a checkpoint: probe, angle metrics and OOD detection.
    Eval,
    /// Pretrain and evaluate once per window size and seed.
    AblateWindow,
    /// Write evaluation features and labels as tensor files.
    ExportFeatures,
    /// Run the invariant suite.
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Eval => "eval",
            Command::AblateWindow => "ablate-window",
            Command::ExportFeatures => "export-features",
            Command::Selftest => "selftest",
        }
    }
}

/// Record of one command invocation, written as `manifest_<command>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Files written by the run, relative to the output directory.
    pub files: Vec<String>,
    pub metrics: serde_json::Value,
    pub config: RunConfig,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Run<'a> {
    cfg: &'a RunConfig,
    command: Command,
    out: PathBuf,
    started: u64,
    files: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a RunConfig, command: Command) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.io.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Run {
            cfg,
            command,
            out,
            started: unix_now(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.out).unwrap_or(path);
        self.files.push(rel.to_string_lossy().into_owned());
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        write_atomic(&path, contents.as_bytes())?;
        self.record(&path);
        Ok(())
    }

    fn finish(self, metrics: serde_json::Value) -> Result<RunManifest> {
        let manifest = RunManifest {
            artifact_version: ARTIFACT_VERSION.into(),
            command: self.command.name().into(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            started_unix: self.started,
            finished_unix: unix_now(),
            files: self.files,
            metrics,
            config: self.cfg.clone(),
        };
        let path = self
            .out
            .join(format!("manifest_{}.json", self.command.name().replace('-', "_")));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&path, json.as_bytes())?;
        Ok(manifest)
    }
}

/// Pretrains with `window` and `seed`, optionally checkpointing into `dir`.
pub fn run_pretrain(cfg: &RunConfig, window: usize, seed: u64, dir: Option<&Path>) -> Result<PretrainOutcome> {
    let source = cfg.build_source(seed)?;
    let pcfg = cfg.pretrain_config(source, window, dir)?;
    pretrain(&pcfg, seed)
}

/// Draws the evaluation sets for `seed` at the configured step.
pub fn eval_data(cfg: &RunConfig, seed: u64) -> Result<EvalData> {
    let source = cfg.build_source(seed)?;
    let schedule = cfg.stream.schedule.build()?;
    EvalData::draw(&source, &schedule, cfg.eval_step(), &cfg.eval, &Rng::new(seed))
}

/// One in-memory pretrain followed by an evaluation of the result.
pub fn pretrain_and_eval(cfg: &RunConfig, window: usize, seed: u64) -> Result<(PretrainOutcome, EvalReport)> {
    let outcome = run_pretrain(cfg, window, seed, None)?;
    let report = evaluate(&outcome.pair, &eval_data(cfg, seed)?, &cfg.eval)?;
    Ok((outcome, report))
}

fn loss_summary(outcome: &PretrainOutcome) -> serde_json::Value {
    let losses: Vec<f64> = outcome.trace.iter().map(|r| r.loss).collect();
    let tail = losses.len().div_ceil(10);
    let tail_mean = (tail > 0).then(|| losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64);
    serde_json::json!({
        "steps": losses.len(),
        "first_loss": losses.first(),
        "final_loss": losses.last(),
        "tail_mean_loss": tail_mean,
    })
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg, Command::Pretrain)?;
    let outcome = run_pretrain(cfg, cfg.window_size()?, cfg.seed, Some(&run.out))?;
    for p in &outcome.checkpoints {
        run.record(p);
    }
    let trace = run.path("trace.csv");
    write_trace_csv(&trace, &outcome.trace)?;
    run.record(&trace);
    run.finish(loss_summary(&outcome))
}

/// `io.checkpoint`, or the final checkpoint `pretrain` would write.
pub fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cfg.io.checkpoint {
        return Ok(p.clone());
    }
    let steps = cfg
        .pretrain_config(cfg.build_source(cfg.seed)?, cfg.window_size()?, None)?
        .steps;
    Ok(cfg
        .io
        .out_dir
        .join(cfg.io.checkpoint_pattern.replace("{step}", &format!("{steps:06}"))))
}

fn load_compatible(cfg: &RunConfig, data: &EvalData) -> Result<Checkpoint> {
    let ck = load_checkpoint(checkpoint_path(cfg)?)?;
    let want = data.test_x.cols();
    let have = ck.pair.encoder_spec().input_width();
    if have != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint encoder takes {have} inputs, the configured stream has {want}"
        )));
    }
    Ok(ck)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg, Command::Eval)?;
    let data = eval_data(cfg, cfg.seed)?;
    let ck = load_compatible(cfg, &data)?;
    let report = evaluate(&ck.pair, &data, &cfg.eval)?;
    run.write("metrics.csv", &report.to_csv())?;
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    run.write("metrics.json", &json)?;
    run.finish(report.summary())
}

/// Worker count: `DRIFTLAB_THREADS` if set, else the available cores.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("DRIFTLAB_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(
                "DRIFTLAB_THREADS",
                format!("expected a positive integer, got {v:?}"),
            )),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Median of the values present; `None` if there are none.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Probe accuracies of one ablation cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub window: usize,
    pub seed: u64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: f64,
    pub intra_all: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Every (window, seed) pair, run on up to `threads` workers. Results come
/// back in (window, seed) order whatever the scheduling.
pub fn ablation_rows(cfg: &RunConfig, windows: &[usize], seeds: &[u64], threads: usize) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, u64)> = windows
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(window, seed)| {
                let (_, report) = pretrain_and_eval(cfg, window, seed)?;
                let t = &report.probe.top1;
                Ok(AblationRow {
                    window,
                    seed,
                    many: t.many,
                    medium: t.medium,
                    few: t.few,
                    all: t.all,
                    intra_all: report.angles.intra.all,
                })
            })
            .collect()
    })
}

/// `window,many,medium,few,all` with the median over seeds.
pub fn ablation_csv(windows: &[usize], rows: &[AblationRow]) -> String {
    let mut out = String::from("window,many,medium,few,all\n");
    for &w in windows {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.window == w).collect();
        let col = |f: &dyn Fn(&AblationRow) -> Option<f64>| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        writeln!(
            out,
            "{w},{},{},{},{}",
            cell(col(&|r| r.many)),
            cell(col(&|r| r.medium)),
            cell(col(&|r| r.few)),
            cell(col(&|r| Some(r.all)))
        )
        .expect("string write");
    }
    out
}

pub fn cmd_ablate_window(cfg: &RunConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg, Command::AblateWindow)?;
    let windows = cfg.ablation_windows()?;
    let seeds = cfg.ablation_seeds();
    let rows = ablation_rows(cfg, &windows, &seeds, worker_threads()?)?;

    let mut runs = String::from("window,seed,many,medium,few,all,intra_all\n");
    for r in &rows {
        writeln!(
            runs,
            "{},{},{},{},{},{},{}",
            r.window,
            r.seed,
            cell(r.many),
            cell(r.medium),
            cell(r.few),
            r.all,
            r.intra_all
        )
        .expect("string write");
    }
    run.write("ablation_runs.csv", &runs)?;
    run.write("ablation.csv", &ablation_csv(&windows, &rows))?;
    let summary: Vec<_> = windows
        .iter()
        .map(|&w| {
            let all: Vec<Option<f64>> = rows.iter().filter(|r| r.window == w).map(|r| Some(r.all)).collect();
            serde_json::json!({ "window": w, "median_all": median(&all) })
        })
        .collect();
    run.finish(serde_json::json!({ "windows": summary, "seeds": seeds }))
}

/// Balanced test features followed by OOD features; OOD rows are labelled −1.
pub fn export_tensors(cfg: &RunConfig) -> Result<(Tensor, Tensor)> {
    let data = eval_data(cfg, cfg.seed)?;
    let ck = load_compatible(cfg, &data)?;
    let test = extract_features(&ck.pair, &data.test_x)?;
    let ood = extract_features(&ck.pair, &data.ood_x)?;
    let features = Tensor::vstack(&[test, ood])?;
    let labels: Vec<f64> = data
        .test_y
        .iter()
        .map(|&y| y as f64)
        .chain(std::iter::repeat_n(-1.0, data.ood_x.rows()))
        .collect();
    Ok((features, Tensor::vector(labels)?))
}

pub fn cmd_export_features(cfg: &RunConfig) -> Result<RunManifest> {
    let mut run = Run::start(cfg, Command::ExportFeatures)?;
    let (features, labels) = export_tensors(cfg)?;
    if features.rows() == 0 {
        return Err(Error::config("eval.test_per_class", "nothing to export"));
    }
    let fpath = run.path("features.rcpt");
    save_tensor(&fpath, &features)?;
    run.record(&fpath);
    let lpath = run.path("labels.rcpt");
    save_tensor(&lpath, &labels)?;
    run.record(&lpath);
    run.finish(serde_json::json!({ "rows": features.rows(), "dim": features.cols() }))
}

/// Loads the config named on the command line and applies the overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "this command needs a config file"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.io.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.no_intervention {
        cfg.rcp.intervention = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    if cli.command == Command::Selftest {
        // Lets tests prove that a broken backward rule fails the binary.
        let _fault = match std::env::var("DRIFTLAB_SELFTEST_FAULT").as_deref() {
            Ok("softmax_backward_sign_flip") => Some(inject_fault(Fault::SoftmaxBackwardSignFlip)),
            Ok(other) => {
                eprintln!("error: DRIFTLAB_SELFTEST_FAULT: unknown fault {other:?}");
                return 2;
            }
            Err(_) => None,
        };
        return cmd_selftest(&mut std::io::stdout());
    }
    let result = resolve_config(cli).and_then(|cfg| match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::AblateWindow => cmd_ablate_window(&cfg),
        Command::ExportFeatures => cmd_export_features(&cfg),
        Command::Selftest => unreachable!(),
    });
    match result {
        Ok(m) => {
            println!("{} ok: {} files in {}", m.command, m.files.len(), cli_out(cli, &m));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cli_out(cli: &Cli, m: &RunManifest) -> String {
    cli.out
        .clone()
        .unwrap_or_else(|| m.config.io.out_dir.clone())
        .display()
        .to_string()
}

/// Entry point for the binary: parses `args` and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}
