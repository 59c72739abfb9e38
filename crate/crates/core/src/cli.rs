//! Command-line front end: `solve`, `train` and `compare`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{check_combination, Sensitivity};
use crate::ode::{
    solve_adaptive, Dynamics, FnDynamics, SolutionTrajectory, SolverOptions, Tableau,
};
use crate::regularization::RegMode;
use crate::training::{
    train_with, write_jsonl, write_summary_csv, DatasetSpec, EvalReport, Schedule, SkipRecord,
    Timing, TrainConfig, TrainOutcome,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "nde-forge",
    version,
    about = "Neural ODE training with solver error-estimate regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate a built-in problem and report solver statistics.
    Solve(SolveArgs),
    /// Train one model and write metrics, summary and manifest.
    Train(TrainArgs),
    /// Train matched-seed models per regularization mode and tabulate them.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Problem {
    /// `z' = 0` from `z0 = 1`.
    Constant,
    /// `z' = -z` from `z0 = 1`.
    ExpDecay,
    /// Damped linear rotation in the plane.
    SpiralDynamics,
}

impl Problem {
    fn default_t_end(self) -> f64 {
        match self {
            Problem::Constant | Problem::ExpDecay => 1.0,
            Problem::SpiralDynamics => 10.0,
        }
    }

    fn initial_state(self) -> Vec<f64> {
        match self {
            Problem::Constant | Problem::ExpDecay => vec![1.0],
            Problem::SpiralDynamics => vec![1.0, 0.0],
        }
    }

    fn dynamics(self) -> Box<dyn Dynamics> {
        match self {
            Problem::Constant => Box::new(FnDynamics::new(1, |_, _, out: &mut [f64]| out[0] = 0.0)),
            Problem::ExpDecay => Box::new(FnDynamics::new(1, |_, z: &[f64], out: &mut [f64]| {
                out[0] = -z[0]
            })),
            Problem::SpiralDynamics => {
                Box::new(FnDynamics::new(2, |_, z: &[f64], out: &mut [f64]| {
                    out[0] = -0.1 * z[0] + 2.0 * z[1];
                    out[1] = -2.0 * z[0] - 0.1 * z[1];
                }))
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub problem: Problem,
    #[arg(long, default_value_t = 1e-6)]
    pub atol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub rtol: f64,
    #[arg(long, default_value = "tsit5")]
    pub tableau: String,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Write one row per knot: t, state, e_est and dt of the step ending there.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Spirals,
    Moons,
    Blobs,
    Mnist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TimingArg {
    Wall,
    Off,
}

fn parse_reg(s: &str) -> std::result::Result<RegMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sensitivity(s: &str) -> std::result::Result<Sensitivity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Training options; each one given overrides the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainFlags {
    /// JSON training configuration (fields not given keep their defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding the four standard MNIST IDX files.
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_subsample: Option<usize>,
    #[arg(long)]
    pub test_subsample: Option<usize>,
    /// Training examples per class for synthetic datasets.
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, value_parser = parse_reg)]
    pub reg: Option<RegMode>,
    #[arg(long, value_parser = parse_sensitivity)]
    pub sensitivity: Option<Sensitivity>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_start: Option<f64>,
    #[arg(long)]
    pub lambda_end: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tableau: Option<String>,
    #[arg(long)]
    pub detach_state: bool,
    #[arg(long)]
    pub squared_reg: bool,
    /// Hidden widths of the dynamics network, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub augment_dim: Option<usize>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// `off` writes zero wall times so metric files are byte-reproducible.
    #[arg(long, value_enum)]
    pub timing: Option<TimingArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, default_value = "runs/train")]
    pub out_dir: PathBuf,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Regularization modes to compare, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_reg, required = true)]
    pub modes: Vec<RegMode>,
    /// Seeds run for every mode, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Run the sub-experiments concurrently.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long, default_value = "runs/compare")]
    pub out_dir: PathBuf,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn synthetic_sizes(spec: &DatasetSpec) -> (usize, usize, f64) {
    match *spec {
        DatasetSpec::Spirals {
            n_train_per_class,
            n_test_per_class,
            noise_sd,
        }
        | DatasetSpec::Moons {
            n_train_per_class,
            n_test_per_class,
            noise_sd,
        } => (n_train_per_class, n_test_per_class, noise_sd),
        DatasetSpec::Blobs {
            n_train_per_class,
            n_test_per_class,
            sd,
            ..
        } => (n_train_per_class, n_test_per_class, sd),
        DatasetSpec::Mnist { .. } => (256, 256, 0.02),
    }
}

impl TrainFlags {
    /// Resolve `defaults < base (config file or manifest) < flags`.
    pub fn resolve(&self, base: Option<TrainConfig>) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, base) {
            (_, Some(cfg)) => cfg,
            (Some(path), None) => read_json(path)?,
            (None, None) => TrainConfig::default(),
        };
        if let Some(kind) = self.dataset {
            let (n_train, n_test, noise) = synthetic_sizes(&cfg.dataset);
            cfg.dataset = match kind {
                DatasetKind::Spirals => DatasetSpec::Spirals {
                    n_train_per_class: n_train,
                    n_test_per_class: n_test,
                    noise_sd: noise,
                },
                DatasetKind::Moons => DatasetSpec::Moons {
                    n_train_per_class: n_train,
                    n_test_per_class: n_test,
                    noise_sd: noise.max(0.1),
                },
                DatasetKind::Blobs => DatasetSpec::Blobs {
                    n_train_per_class: n_train,
                    n_test_per_class: n_test,
                    separation: 4.0,
                    sd: noise.max(0.5),
                },
                DatasetKind::Mnist => {
                    let dir = self
                        .mnist_dir
                        .clone()
                        .ok_or_else(|| Error::Config("--dataset mnist needs --mnist-dir".into()))?;
                    if self.hidden.is_none() {
                        cfg.hidden = vec![64];
                        cfg.augment_dim = 0;
                    }
                    DatasetSpec::Mnist {
                        train_images: dir.join("train-images-idx3-ubyte"),
                        train_labels: dir.join("train-labels-idx1-ubyte"),
                        test_images: dir.join("t10k-images-idx3-ubyte"),
                        test_labels: dir.join("t10k-labels-idx1-ubyte"),
                        train_subsample: Some(10_000),
                        test_subsample: Some(2_000),
                    }
                }
            };
        }
        match &mut cfg.dataset {
            DatasetSpec::Spirals {
                n_train_per_class,
                noise_sd,
                ..
            }
            | DatasetSpec::Moons {
                n_train_per_class,
                noise_sd,
                ..
            }
            | DatasetSpec::Blobs {
                n_train_per_class,
                sd: noise_sd,
                ..
            } => {
                if let Some(n) = self.n_per_class {
                    *n_train_per_class = n;
                }
                if let Some(s) = self.noise_sd {
                    *noise_sd = s;
                }
            }
            DatasetSpec::Mnist {
                train_subsample,
                test_subsample,
                ..
            } => {
                if self.train_subsample.is_some() {
                    *train_subsample = self.train_subsample;
                }
                if self.test_subsample.is_some() {
                    *test_subsample = self.test_subsample;
                }
            }
        }
        macro_rules! set {
            ($($field:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $dst = v; })*
            };
        }
        set!(
            reg => cfg.reg.mode,
            sensitivity => cfg.sensitivity,
            atol => cfg.atol,
            rtol => cfg.rtol,
            steps => cfg.steps,
            batch_size => cfg.batch_size,
            lr => cfg.lr,
            lambda_start => cfg.lambda_start,
            lambda_end => cfg.lambda_end,
            seed => cfg.seed,
            tableau => cfg.tableau,
            hidden => cfg.hidden,
            augment_dim => cfg.augment_dim,
            t_end => cfg.t_end,
        );
        if let Some(s) = self.schedule {
            cfg.schedule = match s {
                ScheduleArg::Constant => Schedule::Constant,
                ScheduleArg::Exponential => Schedule::Exponential,
            };
        }
        if let Some(t) = self.timing {
            cfg.timing = match t {
                TimingArg::Wall => Timing::Wall,
                TimingArg::Off => Timing::Off,
            };
        }
        if self.detach_state {
            cfg.reg.detach_state = true;
        }
        if self.squared_reg {
            cfg.reg.squared = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Provenance written next to every set of metric files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub tableau: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub train: EvalReport,
    pub test: EvalReport,
    pub train_time_s: f64,
    pub skipped_batches: Vec<SkipRecord>,
}

pub const STEPS_FILE: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::State(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Train under `cfg` and write the four run files into `out_dir`.
pub fn run_training(cfg: &TrainConfig, out_dir: &Path) -> Result<(TrainOutcome, RunManifest)> {
    cfg.validate()?;
    let started_at = now();
    let (train, test) = cfg.dataset.load(cfg.seed)?;
    let outcome = train_with(cfg, &train, &test, |_| {})?;
    fs::create_dir_all(out_dir)?;

    let mut w = BufWriter::new(File::create(out_dir.join(STEPS_FILE))?);
    write_jsonl(&mut w, &outcome.history)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out_dir.join(SUMMARY_FILE))?);
    write_summary_csv(&mut w, &outcome.history)?;
    w.flush()?;
    write_json(
        &out_dir.join(EVAL_FILE),
        &EvalSummary {
            train: outcome.train_eval.clone(),
            test: outcome.test_eval.clone(),
            train_time_s: outcome.train_time_s,
            skipped_batches: outcome.skipped.clone(),
        },
    )?;
    let manifest = RunManifest {
        tool_version: format!("nde-forge {}", env!("CARGO_PKG_VERSION")),
        config: cfg.clone(),
        seed: cfg.seed,
        tableau: cfg.tableau.clone(),
        started_at,
        finished_at: now(),
        outputs: [STEPS_FILE, SUMMARY_FILE, EVAL_FILE]
            .iter()
            .map(PathBuf::from)
            .collect(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok((outcome, manifest))
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: RegMode,
    pub runs: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_time_s: f64,
    pub pred_ms_per_batch: f64,
    pub test_nfe_mean: f64,
    pub test_nfe_sd: f64,
    pub nfe_ratio_vs_none: Option<f64>,
}

impl CompareRow {
    pub const CSV_HEADER: &'static str =
        "mode,runs,train_acc,test_acc,train_time_s,pred_ms_per_batch,test_nfe_mean,test_nfe_sd,nfe_ratio_vs_none";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.runs,
            self.train_acc,
            self.test_acc,
            self.train_time_s,
            self.pred_ms_per_batch,
            self.test_nfe_mean,
            self.test_nfe_sd,
            self.nfe_ratio_vs_none
                .map_or(String::new(), |r| r.to_string())
        )
    }
}

/// Per-run result of a comparison.
#[derive(Debug)]
pub struct CompareRun {
    pub mode: RegMode,
    pub seed: u64,
    pub outcome: Result<TrainOutcome>,
}

/// Configuration used for `mode` in a comparison: vanilla runs drop the
/// coefficient, everything else is shared.
pub fn mode_config(base: &TrainConfig, mode: RegMode, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.reg.mode = mode;
    cfg.seed = seed;
    if mode == RegMode::None {
        cfg.lambda_start = 0.0;
        cfg.lambda_end = 0.0;
        cfg.schedule = Schedule::Constant;
    }
    cfg
}

/// Remove repeated modes, keeping first occurrences. Returns the repeats.
pub fn dedup_modes(modes: &[RegMode]) -> (Vec<RegMode>, Vec<RegMode>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for &m in modes {
        if kept.contains(&m) {
            dropped.push(m);
        } else {
            kept.push(m);
        }
    }
    (kept, dropped)
}

/// Train every `(mode, seed)` pair. With `out_dir`, each run writes its files
/// to `out_dir/<mode>/seed-<seed>`.
pub fn run_compare(
    base: &TrainConfig,
    modes: &[RegMode],
    seeds: &[u64],
    parallel: bool,
    out_dir: Option<&Path>,
) -> Result<Vec<CompareRun>> {
    if modes.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two distinct modes".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    for &m in modes {
        check_combination(m, base.sensitivity)?;
        mode_config(base, m, seeds[0]).validate()?;
    }
    let jobs: Vec<(RegMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run = |&(mode, seed): &(RegMode, u64)| {
        let cfg = mode_config(base, mode, seed);
        let outcome = match out_dir {
            Some(dir) => run_training(&cfg, &dir.join(mode.as_str()).join(format!("seed-{seed}")))
                .map(|(o, _)| o),
            None => cfg
                .dataset
                .load(seed)
                .and_then(|(tr, te)| train_with(&cfg, &tr, &te, |_| {})),
        };
        CompareRun {
            mode,
            seed,
            outcome,
        }
    };
    Ok(if parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    })
}

/// Aggregate runs per mode: accuracies and times are averaged over seeds,
/// NFE statistics pooled over all test trajectories.
pub fn compare_table(modes: &[RegMode], runs: &[CompareRun]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = modes
        .iter()
        .filter_map(|&mode| {
            let ok: Vec<&TrainOutcome> = runs
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            if ok.is_empty() {
                return None;
            }
            let k = ok.len() as f64;
            let mean = |f: &dyn Fn(&TrainOutcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / k;
            let n_total: usize = ok.iter().map(|o| o.test_eval.n).sum();
            let nfe_mean = ok
                .iter()
                .map(|o| o.test_eval.nfe_mean * o.test_eval.n as f64)
                .sum::<f64>()
                / n_total as f64;
            let ss: f64 = ok
                .iter()
                .map(|o| {
                    let e = &o.test_eval;
                    (e.n as f64 - 1.0) * e.nfe_sd * e.nfe_sd
                        + e.n as f64 * (e.nfe_mean - nfe_mean).powi(2)
                })
                .sum();
            let sd = if n_total > 1 {
                (ss / (n_total - 1) as f64).sqrt()
            } else {
                0.0
            };
            Some(CompareRow {
                mode,
                runs: ok.len(),
                train_acc: mean(&|o| o.train_eval.accuracy),
                test_acc: mean(&|o| o.test_eval.accuracy),
                train_time_s: mean(&|o| o.train_time_s),
                pred_ms_per_batch: mean(&|o| o.test_eval.pred_ms_per_batch),
                test_nfe_mean: nfe_mean,
                test_nfe_sd: sd,
                nfe_ratio_vs_none: None,
            })
        })
        .collect();
    if let Some(base) = rows
        .iter()
        .find(|r| r.mode == RegMode::None)
        .map(|r| r.test_nfe_mean)
    {
        for r in &mut rows {
            r.nfe_ratio_vs_none = Some(r.test_nfe_mean / base);
        }
    }
    rows
}

pub fn write_compare_csv<W: Write>(mut w: W, rows: &[CompareRow]) -> Result<()> {
    writeln!(w, "{}", CompareRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn write_solve_csv(path: &Path, sol: &SolutionTrajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = sol.z[0].len();
    let cols: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
    writeln!(w, "t,{},e_est,dt", cols.join(","))?;
    for (j, (t, z)) in sol.t.iter().zip(&sol.z).enumerate() {
        let zs: Vec<String> = z.iter().map(f64::to_string).collect();
        let (e, dt) = if j == 0 {
            (String::new(), String::new())
        } else {
            (
                sol.e_est_per_step[j - 1].to_string(),
                sol.dt_per_step[j - 1].to_string(),
            )
        };
        writeln!(w, "{t},{},{e},{dt}", zs.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_solve(args: &SolveArgs, out: &mut dyn Write) -> Result<()> {
    let tab = Tableau::by_name(&args.tableau).ok_or_else(|| {
        Error::Config(format!(
            "unknown tableau {:?}; expected tsit5, bs3 or rk4",
            args.tableau
        ))
    })?;
    let opts = SolverOptions::with_tolerances(args.atol, args.rtol);
    opts.validate().map_err(|e| Error::Config(e.to_string()))?;
    let t_end = args.t_end.unwrap_or_else(|| args.problem.default_t_end());
    let f = args.problem.dynamics();
    let sol = solve_adaptive(
        f.as_ref(),
        &args.problem.initial_state(),
        (0.0, t_end),
        &tab,
        &opts,
        false,
    )?;
    writeln!(out, "knots: {}", sol.t.len())?;
    writeln!(out, "accepted_steps: {}", sol.accepted_steps())?;
    writeln!(out, "rejected_steps: {}", sol.rejected_steps)?;
    writeln!(out, "nfe: {}", sol.nfe)?;
    let z: Vec<String> = sol
        .final_state()
        .iter()
        .map(|v| format!("{v:.12e}"))
        .collect();
    writeln!(out, "final_state: {}", z.join(" "))?;
    if let Some(path) = &args.csv {
        write_solve_csv(path, &sol)?;
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let base = match &args.manifest {
        Some(path) => Some(read_json::<RunManifest>(path)?.config),
        None => None,
    };
    let cfg = args.flags.resolve(base)?;
    let (outcome, _) = run_training(&cfg, &args.out_dir)?;
    writeln!(
        out,
        "train_acc {:.4} test_acc {:.4} test_nfe {:.2} ± {:.2} skipped {} -> {}",
        outcome.train_eval.accuracy,
        outcome.test_eval.accuracy,
        outcome.test_eval.nfe_mean,
        outcome.test_eval.nfe_sd,
        outcome.skipped.len(),
        args.out_dir.display()
    )?;
    Ok(())
}

fn cmd_compare(args: &CompareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = args.flags.resolve(None)?;
    if args.flags.timing.is_none() {
        cfg.timing = Timing::Wall;
    }
    let (modes, dropped) = dedup_modes(&args.modes);
    for m in dropped {
        writeln!(
            err,
            "warning: mode {m} listed more than once; running it once"
        )?;
    }
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    let runs = run_compare(&cfg, &modes, &seeds, args.parallel, Some(&args.out_dir))?;
    let rows = compare_table(&modes, &runs);
    fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join("compare.csv");
    let mut w = BufWriter::new(File::create(&path)?);
    write_compare_csv(&mut w, &rows)?;
    w.flush()?;
    write_compare_csv(&mut *out, &rows)?;
    let failed: Vec<String> = runs
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .err()
                .map(|e| format!("{} seed {}: {e}", r.mode, r.seed))
        })
        .collect();
    if !failed.is_empty() {
        return Err(Error::State(format!(
            "{} sub-run(s) failed: {}",
            failed.len(),
            failed.join("; ")
        )));
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render().ansi());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Compare(a) => cmd_compare(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
