//! Seed fans and ablation grids on a bounded worker pool.
//!
//! Every run writes its own files (`seed_<s>.csv`, optionally
//! `seed_<s>.ckpt`), so workers never share a writer. Summaries are written
//! once all runs of a directory have finished.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use atd_core::config::{ExperimentConfig, LambdaMode};
use atd_core::learners::checkpoint::save_checkpoint;
use atd_core::learners::{train_run, MetricRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_file::render_config;
use crate::error::{LabError, LabResult};
use crate::report::{csv_name, mean_var, records_to_csv, Summary};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub checkpoints: bool,
    /// One progress line per finished run on stderr.
    pub verbose: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            workers: 1,
            checkpoints: true,
            verbose: false,
        }
    }
}

pub fn checkpoint_name(seed: u64) -> String {
    format!("seed_{seed}.ckpt")
}

struct Job {
    label: String,
    dir: PathBuf,
    cfg: ExperimentConfig,
    seed: u64,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> LabResult<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

fn create_dir(path: &Path) -> LabResult<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

fn execute(job: &Job, opts: &RunOptions) -> Result<Vec<MetricRecord>, String> {
    let start = Instant::now();
    let result = (|| -> LabResult<Vec<MetricRecord>> {
        let out = train_run(&job.cfg, job.seed, |_| {})?;
        write(&job.dir.join(csv_name(job.seed)), records_to_csv(&out.records)?)?;
        if opts.checkpoints {
            save_checkpoint(&job.dir.join(checkpoint_name(job.seed)), &job.cfg, &out.learner)?;
        }
        Ok(out.records)
    })();
    if opts.verbose {
        match &result {
            Ok(r) => eprintln!(
                "[{} seed {}] final return {:.3} ({:.1?})",
                job.label,
                job.seed,
                r.last().map_or(f64::NAN, |x| x.eval_return),
                start.elapsed()
            ),
            Err(e) => eprintln!("[{} seed {}] failed: {e}", job.label, job.seed),
        }
    }
    result.map_err(|e| e.to_string())
}

fn run_jobs(jobs: &[Job], opts: &RunOptions) -> LabResult<Vec<Result<Vec<MetricRecord>, String>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| LabError::Format {
            what: "worker pool",
            message: e.to_string(),
        })?;
    Ok(pool.install(|| jobs.par_iter().map(|j| execute(j, opts)).collect()))
}

fn finish_dir(dir: &Path, label: &str, cfg: &ExperimentConfig, runs: Vec<(u64, Result<Vec<MetricRecord>, String>)>) -> LabResult<Summary> {
    let summary = Summary::build(label, &cfg.lambda_mode.label(), &runs);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| LabError::Format {
        what: "summary",
        message: e.to_string(),
    })?;
    write(&dir.join(SUMMARY_FILE), json)?;
    Ok(summary)
}

/// Train every seed in `cfg.seeds`, writing per-seed CSVs (and checkpoints),
/// `config.txt` and `summary.json` under `opts.out_dir`. Individual seed
/// failures are recorded in the summary, not returned as errors.
pub fn run_experiment(cfg: &ExperimentConfig, label: &str, opts: &RunOptions) -> LabResult<Summary> {
    cfg.validate()?;
    create_dir(&opts.out_dir)?;
    write(&opts.out_dir.join(CONFIG_FILE), render_config(cfg))?;
    let jobs: Vec<Job> = cfg
        .seeds
        .iter()
        .map(|&seed| Job {
            label: label.to_string(),
            dir: opts.out_dir.clone(),
            cfg: cfg.clone(),
            seed,
        })
        .collect();
    let results = run_jobs(&jobs, opts)?;
    let runs = cfg.seeds.iter().copied().zip(results).collect();
    finish_dir(&opts.out_dir, label, cfg, runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Grid {
    /// λ ∈ {0, 0.4, 0.6, 0.8, 1} plus adaptive.
    LambdaGrid,
    /// On/off capacity ratios 10, 25, 50, 100.
    BufferRatio,
    /// λ-cache refreshes per target update: 5, 2, 1, 0.5, 0.2.
    CacheFrequency,
}

pub const FIXED_LAMBDAS: [f64; 5] = [0.0, 0.4, 0.6, 0.8, 1.0];
pub const BUFFER_RATIOS: [usize; 4] = [10, 25, 50, 100];
pub const CACHE_FREQUENCIES: [f64; 5] = [5.0, 2.0, 1.0, 0.5, 0.2];

impl Grid {
    pub fn name(self) -> &'static str {
        match self {
            Grid::LambdaGrid => "lambda_grid",
            Grid::BufferRatio => "buffer_ratio",
            Grid::CacheFrequency => "cache_frequency",
        }
    }

    /// `(label, config)` per cell, in table order.
    pub fn cells(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Grid::LambdaGrid => FIXED_LAMBDAS
                .iter()
                .map(|&l| (format!("lambda_{l}"), with(&|c| c.lambda_mode = LambdaMode::Fixed(l))))
                .chain(std::iter::once((
                    "adaptive".to_string(),
                    with(&|c| c.lambda_mode = LambdaMode::Adaptive),
                )))
                .collect(),
            Grid::BufferRatio => BUFFER_RATIOS
                .iter()
                .map(|&r| (format!("ratio_{r}x"), with(&|c| c.buffer_ratio = r)))
                .collect(),
            Grid::CacheFrequency => CACHE_FREQUENCIES
                .iter()
                .map(|&f| (format!("cache_{f}x"), with(&|c| c.cache_frequency = f)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub final_return_mean: Option<f64>,
    /// Sample standard deviation across seeds.
    pub final_return_std: Option<f64>,
    pub final_success_mean: Option<f64>,
    pub final_mean_lambda: Option<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: Grid,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
}

impl AblationReport {
    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.seeds_failed == 0)
    }
}

fn cell_report(label: &str, summary: Option<&Summary>, error: Option<String>) -> CellReport {
    let mut errors: Vec<String> = error.into_iter().collect();
    let (mut ok, mut failed) = (0, 0);
    let mut finals = Vec::new();
    if let Some(s) = summary {
        for seed in &s.seeds {
            match (&seed.error, seed.final_record) {
                (None, Some(r)) => {
                    ok += 1;
                    finals.push(r);
                }
                (err, _) => {
                    failed += 1;
                    errors.push(format!("seed {}: {}", seed.seed, err.as_deref().unwrap_or("no records")));
                }
            }
        }
    }
    let returns: Vec<f64> = finals.iter().map(|r| r.eval_return).collect();
    let stat = |xs: Vec<f64>| (!xs.is_empty()).then(|| mean_var(&xs).0);
    CellReport {
        label: label.to_string(),
        seeds_ok: ok,
        seeds_failed: failed + usize::from(summary.is_none()),
        final_return_mean: stat(returns.clone()),
        final_return_std: (!returns.is_empty()).then(|| mean_var(&returns).1.sqrt()),
        final_success_mean: stat(finals.iter().map(|r| r.success_rate).collect()),
        final_mean_lambda: stat(finals.iter().map(|r| r.mean_lambda).collect()),
        errors,
    }
}

/// Run every cell of `grid` over `base.seeds`. Each cell gets its own
/// sub-directory; the grid-level `ablation.json` and `ablation.md` tables
/// land in `opts.out_dir`. A failing cell is reported, not fatal.
pub fn run_ablation(grid: Grid, base: &ExperimentConfig, opts: &RunOptions) -> LabResult<AblationReport> {
    base.validate()?;
    create_dir(&opts.out_dir)?;
    let cells = grid.cells(base);
    let mut jobs = Vec::new();
    let mut prepared: Vec<Result<PathBuf, String>> = Vec::new();
    for (label, cfg) in &cells {
        let dir = opts.out_dir.join(label);
        let ready = cfg
            .validate()
            .map_err(LabError::from)
            .and_then(|_| create_dir(&dir))
            .and_then(|_| write(&dir.join(CONFIG_FILE), render_config(cfg)));
        match ready {
            Ok(()) => {
                jobs.extend(cfg.seeds.iter().map(|&seed| Job {
                    label: label.clone(),
                    dir: dir.clone(),
                    cfg: cfg.clone(),
                    seed,
                }));
                prepared.push(Ok(dir));
            }
            Err(e) => prepared.push(Err(e.to_string())),
        }
    }
    let mut results = run_jobs(&jobs, opts)?.into_iter();

    let mut reports = Vec::new();
    for ((label, cfg), ready) in cells.iter().zip(prepared) {
        let report = match ready {
            Ok(dir) => {
                let runs: Vec<_> = cfg.seeds.iter().map(|&s| (s, results.next().unwrap_or(Err("missing result".into())))).collect();
                match finish_dir(&dir, label, cfg, runs) {
                    Ok(summary) => cell_report(label, Some(&summary), None),
                    Err(e) => cell_report(label, None, Some(e.to_string())),
                }
            }
            Err(e) => cell_report(label, None, Some(e)),
        };
        reports.push(report);
    }
    let report = AblationReport {
        grid,
        seeds: base.seeds.clone(),
        cells: reports,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| LabError::Format {
        what: "ablation report",
        message: e.to_string(),
    })?;
    write(&opts.out_dir.join("ablation.json"), json)?;
    write(&opts.out_dir.join("ablation.md"), render_table(&report))?;
    Ok(report)
}

/// Markdown comparison table: final mean return ± std per cell.
pub fn render_table(report: &AblationReport) -> String {
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    let mut out = format!(
        "# {} ({} seeds)\n\n| cell | final return (mean ± std) | success | mean λ | ok/failed |\n|---|---|---|---|---|\n",
        report.grid.name(),
        report.seeds.len()
    );
    for c in &report.cells {
        out.push_str(&format!(
            "| {} | {} ± {} | {} | {} | {}/{} |\n",
            c.label,
            fmt(c.final_return_mean),
            fmt(c.final_return_std),
            fmt(c.final_success_mean),
            fmt(c.final_mean_lambda),
            c.seeds_ok,
            c.seeds_failed
        ));
    }
    for c in report.cells.iter().filter(|c| !c.errors.is_empty()) {
        out.push_str(&format!("\n{}: {}\n", c.label, c.errors.join("; ")));
    }
    out
}
