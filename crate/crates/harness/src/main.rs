use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atd_core::learners::checkpoint::load_checkpoint;
use atd_core::learners::evaluate;
use atd_lab::config_file::parse_seed_list;
use atd_lab::experiment::render_table;
use atd_lab::{exit, oracle_check, parse_config_with_env, run_ablation, run_experiment, Grid, LabError, RunOptions, Suite};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atd-lab", version, about = "Adaptive TD(λ) experiments and oracle certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Comma-separated seeds; replaces the config's `seeds`.
    #[arg(long)]
    seed_list: Option<String>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Skip writing per-seed checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config.
    Train {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run a named ablation grid around a base config.
    Ablate {
        grid: Grid,
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run a certificate suite and print its JSON report.
    OracleCheck {
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the suite's standard trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Greedy evaluation of a saved checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Defaults to the checkpoint config's `eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(code: u8, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn code_for(err: &LabError) -> u8 {
    match err {
        LabError::Config { .. } => exit::CONFIG_ERROR,
        _ => exit::RUN_FAILURE,
    }
}

fn load_config(path: &Path, flags: &RunFlags) -> Result<atd_core::config::ExperimentConfig, LabError> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::config(0, format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config_with_env(&text)?;
    if let Some(list) = &flags.seed_list {
        cfg.seeds = parse_seed_list(list).map_err(|m| LabError::config(0, format!("--seed-list: {m}")))?;
    }
    Ok(cfg)
}

fn options(flags: &RunFlags) -> RunOptions {
    RunOptions {
        out_dir: flags.out_dir.clone(),
        workers: flags.workers,
        checkpoints: !flags.no_checkpoints,
        verbose: true,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, flags } => {
            let cfg = match load_config(&config, &flags) {
                Ok(c) => c,
                Err(e) => return fail(code_for(&e), e),
            };
            let label = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            match run_experiment(&cfg, &label, &options(&flags)) {
                Ok(summary) => {
                    if let Some(cs) = &summary.cross_seed {
                        println!(
                            "{label}: final return {:.3} ± {:.3} over {} seeds, success {:.3}",
                            cs.final_return_mean,
                            cs.final_return_std(),
                            cs.n_seeds,
                            cs.final_success_mean
                        );
                    }
                    let failed: Vec<String> = summary
                        .failures()
                        .map(|s| format!("seed {}: {}", s.seed, s.error.as_deref().unwrap_or("")))
                        .collect();
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        fail(exit::RUN_FAILURE, failed.join("; "))
                    }
                }
                Err(e) => fail(code_for(&e), e),
            }
        }
        Command::Ablate { grid, config, flags } => {
            let cfg = match load_config(&config, &flags) {
                Ok(c) => c,
                Err(e) => return fail(code_for(&e), e),
            };
            match run_ablation(grid, &cfg, &options(&flags)) {
                Ok(report) => {
                    print!("{}", render_table(&report));
                    if report.all_ok() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(exit::RUN_FAILURE)
                    }
                }
                Err(e) => fail(code_for(&e), e),
            }
        }
        Command::OracleCheck { suite, seed, trials } => {
            match oracle_check(suite, seed, trials.unwrap_or(suite.default_trials())) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
                    if report.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(exit::CERTIFICATE_FAILURE)
                    }
                }
                Err(e) => fail(exit::CERTIFICATE_FAILURE, e),
            }
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let (cfg, learner) = match load_checkpoint(&checkpoint) {
                Ok(x) => x,
                Err(e) => return fail(exit::RUN_FAILURE, e),
            };
            let result = cfg
                .make_env()
                .and_then(|mut env| evaluate(env.as_mut(), &learner, episodes.unwrap_or(cfg.eval_episodes), seed));
            match result {
                Ok((ret, success)) => {
                    println!(
                        "{}",
                        serde_json::json!({ "checkpoint": checkpoint, "mean_return": ret, "success_rate": success })
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(exit::RUN_FAILURE, e),
            }
        }
    }
}
