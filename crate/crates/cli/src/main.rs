use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tce_core::baselines::{parse_pool, LayerKind};
use tce_core::commands::{self, DEFAULT_ROBUSTNESS_POINTS};
use tce_core::config::RunConfig;
use tce_core::gradcheck::{check_scope, Scope, DEFAULT_EPS, DEFAULT_TOL};
use tce_core::networks::Task;
use tce_core::training::EpochReport;

#[derive(Parser)]
#[command(name = "tce", version, about = "Channel-encoding transformer networks for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes config.echo, train_log.csv, best.ckpt and final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint; without --data, uses the synthetic test split of its config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "op")]
        scope: Scope,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Train one network per layer variant and pooling mode.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "tce,graphconv,cw_attn,pw_attn")]
        variants: Vec<LayerKind>,
        #[arg(long, value_delimiter = ',', default_value = "max,mean,sum")]
        pools: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy of a checkpoint at several input sizes.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ROBUSTNESS_POINTS)]
        points: Vec<usize>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the synthetic train and test splits as PCF1 files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "cls")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the trainable parameter count.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "cls")]
        task: Task,
    },
}

fn config_or_default(path: Option<&PathBuf>, task: Task) -> Result<RunConfig> {
    match path {
        Some(p) => commands::read_config(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::defaults(task)),
    }
}

fn print_epoch(prefix: &str, r: &EpochReport) {
    match &r.test {
        Some(t) => eprintln!("{prefix}lr {:.5} | {} | {}", r.lr, r.train, t),
        None => eprintln!("{prefix}lr {:.5} | {}", r.lr, r.train),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out, quiet } => {
            let cfg = commands::read_config(&config).with_context(|| format!("reading {}", config.display()))?;
            let summary = commands::run_train(&cfg, &out, |r| {
                if !quiet {
                    print_epoch("", r)
                }
            })?;
            println!(
                "trained {} epochs{}; best epoch {} score {:.2}",
                summary.epochs_run,
                if summary.stopped_early { " (early stop)" } else { "" },
                summary.best_epoch,
                summary.best_score
            );
        }
        Command::Eval { checkpoint, data } => {
            let row = commands::run_eval(&checkpoint, data.as_deref())?;
            println!("{row}");
        }
        Command::Gradcheck { scope, eps, tol } => {
            let reports = check_scope(scope, eps, tol)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                println!("{:<40} {:.3e} {status}", r.target, r.report.max_rel_error);
            }
            println!("{scope}: {} targets, {failed} failed", reports.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate {
            config,
            variants,
            pools,
            out,
            quiet,
        } => {
            let cfg = commands::read_config(&config).with_context(|| format!("reading {}", config.display()))?;
            let pools = pools.iter().map(|p| parse_pool(p)).collect::<tce_core::Result<Vec<_>>>()?;
            let rows = commands::run_ablate(&cfg, &variants, &pools, &out, |v, r| {
                if !quiet {
                    print_epoch(&format!("{}-{} ", v.kind.name(), tce_core::baselines::pool_name(v.pool)), r)
                }
            })?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Robustness {
            checkpoint,
            points,
            csv,
            data,
        } => {
            let rows = commands::run_robustness(&checkpoint, &points, data.as_deref())?;
            let text = commands::robustness_csv(&rows);
            fs::write(&csv, &text).with_context(|| format!("writing {}", csv.display()))?;
            print!("{text}");
        }
        Command::Synth { config, task, out } => {
            let cfg = config_or_default(config.as_ref(), task)?;
            let (train, test) = commands::run_synth(&cfg, &out)?;
            println!("wrote {train} train and {test} test clouds to {}", out.display());
        }
        Command::Params { config, task } => {
            let cfg = config_or_default(config.as_ref(), task)?;
            println!("{}", commands::run_params(&cfg)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
