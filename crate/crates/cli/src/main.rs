use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ksgm::Result;
use ksgm_cli::{
    cmd_bench, cmd_estimate, cmd_eval, cmd_generate, cmd_partition, exit_code, init_threads,
    load_bench, load_scenario, EvalTarget, Overrides, RunConfig,
};

/// Kronecker-sum graphical models for multi-modal tensor data.
#[derive(Parser)]
#[command(name = "ksgm", version)]
struct Cli {
    /// Worker threads; 1 gives a fully deterministic run.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset with its ground-truth graphs.
    Generate {
        /// Scenario JSON.
        scenario: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit a dataset and write spectra, graphs and a report.
    Estimate(RunArgs),
    /// Write the covariance-thresholding partition only.
    Partition(RunArgs),
    /// Score an estimate against true graphs or vertex labels.
    Eval {
        /// Directory written by `estimate`.
        estimate: PathBuf,
        /// Directory of true graphs.
        #[arg(long, conflicts_with = "labels")]
        truth: Option<PathBuf>,
        /// JSON object of per-axis vertex labels.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Defaults to the estimate directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Time fits over benchmark scenarios.
    Bench {
        /// Scenario JSON (one object or a list).
        scenario: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Stop after the first scenario slower than this.
        #[arg(long)]
        max_seconds: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run config JSON.
    config: PathBuf,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Restricted L1 strength.
    #[arg(long)]
    rho: Option<f64>,
    /// Also write dense precision matrices.
    #[arg(long)]
    dense: bool,
    /// Covariance-thresholding level, one value or one per axis.
    #[arg(long, value_delimiter = ',')]
    partition_rho: Option<Vec<f64>>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        config.apply(&Overrides {
            tolerance: self.tol,
            max_iterations: self.max_iter,
            l1_strength: self.rho,
            dense: self.dense,
            partition_rho: self.partition_rho.clone(),
            output: self.out.clone(),
        });
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<u8> {
    let threads = init_threads(cli.threads)?;
    log::debug!("using {threads} worker threads");
    match cli.command {
        Command::Generate { scenario, out } => {
            let manifest = cmd_generate(&load_scenario(&scenario)?, &out)?;
            println!("{}", manifest.display());
        }
        Command::Estimate(args) => {
            let report = cmd_estimate(&args.config()?)?;
            println!(
                "converged: {}, iterations: {} + {} (L1)",
                report.converged, report.iterations, report.l1_iterations
            );
            if !report.converged {
                return Ok(2);
            }
        }
        Command::Partition(args) => {
            let plan = cmd_partition(&args.config()?)?;
            for (axis, labels) in plan.axes.iter().zip(&plan.labels) {
                println!(
                    "{axis}: {} components",
                    labels.iter().max().map_or(0, |m| m + 1)
                );
            }
        }
        Command::Eval {
            estimate,
            truth,
            labels,
            out,
        } => {
            let target = match (truth, labels) {
                (Some(t), None) => EvalTarget::Truth(t),
                (None, Some(l)) => EvalTarget::Labels(l),
                _ => {
                    return Err(ksgm::Error::Argument(
                        "eval needs --truth or --labels".into(),
                    ))
                }
            };
            let out = out.unwrap_or_else(|| estimate.clone());
            if let ksgm_cli::EvalOutcome::Pr(rows) = cmd_eval(&estimate, &target, &out)? {
                for r in rows {
                    println!(
                        "{}\tAUPR {:.4}\t(prevalence {:.4})",
                        r.axis, r.aupr, r.prevalence
                    );
                }
            }
        }
        Command::Bench {
            scenario,
            out,
            max_seconds,
        } => {
            let records = cmd_bench(&load_bench(&scenario)?, max_seconds, &out)?;
            println!("{} records", records.len());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
