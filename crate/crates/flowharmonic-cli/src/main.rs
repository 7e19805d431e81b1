//! Command-line entry point: sample posteriors, train flows, estimate
//! evidence, print ground truths, and drive full repeated experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use flowharmonic::cnf::OdeConfig;
use flowharmonic::samples::SampleSet;
use flowharmonic_cli::config::{resolve_config, Overrides, ProblemKind};
use flowharmonic_cli::experiment::{
    estimate_from_artifacts, fit_flow, run_experiment, sample_posterior, Problem,
};

#[derive(Parser)]
#[command(
    name = "flowharmonic",
    about = "Bayesian evidence estimation from posterior samples via a flow-matched harmonic mean"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config file (JSON); problem defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark problem (rastrigin or gmm).
    #[arg(long)]
    problem: Option<ProblemKind>,
    /// Seed for the problem instance (mixture generation).
    #[arg(long)]
    problem_seed: Option<u64>,
    /// Base seed for sampling, splitting, and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Base-distribution temperature in (0, 1].
    #[arg(long)]
    temperature: Option<f64>,
    /// Fixed-step count for the flow ODE solver.
    #[arg(long)]
    ode_steps: Option<usize>,
    /// Number of experiment repeats.
    #[arg(long)]
    repeats: Option<usize>,
    /// Training epoch cap.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for experiment artifacts.
    #[arg(long, short = 'o')]
    output_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            problem: self.problem,
            problem_seed: self.problem_seed,
            seed: self.seed,
            temperature: self.temperature,
            ode_steps: self.ode_steps,
            repeats: self.repeats,
            epochs: self.epochs,
            output_dir: self.output_dir.clone(),
            save_artifacts: false,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the ground-truth log-evidence of a benchmark problem.
    Truth {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid points per dimension for the quadrature oracle.
        #[arg(long, default_value_t = 400)]
        grid: usize,
    },
    /// Draw posterior samples and write them as CSV.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Output sample file.
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Train a flow on the training half of a sample file and save the
    /// checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Input sample file.
        #[arg(long)]
        samples: PathBuf,
        /// Output flow checkpoint.
        #[arg(long, default_value = "flow.json")]
        out: PathBuf,
        /// Also write the per-epoch loss history as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Estimate the evidence from a sample file and a flow checkpoint,
    /// re-deriving the inference half with the same split seed.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        /// Output JSON file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline for several repeats and write results, summary,
    /// and plot data.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Keep per-run sample files and flow checkpoints.
        #[arg(long)]
        save_artifacts: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Truth { common, grid } => {
            let mut config = resolve_config(common.config.as_deref(), &common.overrides())?;
            config.quadrature_grid = grid;
            let problem = Problem::from_config(&config)?;
            let truth = problem.truth_ln_z(config.quadrature_grid)?;
            println!("{truth}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample { common, out } => {
            let config = resolve_config(common.config.as_deref(), &common.overrides())?;
            let problem = Problem::from_config(&config)?;
            let samples = sample_posterior(&problem, &config, config.seed)?;
            samples.write_csv(&out, problem.id(), config.seed)?;
            eprintln!(
                "wrote {} samples in {} chains to {}",
                samples.n_samples(),
                samples.n_chains(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { common, samples, out, loss_csv } => {
            let config = resolve_config(common.config.as_deref(), &common.overrides())?;
            let (set, meta) = SampleSet::read_csv(&samples)
                .with_context(|| format!("reading {}", samples.display()))?;
            if meta.rejected > 0 {
                eprintln!("note: rejected {} invalid sample(s) at ingestion", meta.rejected);
            }
            let (flow, _inference, report) = fit_flow(&set, &config, config.seed, config.seed)?;
            flow.save_checkpoint(&out)?;
            if let Some(path) = loss_csv {
                std::fs::write(&path, report.loss_csv())?;
            }
            eprintln!(
                "trained flow ({} epochs, final loss {:.6}) -> {}",
                report.epoch_losses.len(),
                report.final_loss,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Estimate { common, samples, flow, out } => {
            let config = resolve_config(common.config.as_deref(), &common.overrides())?;
            let train_config = flowharmonic::flowmatch::TrainConfig {
                seed: config.seed,
                ..config.train.clone()
            };
            let ode = common.ode_steps.map(|steps| OdeConfig { steps, ..config.ode });
            let estimate = estimate_from_artifacts(
                &samples,
                &flow,
                &train_config,
                common.temperature,
                ode,
            )?;
            let json = estimate.to_json()?;
            match out {
                Some(path) => std::fs::write(&path, &json)?,
                None => println!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { common, save_artifacts } => {
            let mut overrides = common.overrides();
            overrides.save_artifacts = save_artifacts;
            let config = resolve_config(common.config.as_deref(), &overrides)?;
            let (records, summary) = run_experiment(&config)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            // More than a fifth of the repeats failing is an experiment
            // failure.
            if failed * 5 > records.len() {
                eprintln!("{failed} of {} repeats failed", records.len());
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
