//! The experiment pipeline: sample the posterior, split, train the flow,
//! estimate the evidence, repeat over derived seeds, and persist everything
//! needed to redo the analysis from disk.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flowharmonic::cnf::{FlowModel, OdeConfig};
use flowharmonic::evidence::{self, EvidenceEstimate};
use flowharmonic::flowmatch::{self, TrainConfig, TrainReport};
use flowharmonic::math;
use flowharmonic::net::VelocityNet;
use flowharmonic::problems::{build_gmm, GmmBuildConfig, GmmSpec, RastriginSpec};
use flowharmonic::samples::SampleSet;
use flowharmonic::sampling::{ensemble_sample, gmm_direct_sample, EnsembleConfig};

use crate::config::{ExperimentConfig, ProblemKind};

/// The benchmark problem a config resolves to, with its ground truth oracle.
pub enum Problem {
    Rastrigin(RastriginSpec),
    Gmm(GmmSpec),
}

impl Problem {
    pub fn from_config(config: &ExperimentConfig) -> Result<Problem> {
        Ok(match config.problem {
            ProblemKind::Rastrigin => Problem::Rastrigin(RastriginSpec::standard_2d()),
            ProblemKind::Gmm => {
                let spec = build_gmm(&GmmBuildConfig::standard_20d(), config.problem_seed)?;
                Problem::Gmm(spec)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Rastrigin(spec) => spec.dim,
            Problem::Gmm(spec) => spec.dim,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Problem::Rastrigin(_) => "rastrigin",
            Problem::Gmm(_) => "gmm",
        }
    }

    /// The independent ground-truth log-evidence: 2-D grid quadrature for
    /// Rastrigin, the closed form for the mixture.
    pub fn truth_ln_z(&self, quadrature_grid: usize) -> Result<f64> {
        Ok(match self {
            Problem::Rastrigin(spec) => spec.quadrature_ln_evidence(quadrature_grid)?,
            Problem::Gmm(spec) => spec.analytic_ln_evidence()?,
        })
    }
}

// Phase tags for deriving per-phase seeds from the run seed.
const PHASE_SAMPLE: u64 = 1;
const PHASE_NET: u64 = 2;
const PHASE_TRAIN: u64 = 3;

/// Seed for repeat `run` of an experiment with base seed `seed`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    math::derive_seed(seed, &[math::STREAM_RUN, run as u64])
}

/// Seed for one phase of one run.
pub fn phase_seed(run_seed: u64, phase: u64) -> u64 {
    math::derive_seed(run_seed, &[math::STREAM_RUN, phase])
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub sample_s: f64,
    pub train_s: f64,
    pub estimate_s: f64,
}

/// One repeat's outcome. Failed phases leave the estimate fields empty and
/// store the error text instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub run_seed: u64,
    pub truth_ln_z: f64,
    pub ln_z: Option<f64>,
    pub sigma_ln_z: Option<f64>,
    pub ess: Option<f64>,
    pub max_term_share: Option<f64>,
    pub n_samples: Option<usize>,
    pub n_chains: Option<usize>,
    pub epochs_run: Option<usize>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
    pub timings: PhaseTimings,
}

/// Aggregate over the successful repeats: the "measured versus estimated"
/// comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub truth_ln_z: f64,
    pub n_runs: usize,
    pub n_failed: usize,
    pub mean_ln_z: Option<f64>,
    /// Spread of ln_z measured across repeats (needs at least two).
    pub empirical_std_ln_z: Option<f64>,
    /// Mean of the per-run reported standard errors.
    pub mean_sigma_ln_z: Option<f64>,
    pub mean_ess: Option<f64>,
}

pub fn summarize(problem: &str, truth_ln_z: f64, records: &[RunRecord]) -> Summary {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let ln_z: Vec<f64> = ok.iter().filter_map(|r| r.ln_z).collect();
    let sigmas: Vec<f64> = ok.iter().filter_map(|r| r.sigma_ln_z).collect();
    let esses: Vec<f64> = ok.iter().filter_map(|r| r.ess).collect();
    Summary {
        problem: problem.to_string(),
        truth_ln_z,
        n_runs: records.len(),
        n_failed: records.len() - ok.len(),
        mean_ln_z: if ln_z.is_empty() { None } else { Some(math::mean(&ln_z)) },
        empirical_std_ln_z: if ln_z.len() < 2 {
            None
        } else {
            Some(math::sample_variance(&ln_z).sqrt())
        },
        mean_sigma_ln_z: if sigmas.is_empty() { None } else { Some(math::mean(&sigmas)) },
        mean_ess: if esses.is_empty() { None } else { Some(math::mean(&esses)) },
    }
}

/// Draw the posterior sample set for one run.
pub fn sample_posterior(
    problem: &Problem,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<SampleSet> {
    match problem {
        Problem::Rastrigin(spec) => {
            let sampler = config
                .sampler
                .as_ref()
                .context("rastrigin experiments need a sampler section")?;
            let ensemble = EnsembleConfig {
                n_walkers: sampler.n_walkers,
                n_steps: sampler.n_steps,
                burn_in: sampler.burn_in,
                stretch_a: sampler.stretch_a,
                seed,
                init_box: spec.prior_box(),
            };
            Ok(ensemble_sample(spec, &ensemble)?)
        }
        Problem::Gmm(spec) => {
            let direct = config
                .direct
                .as_ref()
                .context("gmm experiments need a direct-sampler section")?;
            Ok(gmm_direct_sample(spec, direct.n_total, direct.n_chains, seed)?)
        }
    }
}

/// Split with the train seed and train the flow, returning it alongside the
/// untouched inference partition and the training report. The `estimate`
/// subcommand replays the same split from saved artifacts.
pub fn fit_flow(
    samples: &SampleSet,
    config: &ExperimentConfig,
    net_seed: u64,
    train_seed: u64,
) -> Result<(FlowModel, SampleSet, TrainReport)> {
    let net = VelocityNet::init(samples.dim(), config.net.depth, config.net.width, net_seed)?;
    let train_config = TrainConfig { seed: train_seed, ..config.train.clone() };
    let (flow, inference, report) =
        FlowModel::fit(samples, net, &train_config, config.ode, config.temperature)?;
    Ok((flow, inference, report))
}

/// Re-derive the inference partition from saved samples and evaluate a saved
/// flow checkpoint on it, honoring temperature and solver overrides.
pub fn estimate_from_artifacts(
    samples_path: &Path,
    flow_path: &Path,
    train_config: &TrainConfig,
    temperature: Option<f64>,
    ode: Option<OdeConfig>,
) -> Result<EvidenceEstimate> {
    let (samples, meta) = SampleSet::read_csv(samples_path)?;
    if meta.rejected > 0 {
        eprintln!("note: rejected {} invalid sample(s) at ingestion", meta.rejected);
    }
    let (_train, inference) = flowmatch::split_samples(&samples, train_config)?;
    let mut flow = FlowModel::load_checkpoint(flow_path)?;
    if let Some(t) = temperature {
        flow = flow.with_temperature(t)?;
    }
    if let Some(ode) = ode {
        flow = flow.with_ode(ode)?;
    }
    Ok(evidence::estimate(&inference, &flow)?)
}

/// Run the full experiment: `repeats` independent repeats, each with its own
/// derived seed. Records append to `results.jsonl` as they complete, the
/// summary lands in `summary.json`, and plot data in `plot.csv`. A failed
/// phase records its error and the remaining repeats continue.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Vec<RunRecord>, Summary)> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let problem = Problem::from_config(config)?;
    let truth = problem.truth_ln_z(config.quadrature_grid)?;

    let results_path = config.output_dir.join("results.jsonl");
    let mut results = BufWriter::new(File::create(&results_path)?);
    config.save(&config.output_dir.join("config.json"))?;

    let mut records = Vec::with_capacity(config.repeats);
    for run in 0..config.repeats {
        let rs = run_seed(config.seed, run);
        let record = run_once(&problem, config, run, rs, truth);
        let line = serde_json::to_string(&record)?;
        writeln!(results, "{line}")?;
        results.flush()?;
        eprintln!(
            "run {run}: {}",
            match (&record.ln_z, &record.error) {
                (Some(ln_z), _) => format!(
                    "ln_z = {ln_z:.4} (sigma {:.4}, truth {truth:.4})",
                    record.sigma_ln_z.unwrap_or(f64::NAN)
                ),
                (None, Some(err)) => format!("FAILED: {err}"),
                _ => "FAILED".to_string(),
            }
        );
        records.push(record);
    }

    let summary = summarize(problem.id(), truth, &records);
    std::fs::write(
        config.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    emit_plot_data(&records, &config.output_dir.join("plot.csv"))?;
    Ok((records, summary))
}

fn run_once(
    problem: &Problem,
    config: &ExperimentConfig,
    run: usize,
    rs: u64,
    truth: f64,
) -> RunRecord {
    let mut record = RunRecord {
        run,
        run_seed: rs,
        truth_ln_z: truth,
        ln_z: None,
        sigma_ln_z: None,
        ess: None,
        max_term_share: None,
        n_samples: None,
        n_chains: None,
        epochs_run: None,
        final_loss: None,
        error: None,
        timings: PhaseTimings::default(),
    };

    let sample_seed = phase_seed(rs, PHASE_SAMPLE);
    let net_seed = phase_seed(rs, PHASE_NET);
    let train_seed = phase_seed(rs, PHASE_TRAIN);

    let t0 = Instant::now();
    let samples = match sample_posterior(problem, config, sample_seed) {
        Ok(s) => s,
        Err(err) => {
            record.error = Some(format!("sampling: {err}"));
            return record;
        }
    };
    record.timings.sample_s = t0.elapsed().as_secs_f64();

    if config.save_artifacts {
        let path = config.output_dir.join(format!("run{run:03}_samples.csv"));
        if let Err(err) = samples.write_csv(&path, problem.id(), sample_seed) {
            record.error = Some(format!("writing samples: {err}"));
            return record;
        }
        let manifest = serde_json::json!({
            "run": run,
            "run_seed": rs,
            "sample_seed": sample_seed,
            "net_seed": net_seed,
            "train_seed": train_seed,
        });
        let _ = std::fs::write(
            config.output_dir.join(format!("run{run:03}_manifest.json")),
            serde_json::to_string_pretty(&manifest).unwrap_or_default(),
        );
    }

    let t1 = Instant::now();
    let (flow, inference, report) = match fit_flow(&samples, config, net_seed, train_seed) {
        Ok(parts) => parts,
        Err(err) => {
            record.error = Some(format!("training: {err}"));
            return record;
        }
    };
    record.timings.train_s = t1.elapsed().as_secs_f64();
    record.epochs_run = Some(report.epoch_losses.len());
    record.final_loss = Some(report.final_loss);

    if config.save_artifacts {
        let path = config.output_dir.join(format!("run{run:03}_flow.json"));
        if let Err(err) = flow.save_checkpoint(&path) {
            record.error = Some(format!("writing checkpoint: {err}"));
            return record;
        }
    }

    let t2 = Instant::now();
    match evidence::estimate(&inference, &flow) {
        Ok(estimate) => {
            record.timings.estimate_s = t2.elapsed().as_secs_f64();
            record.ln_z = Some(estimate.ln_z);
            record.sigma_ln_z = Some(estimate.sigma_ln_z);
            record.ess = Some(estimate.ess);
            record.max_term_share = Some(estimate.max_term_share);
            record.n_samples = Some(estimate.n_samples);
            record.n_chains = Some(estimate.n_chains);
        }
        Err(err) => {
            record.error = Some(format!("estimation: {err}"));
        }
    }
    record
}

/// Plot-ready CSV: one row per run with the estimate, its error bar, and the
/// ground truth.
pub fn emit_plot_data(records: &[RunRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        bail!("no run records to emit");
    }
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "run,ln_z,sigma_ln_z,truth")?;
    for record in records {
        if let (Some(ln_z), Some(sigma)) = (record.ln_z, record.sigma_ln_z) {
            writeln!(w, "{},{},{},{}", record.run, ln_z, sigma, record.truth_ln_z)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reload a results file written by [`run_experiment`].
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}
