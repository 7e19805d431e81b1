//! Experiment configuration: one JSON document with a section per subsystem,
//! plus command-line overrides for the common knobs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flowharmonic::cnf::OdeConfig;
use flowharmonic::flowmatch::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Rastrigin,
    Gmm,
}

impl std::str::FromStr for ProblemKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rastrigin" => Ok(ProblemKind::Rastrigin),
            "gmm" => Ok(ProblemKind::Gmm),
            other => bail!("unknown problem {other:?} (expected rastrigin or gmm)"),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProblemKind::Rastrigin => write!(f, "rastrigin"),
            ProblemKind::Gmm => write!(f, "gmm"),
        }
    }
}

/// Ensemble-sampler settings (the init box comes from the problem's prior).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub n_walkers: usize,
    pub n_steps: usize,
    pub burn_in: usize,
    pub stretch_a: f64,
}

/// Direct-sampler settings for the mixture benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectSettings {
    pub n_total: usize,
    pub n_chains: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSettings {
    pub depth: usize,
    pub width: usize,
}

/// The full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    #[serde(default)]
    pub problem_seed: u64,
    #[serde(default)]
    pub seed: u64,
    pub temperature: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub net: NetSettings,
    #[serde(default)]
    pub sampler: Option<SamplerSettings>,
    #[serde(default)]
    pub direct: Option<DirectSettings>,
    pub train: TrainConfig,
    #[serde(default)]
    pub ode: OdeConfig,
    /// Grid points per dimension for the Rastrigin quadrature truth.
    #[serde(default = "default_quadrature_grid")]
    pub quadrature_grid: usize,
    /// Save per-run sample files and flow checkpoints next to the results.
    #[serde(default)]
    pub save_artifacts: bool,
}

fn default_repeats() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_quadrature_grid() -> usize {
    400
}

impl ExperimentConfig {
    /// The 2-D Rastrigin experiment: 80 chains of 5000 sweeps with 2000
    /// burn-in, temperature 0.98, a 6x256 velocity net.
    pub fn rastrigin_default() -> Self {
        ExperimentConfig {
            problem: ProblemKind::Rastrigin,
            problem_seed: 0,
            seed: 0,
            temperature: 0.98,
            repeats: default_repeats(),
            output_dir: default_output_dir(),
            net: NetSettings { depth: 6, width: 256 },
            sampler: Some(SamplerSettings {
                n_walkers: 80,
                n_steps: 5000,
                burn_in: 2000,
                stretch_a: 2.0,
            }),
            direct: None,
            train: TrainConfig::default(),
            ode: OdeConfig::default(),
            quadrature_grid: default_quadrature_grid(),
            save_artifacts: false,
        }
    }

    /// The 20-D five-component Gaussian mixture: 40 000 direct draws in 200
    /// chains, temperature 0.95, a 10x256 velocity net.
    pub fn gmm_default() -> Self {
        ExperimentConfig {
            problem: ProblemKind::Gmm,
            problem_seed: 0,
            seed: 0,
            temperature: 0.95,
            repeats: default_repeats(),
            output_dir: default_output_dir(),
            net: NetSettings { depth: 10, width: 256 },
            sampler: None,
            direct: Some(DirectSettings { n_total: 40_000, n_chains: 200 }),
            train: TrainConfig::default(),
            ode: OdeConfig::default(),
            quadrature_grid: default_quadrature_grid(),
            save_artifacts: false,
        }
    }

    pub fn for_problem(problem: ProblemKind) -> Self {
        match problem {
            ProblemKind::Rastrigin => Self::rastrigin_default(),
            ProblemKind::Gmm => Self::gmm_default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            bail!("temperature must lie in (0, 1], got {}", self.temperature);
        }
        if self.repeats == 0 {
            bail!("repeats must be at least 1");
        }
        match self.problem {
            ProblemKind::Rastrigin => {
                if self.sampler.is_none() {
                    bail!("rastrigin experiments need a sampler section");
                }
            }
            ProblemKind::Gmm => {
                if self.direct.is_none() {
                    bail!("gmm experiments need a direct-sampler section");
                }
            }
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of a config file (or the problem
/// defaults when no file is given).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem: Option<ProblemKind>,
    pub problem_seed: Option<u64>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub ode_steps: Option<usize>,
    pub repeats: Option<usize>,
    pub epochs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub save_artifacts: bool,
}

impl Overrides {
    pub fn apply(&self, mut config: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(problem) = self.problem {
            if problem != config.problem {
                let mut fresh = ExperimentConfig::for_problem(problem);
                fresh.seed = config.seed;
                fresh.output_dir = config.output_dir;
                config = fresh;
            }
        }
        if let Some(v) = self.problem_seed {
            config.problem_seed = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.temperature {
            config.temperature = v;
        }
        if let Some(v) = self.ode_steps {
            config.ode.steps = v;
        }
        if let Some(v) = self.repeats {
            config.repeats = v;
        }
        if let Some(v) = self.epochs {
            config.train.epochs = v;
        }
        if let Some(v) = &self.output_dir {
            config.output_dir = v.clone();
        }
        if self.save_artifacts {
            config.save_artifacts = true;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Resolve the effective config from an optional file plus overrides; the
/// problem must come from one of the two.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => match overrides.problem {
            Some(problem) => ExperimentConfig::for_problem(problem),
            None => bail!("either --config or --problem is required"),
        },
    };
    overrides.apply(base)
}
