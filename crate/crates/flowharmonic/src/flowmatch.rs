//! Flow-matching training: regress the velocity network onto the conditional
//! straight-line target field using posterior samples as the endpoint
//! distribution and fresh standard-Gaussian noise as the start distribution.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, stream_rng};
use crate::net::{AdamState, VelocityNet};
use crate::samples::{Chain, SampleSet};

/// Training settings. The defaults follow the reference setup: learning rate
/// 1e-4, batch size 4096, a half/half train-inference split, and up to 100
/// epochs with early stopping when the best epoch loss stops improving by
/// 1e-4 relative over 10 epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split_fraction: f64,
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4096,
            epochs: 100,
            seed: 0,
            split_fraction: 0.5,
            patience: 10,
            min_rel_improvement: 1e-4,
        }
    }
}

/// What happened during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch actually run.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub n_train: usize,
    /// Filled by the pipeline that owns the split; zero when training was
    /// invoked on a bare sample set.
    pub n_inference: usize,
    /// Mean of every per-pair time draw, for checking the U(0, 1) sampling.
    pub mean_time_draw: f64,
    pub n_time_draws: usize,
}

impl TrainReport {
    /// Loss history as `epoch,mean_loss` CSV text.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{i},{loss}\n"));
        }
        out
    }
}

/// Affine per-dimension standardization fitted on the training partition.
/// The flow operates in standardized coordinates; densities reported in the
/// original coordinates pick up the constant log-Jacobian
/// `-sum_i ln(scale_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardization {
    /// Identity map (zero shift, unit scale).
    pub fn identity(dim: usize) -> Self {
        Standardization { shift: Array1::zeros(dim), scale: Array1::ones(dim) }
    }

    /// Per-dimension mean and standard deviation of the given samples.
    pub fn fit(samples: &SampleSet) -> Result<Self> {
        if samples.n_samples() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two samples to fit a standardization".into(),
            ));
        }
        let data = samples.stacked_positions();
        Self::fit_matrix(&data)
    }

    pub fn fit_matrix(data: &Array2<f64>) -> Result<Self> {
        let n = data.nrows() as f64;
        let shift = data.sum_axis(ndarray::Axis(0)) / n;
        let mut scale = Array1::<f64>::zeros(data.ncols());
        for (j, s) in scale.iter_mut().enumerate() {
            let var = data
                .column(j)
                .iter()
                .map(|v| (v - shift[j]).powi(2))
                .sum::<f64>()
                / n;
            *s = var.sqrt();
            if !(*s).is_finite() || *s <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "dimension {j} is degenerate (scale {s})"
                )));
            }
        }
        Ok(Standardization { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `(x - shift) / scale`, row-wise.
    pub fn apply_matrix(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for j in 0..self.dim() {
                row[j] = (row[j] - self.shift[j]) / self.scale[j];
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - self.shift[j]) / self.scale[j])
            .collect()
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| v * self.scale[j] + self.shift[j])
            .collect()
    }

    /// Constant log-Jacobian of the standardizing map, added to standardized
    /// log-densities to report densities in original coordinates.
    pub fn ln_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Split every chain into disjoint train and inference parts, so the chain
/// structure survives for the estimator's error model. The per-chain
/// selection is a seeded shuffle; both partitions keep their samples in the
/// original chain order. Deterministic for a fixed seed.
pub fn split_samples(samples: &SampleSet, config: &TrainConfig) -> Result<(SampleSet, SampleSet)> {
    if samples.n_samples() == 0 {
        return Err(Error::InvalidArgument("cannot split an empty sample set".into()));
    }
    if !(config.split_fraction > 0.0 && config.split_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split_fraction must lie in (0, 1), got {}",
            config.split_fraction
        )));
    }
    let dim = samples.dim();
    let mut train = SampleSet::new(dim);
    let mut inference = SampleSet::new(dim);
    for (c, chain) in samples.chains().iter().enumerate() {
        let n = chain.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "chain {c} has {n} sample(s); every chain must contribute to both partitions"
            )));
        }
        let n_train = ((n as f64 * config.split_fraction).round() as usize).clamp(1, n - 1);
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(config.seed, &[math::STREAM_SPLIT, c as u64]);
        // Fisher-Yates via rand's built-in shuffle.
        use rand::seq::SliceRandom;
        indices.shuffle(&mut rng);
        let mut train_idx: Vec<usize> = indices[..n_train].to_vec();
        let mut infer_idx: Vec<usize> = indices[n_train..].to_vec();
        train_idx.sort_unstable();
        infer_idx.sort_unstable();
        train.push_chain(subset_chain(chain, &train_idx, dim))?;
        inference.push_chain(subset_chain(chain, &infer_idx, dim))?;
    }
    Ok((train, inference))
}

fn subset_chain(chain: &Chain, indices: &[usize], dim: usize) -> Chain {
    let mut positions = Array2::<f64>::zeros((indices.len(), dim));
    let mut ln_likelihood = Vec::with_capacity(indices.len());
    let mut ln_prior = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        positions.row_mut(row).assign(&chain.positions.row(i));
        ln_likelihood.push(chain.ln_likelihood[i]);
        ln_prior.push(chain.ln_prior[i]);
    }
    Chain { positions, ln_likelihood, ln_prior }
}

/// Straight-line interpolant: `theta_t = (1 - t) theta0 + t theta1` with
/// conditional target velocity `theta1 - theta0` (independent of `t`).
pub fn interpolate(theta0: &[f64], theta1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if theta0.len() != theta1.len() {
        return Err(Error::DimensionMismatch { expected: theta0.len(), got: theta1.len() });
    }
    let theta_t = theta0
        .iter()
        .zip(theta1)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    let velocity = theta1.iter().zip(theta0).map(|(b, a)| b - a).collect();
    Ok((theta_t, velocity))
}

/// Train the velocity network on the training partition.
///
/// Per batch: draw fresh `theta0 ~ N(0, I)` (the temperature concentrates the
/// base only at inference time), pair it with a shuffled batch of
/// standardized posterior samples `theta1`, draw `t ~ U(0, 1)` per pair, and
/// take one Adam step on the flow-matching loss. Shuffling and noise reseed
/// per epoch from a counter-based stream, so runs are bit-reproducible.
///
/// Returns the trained network, the standardization fitted on this partition,
/// and the loss history.
pub fn train(
    net: VelocityNet,
    train_samples: &SampleSet,
    config: &TrainConfig,
) -> Result<(VelocityNet, Standardization, TrainReport)> {
    if train_samples.dim() != net.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            got: train_samples.dim(),
        });
    }
    let standardization = Standardization::fit(train_samples)?;
    let data = standardization.apply_matrix(&train_samples.stacked_positions());
    let (net, report) = train_on_matrix(net, &data, config)?;
    Ok((net, standardization, report))
}

fn train_on_matrix(
    mut net: VelocityNet,
    data: &Array2<f64>,
    config: &TrainConfig,
) -> Result<(VelocityNet, TrainReport)> {
    let n = data.nrows();
    let dim = data.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let batch_size = config.batch_size.min(n).max(1);
    let mut opt = AdamState::new(&net, config.learning_rate);

    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut time_sum = 0.0;
    let mut time_count = 0usize;
    let mut best = f64::INFINITY;
    let mut since_improvement = 0usize;

    for epoch in 0..config.epochs {
        let mut rng = stream_rng(config.seed, &[math::STREAM_TRAIN_EPOCH, epoch as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batch_index = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + batch_size).min(n);
            let b = end - start;
            let mut theta1 = Array2::<f64>::zeros((b, dim));
            for (row, &idx) in order[start..end].iter().enumerate() {
                theta1.row_mut(row).assign(&data.row(idx));
            }
            let mut theta0 = Array2::<f64>::zeros((b, dim));
            for v in theta0.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let mut ts = Array1::<f64>::zeros(b);
            for v in ts.iter_mut() {
                *v = rng.random();
                time_sum += *v;
            }
            time_count += b;

            let (loss, grad) = net.loss_and_gradient(&theta0.view(), &theta1.view(), &ts.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
            }
            opt.step(&mut net, &grad)?;
            loss_sum += loss * b as f64;
            batch_index += 1;
            start = end;
        }

        let epoch_loss = loss_sum / n as f64;
        epoch_losses.push(epoch_loss);
        if epoch > 0 && epoch % 200 == 0 {
            eprintln!("flowmatch: epoch {epoch}, mean loss {epoch_loss:.6}");
        }

        if epoch_loss < best * (1.0 - config.min_rel_improvement) || !best.is_finite() {
            best = best.min(epoch_loss);
            since_improvement = 0;
        } else {
            best = best.min(epoch_loss);
            since_improvement += 1;
            if since_improvement >= config.patience {
                break;
            }
        }
    }

    let report = TrainReport {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        n_train: n,
        n_inference: 0,
        mean_time_draw: if time_count == 0 { f64::NAN } else { time_sum / time_count as f64 },
        n_time_draws: time_count,
        epoch_losses,
    };
    Ok((net, report))
}
