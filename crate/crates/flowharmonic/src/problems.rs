//! Benchmark posteriors and their independent ground-truth evidence oracles:
//! the 2-D Rastrigin likelihood with a uniform prior (truth by grid
//! quadrature) and a randomly generated Gaussian mixture in moderate
//! dimension (truth in closed form).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, cholesky, forward_substitute, logsumexp};

/// A target distribution specified through its log-likelihood and log-prior.
/// The log-posterior is their sum, up to the evidence constant.
pub trait Posterior: Sync {
    fn dim(&self) -> usize;
    fn ln_likelihood(&self, x: &[f64]) -> f64;
    fn ln_prior(&self, x: &[f64]) -> f64;

    fn ln_posterior(&self, x: &[f64]) -> f64 {
        let lp = self.ln_prior(x);
        if lp == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        lp + self.ln_likelihood(x)
    }
}

/// Axis-aligned box with per-dimension bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl PriorBox {
    pub fn cube(dim: usize, low: f64, high: f64) -> Result<Self> {
        if low >= high {
            return Err(Error::InvalidArgument(format!("empty box [{low}, {high}]")));
        }
        Ok(PriorBox { low: vec![low; dim], high: vec![high; dim] })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.low.iter().zip(&self.high))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn ln_volume(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(lo, hi)| (hi - lo).ln())
            .sum()
    }
}

/// Log-density of the uniform distribution on `bounds`: the negative log
/// volume inside the box and `-inf` outside.
pub fn uniform_log_prior(bounds: &PriorBox, x: &[f64]) -> f64 {
    if bounds.contains(x) {
        -bounds.ln_volume()
    } else {
        f64::NEG_INFINITY
    }
}

// --- Rastrigin --------------------------------------------------------------

/// Rastrigin benchmark: `log L(x) = -f(x)` for the Rastrigin function on a
/// uniform prior box. Highly multimodal, with a lattice of local optima.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RastriginSpec {
    pub dim: usize,
    pub prior_low: f64,
    pub prior_high: f64,
}

impl RastriginSpec {
    /// The two-dimensional setup on `[-6, 6]^2`.
    pub fn standard_2d() -> Self {
        RastriginSpec { dim: 2, prior_low: -6.0, prior_high: 6.0 }
    }

    pub fn prior_box(&self) -> PriorBox {
        PriorBox::cube(self.dim, self.prior_low, self.prior_high).expect("valid bounds")
    }

    /// `-f(x)` with `f(x) = 10 d + sum_i [x_i^2 - 10 cos(2 pi x_i)]`.
    pub fn ln_likelihood(&self, x: &[f64]) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = 10.0 * self.dim as f64
            + x.iter().map(|&xi| xi * xi - 10.0 * (two_pi * xi).cos()).sum::<f64>();
        -f
    }

    /// Ground-truth log-evidence by trapezoid-rule quadrature over the prior
    /// box, accumulated with log-sum-exp over grid nodes. Two-dimensional
    /// only.
    pub fn quadrature_ln_evidence(&self, grid_points_per_dim: usize) -> Result<f64> {
        if self.dim != 2 {
            return Err(Error::InvalidArgument(format!(
                "quadrature oracle requires dim = 2, got {}",
                self.dim
            )));
        }
        if grid_points_per_dim < 200 {
            return Err(Error::InvalidArgument(format!(
                "need at least 200 grid points per dimension, got {grid_points_per_dim}"
            )));
        }
        let n = grid_points_per_dim;
        let h = (self.prior_high - self.prior_low) / (n - 1) as f64;
        let ln_prior = -self.prior_box().ln_volume();
        let mut terms = Vec::with_capacity(n * n);
        for i in 0..n {
            let xi = self.prior_low + i as f64 * h;
            let wi: f64 = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            for j in 0..n {
                let xj = self.prior_low + j as f64 * h;
                let wj: f64 = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let ln_weight = (wi * wj).ln() + 2.0 * h.ln();
                terms.push(self.ln_likelihood(&[xi, xj]) + ln_prior + ln_weight);
            }
        }
        Ok(logsumexp(&terms))
    }
}

impl Posterior for RastriginSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ln_likelihood(&self, x: &[f64]) -> f64 {
        RastriginSpec::ln_likelihood(self, x)
    }

    fn ln_prior(&self, x: &[f64]) -> f64 {
        uniform_log_prior(&self.prior_box(), x)
    }
}

// --- Gaussian mixture --------------------------------------------------------

/// Gaussian-mixture benchmark with unnormalized Gaussian kernels:
/// `L(x) = sum_k w_k exp(-0.5 (x - mu_k)^T Sigma_k^{-1} (x - mu_k))`.
/// The kernels carry no `(2 pi)^{d/2} |Sigma|^{1/2}` normalizer; the analytic
/// evidence accounts for that.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmSpec {
    pub dim: usize,
    pub weights: Vec<f64>,
    /// Component means, one row per component.
    pub means: Vec<Vec<f64>>,
    /// Lower-triangular Cholesky factors of the component covariances.
    pub cov_factors: Vec<Vec<Vec<f64>>>,
    pub prior: PriorBox,
    pub seed: u64,
}

impl GmmSpec {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn factor(&self, k: usize) -> Array2<f64> {
        let d = self.dim;
        let mut l = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                l[[i, j]] = self.cov_factors[k][i][j];
            }
        }
        l
    }

    /// log |Sigma_k|^{1/2} from the cached triangular factor.
    fn ln_sqrt_det(&self, k: usize) -> f64 {
        (0..self.dim).map(|i| self.cov_factors[k][i][i].ln()).sum()
    }

    /// Log-likelihood via log-sum-exp over components; each term is
    /// `ln w_k - q_k / 2` with `q_k` the Mahalanobis quadratic form.
    pub fn ln_likelihood(&self, x: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let diff: Vec<f64> =
                x.iter().zip(&self.means[k]).map(|(xi, mu)| xi - mu).collect();
            let l = self.factor(k);
            let y = forward_substitute(&l, &diff);
            let q: f64 = y.iter().map(|v| v * v).sum();
            terms.push(self.weights[k].ln() - 0.5 * q);
        }
        logsumexp(&terms)
    }

    /// Closed-form log-evidence:
    /// `ln z = ln(sum_k w_k (2 pi)^{d/2} |Sigma_k|^{1/2}) - ln V_box`.
    ///
    /// Valid when the prior box covers each component with a margin of at
    /// least eight standard deviations per dimension, which keeps the
    /// truncation error of extending the Gaussian integrals to all of space
    /// below 1e-10 relative; the margin is checked.
    pub fn analytic_ln_evidence(&self) -> Result<f64> {
        let d = self.dim as f64;
        for k in 0..self.n_components() {
            let cov = self.covariance(k);
            for i in 0..self.dim {
                let sigma = cov[[i, i]].sqrt();
                let mu = self.means[k][i];
                if mu - 8.0 * sigma < self.prior.low[i] || mu + 8.0 * sigma > self.prior.high[i] {
                    return Err(Error::InvalidArgument(format!(
                        "component {k} violates the 8-sigma prior margin in dimension {i}"
                    )));
                }
            }
        }
        let half_log_2pi_d = 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights[k].ln() + half_log_2pi_d + self.ln_sqrt_det(k))
            .collect();
        Ok(logsumexp(&terms) - self.prior.ln_volume())
    }

    /// Reconstruct the covariance of component `k` from its factor.
    pub fn covariance(&self, k: usize) -> Array2<f64> {
        let l = self.factor(k);
        let mut cov = Array2::<f64>::zeros((self.dim, self.dim));
        ndarray::linalg::general_mat_mul(1.0, &l.view(), &l.t(), 0.0, &mut cov);
        cov
    }

    /// Draw one point from component `k` given standard-normal input `z`.
    pub fn component_draw(&self, k: usize, z: &[f64]) -> Vec<f64> {
        let l = self.factor(k);
        let mut x = self.means[k].clone();
        for i in 0..self.dim {
            for j in 0..=i {
                x[i] += l[[i, j]] * z[j];
            }
        }
        x
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GmmSpec = serde_json::from_str(text)?;
        if spec.means.len() != spec.weights.len() || spec.cov_factors.len() != spec.weights.len() {
            return Err(Error::Format("component count mismatch".into()));
        }
        Ok(spec)
    }
}

impl Posterior for GmmSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ln_likelihood(&self, x: &[f64]) -> f64 {
        GmmSpec::ln_likelihood(self, x)
    }

    fn ln_prior(&self, x: &[f64]) -> f64 {
        uniform_log_prior(&self.prior, x)
    }
}

/// Parameters controlling [`build_gmm`].
#[derive(Debug, Clone)]
pub struct GmmBuildConfig {
    pub dim: usize,
    pub n_components: usize,
    /// Component means are drawn uniformly from this hypercube.
    pub mean_low: f64,
    pub mean_high: f64,
    /// Overall covariance scale applied to the unit-diagonal correlation
    /// matrices.
    pub covariance_scale: f64,
    /// Magnitude bound for the tridiagonal correlation entries.
    pub off_diagonal_bound: f64,
    /// Regenerate a mean that lands closer than this to an earlier one, so
    /// modes stay non-overlapping.
    pub min_mean_separation: f64,
    pub prior_low: f64,
    pub prior_high: f64,
}

impl GmmBuildConfig {
    /// The 20-dimensional, five-component benchmark: means in `[-2, 2]^20`,
    /// tridiagonal correlations, covariance scale 0.01, prior box `[-3, 3]^20`.
    pub fn standard_20d() -> Self {
        GmmBuildConfig {
            dim: 20,
            n_components: 5,
            mean_low: -2.0,
            mean_high: 2.0,
            covariance_scale: 0.01,
            off_diagonal_bound: 0.3,
            min_mean_separation: 1.0,
            prior_low: -3.0,
            prior_high: 3.0,
        }
    }
}

const MAX_BUILD_ATTEMPTS: usize = 100;

/// Generate a mixture instance: equal weights, means uniform in the
/// configured hypercube with a separation floor, and per-component
/// covariances built as tridiagonal correlation matrices (unit diagonal,
/// adjacent-dimension couplings uniform in the configured band) scaled by the
/// covariance scale. Deterministic per seed.
pub fn build_gmm(config: &GmmBuildConfig, seed: u64) -> Result<GmmSpec> {
    let d = config.dim;
    let k = config.n_components;
    if d == 0 || k == 0 {
        return Err(Error::InvalidArgument("dim and n_components must be positive".into()));
    }
    let mut rng = math::stream_rng(seed, &[math::STREAM_PROBLEM]);

    // Means with a separation floor.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut attempts = 0;
        loop {
            let candidate: Vec<f64> = (0..d)
                .map(|_| rng.random_range(config.mean_low..config.mean_high))
                .collect();
            let separated = means.iter().all(|m| {
                let dist2: f64 = m
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dist2.sqrt() >= config.min_mean_separation
            });
            if separated {
                means.push(candidate);
                break;
            }
            attempts += 1;
            if attempts >= MAX_BUILD_ATTEMPTS {
                return Err(Error::InvalidArgument(
                    "could not place separated component means".into(),
                ));
            }
        }
    }

    // Tridiagonal correlation matrices, checked positive-definite by
    // factorization, then scaled.
    let mut cov_factors = Vec::with_capacity(k);
    for _ in 0..k {
        let mut attempts = 0;
        let factor = loop {
            let mut corr = Array2::<f64>::eye(d);
            for i in 0..d - 1 {
                let off = rng.random_range(-config.off_diagonal_bound..config.off_diagonal_bound);
                corr[[i, i + 1]] = off;
                corr[[i + 1, i]] = off;
            }
            let sigma = corr.mapv(|v| v * config.covariance_scale);
            if let Some(l) = cholesky(&sigma) {
                break l;
            }
            attempts += 1;
            if attempts >= MAX_BUILD_ATTEMPTS {
                return Err(Error::InvalidArgument(
                    "could not generate a positive-definite covariance".into(),
                ));
            }
        };
        let rows: Vec<Vec<f64>> = (0..d).map(|i| factor.row(i).to_vec()).collect();
        cov_factors.push(rows);
    }

    Ok(GmmSpec {
        dim: d,
        weights: vec![1.0 / k as f64; k],
        means,
        cov_factors,
        prior: PriorBox::cube(d, config.prior_low, config.prior_high)?,
        seed,
    })
}

/// Conjugate 1-D Gaussian problem with a known posterior and evidence, used
/// as the estimator's exactness oracle: prior `N(m0, s0^2)`, likelihood a
/// single observation `y ~ N(theta, s^2)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    pub prior_mean: f64,
    pub prior_std: f64,
    pub noise_std: f64,
    pub observation: f64,
}

impl ConjugateGaussian {
    pub fn posterior_mean_std(&self) -> (f64, f64) {
        let precision = 1.0 / self.prior_std.powi(2) + 1.0 / self.noise_std.powi(2);
        let var = 1.0 / precision;
        let mean = var
            * (self.prior_mean / self.prior_std.powi(2)
                + self.observation / self.noise_std.powi(2));
        (mean, var.sqrt())
    }

    /// `z = N(y; m0, s0^2 + s^2)`.
    pub fn ln_evidence(&self) -> f64 {
        let var = self.prior_std.powi(2) + self.noise_std.powi(2);
        gaussian_ln_pdf(self.observation, self.prior_mean, var.sqrt())
    }
}

impl Posterior for ConjugateGaussian {
    fn dim(&self) -> usize {
        1
    }

    fn ln_likelihood(&self, x: &[f64]) -> f64 {
        gaussian_ln_pdf(self.observation, x[0], self.noise_std)
    }

    fn ln_prior(&self, x: &[f64]) -> f64 {
        gaussian_ln_pdf(x[0], self.prior_mean, self.prior_std)
    }
}

/// Log-density of `N(mean, std^2)` at `x`.
pub fn gaussian_ln_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - std.ln() - 0.5 * z * z
}
