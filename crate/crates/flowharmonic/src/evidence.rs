//! The learned harmonic mean estimator of the reciprocal evidence.
//!
//! Each inference sample contributes a log-term
//! `ln phi(theta_i) - ln L(theta_i) - ln pi(theta_i)`; the reciprocal
//! evidence is their log-sum-exp minus `ln N`, and everything downstream
//! stays in log space so raw reciprocal-evidence values (which underflow in
//! high dimension) are never materialized. The error estimate treats the
//! per-chain reciprocal-evidence means as independent replicates.

use serde::Serialize;

use crate::cnf::FlowModel;
use crate::error::{Error, Result};
use crate::math::{logsumexp, mean};
use crate::samples::SampleSet;

/// Result of the evidence estimation.
#[derive(Debug, Clone, Serialize)]
pub struct EvidenceEstimate {
    /// Log reciprocal evidence `ln rho_hat`.
    pub ln_rho: f64,
    /// `ln z_hat = -ln rho_hat`.
    pub ln_z: f64,
    /// Relative variance `var(rho_hat) / rho_hat^2` from the between-chain
    /// spread.
    pub var_rho_over_rho2: f64,
    /// First-order standard error of `ln z_hat`.
    pub sigma_ln_z: f64,
    pub n_samples: usize,
    pub n_chains: usize,
    /// Effective sample size of the estimator terms.
    pub ess: f64,
    /// Largest single term's share of the total weight.
    pub max_term_share: f64,
    /// Temperature the target density was evaluated at.
    pub temperature: f64,
    /// The per-sample log-terms, retained for diagnostics.
    #[serde(skip)]
    pub term_log_values: Option<Vec<f64>>,
}

impl EvidenceEstimate {
    /// The JSON document emitted by the tooling:
    /// `{ln_z, sigma_ln_z, n_samples, n_chains, ess, max_term_share, temperature}`.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc {
            ln_z: f64,
            sigma_ln_z: f64,
            n_samples: usize,
            n_chains: usize,
            ess: f64,
            max_term_share: f64,
            temperature: f64,
        }
        Ok(serde_json::to_string_pretty(&Doc {
            ln_z: self.ln_z,
            sigma_ln_z: self.sigma_ln_z,
            n_samples: self.n_samples,
            n_chains: self.n_chains,
            ess: self.ess,
            max_term_share: self.max_term_share,
            temperature: self.temperature,
        })?)
    }
}

/// Per-sample log-terms `ln phi(theta_i) - ln L(theta_i) - ln pi(theta_i)`
/// over the whole sample set, in chain-major order. The target density
/// `ln phi` comes from the flow at its configured temperature. Any non-finite
/// term aborts with its chain and sample index.
pub fn ln_terms(samples: &SampleSet, flow: &FlowModel) -> Result<Vec<f64>> {
    if samples.dim() != flow.dim() {
        return Err(Error::DimensionMismatch { expected: flow.dim(), got: samples.dim() });
    }
    let stacked = samples.stacked_positions();
    let ln_phi = flow.log_density_batch(&stacked.view())?;

    let mut terms = Vec::with_capacity(samples.n_samples());
    let mut flat = 0usize;
    for (chain_idx, chain) in samples.chains().iter().enumerate() {
        for i in 0..chain.len() {
            let term = ln_phi[flat] - chain.ln_likelihood[i] - chain.ln_prior[i];
            if !term.is_finite() {
                return Err(Error::NonFiniteTerm {
                    chain: chain_idx,
                    index: i,
                    detail: format!(
                        "ln_phi = {}, ln_L = {}, ln_prior = {}",
                        ln_phi[flat], chain.ln_likelihood[i], chain.ln_prior[i]
                    ),
                });
            }
            terms.push(term);
            flat += 1;
        }
    }
    Ok(terms)
}

/// Containment health of the estimator terms: effective sample size
/// `(sum w)^2 / sum w^2` and the largest term's weight share, with warning
/// flags when a handful of samples dominate the sum.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContainmentReport {
    pub ess: f64,
    pub max_term_share: f64,
    pub warn_low_ess: bool,
    pub warn_dominant_term: bool,
}

pub fn containment_diagnostic(terms: &[f64]) -> ContainmentReport {
    assert!(!terms.is_empty(), "containment diagnostic needs at least one term");
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for t in terms {
        let w = (t - max).exp();
        sum += w;
        sum_sq += w * w;
    }
    let ess = sum * sum / sum_sq;
    let max_term_share = 1.0 / sum; // the largest weight is exactly one
    ContainmentReport {
        ess,
        max_term_share,
        warn_low_ess: ess < 0.01 * terms.len() as f64,
        warn_dominant_term: max_term_share > 0.05,
    }
}

/// Estimate the evidence from the inference partition and the flow target.
///
/// `ln rho_hat` is the log-sum-exp of the per-sample terms minus `ln N`. The
/// error estimate computes per-chain reciprocal-evidence means in log space,
/// takes their between-chain sample variance divided by the chain count, and
/// propagates to `ln z` at first order: `sigma_ln_z = sd(rho_hat) / rho_hat`.
/// Needs at least two chains with two samples each.
pub fn estimate(samples: &SampleSet, flow: &FlowModel) -> Result<EvidenceEstimate> {
    let n_chains = samples.n_chains();
    if n_chains < 2 {
        return Err(Error::VarianceUnavailable { n_chains });
    }
    if let Some(short) = samples.chains().iter().position(|c| c.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "chain {short} has fewer than 2 samples"
        )));
    }
    let terms = ln_terms(samples, flow)?;
    let n = terms.len();

    let ln_rho = logsumexp(&terms) - (n as f64).ln();

    // Per-chain means, all in log space; the ratios r_c = rho_c / rho are
    // order-one numbers and safe to exponentiate.
    let mut chain_ratios = Vec::with_capacity(n_chains);
    let mut offset = 0usize;
    for chain in samples.chains() {
        let len = chain.len();
        let ln_rho_c = logsumexp(&terms[offset..offset + len]) - (len as f64).ln();
        chain_ratios.push((ln_rho_c - ln_rho).exp());
        offset += len;
    }
    let r_bar = mean(&chain_ratios);
    let s_sq = chain_ratios
        .iter()
        .map(|r| (r - r_bar).powi(2))
        .sum::<f64>()
        / (n_chains - 1) as f64;
    let var_rho_over_rho2 = s_sq / n_chains as f64;
    let sigma_ln_z = var_rho_over_rho2.sqrt();

    let containment = containment_diagnostic(&terms);

    Ok(EvidenceEstimate {
        ln_rho,
        ln_z: -ln_rho,
        var_rho_over_rho2,
        sigma_ln_z,
        n_samples: n,
        n_chains,
        ess: containment.ess,
        max_term_share: containment.max_term_share,
        temperature: flow.temperature(),
        term_log_values: Some(terms),
    })
}
