//! Posterior samplers: an affine-invariant ensemble MCMC sampler built on the
//! stretch move, and a direct sampler for the Gaussian-mixture benchmark.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{self, stream_rng};
use crate::problems::{GmmSpec, Posterior, PriorBox};
use crate::samples::{Chain, SampleSet};

/// Settings for the ensemble sampler. One walker becomes one chain of the
/// returned sample set.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_walkers: usize,
    pub n_steps: usize,
    pub burn_in: usize,
    /// Stretch-move scale parameter `a > 1`.
    pub stretch_a: f64,
    pub seed: u64,
    /// Walkers start uniformly distributed over this box.
    pub init_box: PriorBox,
}

impl EnsembleConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.n_walkers % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_walkers must be even, got {}",
                self.n_walkers
            )));
        }
        if self.n_walkers < 2 * dim.max(1) {
            return Err(Error::InvalidArgument(format!(
                "n_walkers = {} is below 2 * dim = {}",
                self.n_walkers,
                2 * dim
            )));
        }
        if self.burn_in >= self.n_steps {
            return Err(Error::InvalidArgument(format!(
                "burn_in = {} must be below n_steps = {}",
                self.burn_in, self.n_steps
            )));
        }
        if self.stretch_a <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "stretch_a must exceed 1, got {}",
                self.stretch_a
            )));
        }
        if self.init_box.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.init_box.dim() });
        }
        Ok(())
    }
}

/// Abort when no proposal in the whole ensemble is accepted for this many
/// consecutive sweeps.
const MIXING_PATIENCE: usize = 100;

struct Walker {
    pos: Vec<f64>,
    ln_l: f64,
    ln_p: f64,
    rng: ChaCha8Rng,
    kept_pos: Vec<f64>,
    kept_ln_l: Vec<f64>,
    kept_ln_p: Vec<f64>,
}

/// Draw the stretch factor with density proportional to `1/sqrt(z)` on
/// `[1/a, a]` via its inverse CDF.
fn draw_stretch_z(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    let u: f64 = rng.random();
    ((a - 1.0) * u + 1.0).powi(2) / a
}

/// Run the affine-invariant ensemble sampler on `problem`, keeping the
/// positions after `burn_in` sweeps. Each walker's draws form one chain, and
/// each retained sample stores its log-likelihood and log-prior.
///
/// A sweep updates the two half-ensembles alternately: each walker in the
/// active half proposes `theta' = theta_j + z (theta_k - theta_j)` against a
/// partner `j` from the frozen complementary half and accepts with
/// probability `min(1, z^(d-1) exp(lnpost' - lnpost))`. Per-walker RNG
/// streams make the run deterministic for a fixed seed regardless of how the
/// half-sweeps are parallelized.
pub fn ensemble_sample<P: Posterior>(problem: &P, config: &EnsembleConfig) -> Result<SampleSet> {
    let dim = problem.dim();
    config.validate(dim)?;
    let n_kept = config.n_steps - config.burn_in;

    let mut walkers: Vec<Walker> = (0..config.n_walkers)
        .map(|k| {
            let mut rng = stream_rng(config.seed, &[math::STREAM_WALKER, k as u64]);
            let pos: Vec<f64> = (0..dim)
                .map(|i| rng.random_range(config.init_box.low[i]..config.init_box.high[i]))
                .collect();
            let ln_l = problem.ln_likelihood(&pos);
            let ln_p = problem.ln_prior(&pos);
            Walker {
                pos,
                ln_l,
                ln_p,
                rng,
                kept_pos: Vec::with_capacity(n_kept * dim),
                kept_ln_l: Vec::with_capacity(n_kept),
                kept_ln_p: Vec::with_capacity(n_kept),
            }
        })
        .collect();

    if let Some(bad) = walkers.iter().position(|w| !(w.ln_l + w.ln_p).is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "log-posterior not finite at the initial position of walker {bad}"
        )));
    }

    let half = config.n_walkers / 2;
    let mut stalled_sweeps = 0usize;

    for step in 0..config.n_steps {
        let mut accepted = 0usize;
        for half_idx in 0..2 {
            let (lo, hi) = walkers.split_at_mut(half);
            let (active, frozen) = if half_idx == 0 { (lo, &*hi) } else { (hi, &*lo) };
            accepted += active
                .par_iter_mut()
                .map(|walker| {
                    update_walker(problem, walker, frozen, config.stretch_a, dim) as usize
                })
                .sum::<usize>();
        }

        if accepted == 0 {
            stalled_sweeps += 1;
            if stalled_sweeps > MIXING_PATIENCE {
                return Err(Error::MixingFailure { sweeps: stalled_sweeps });
            }
        } else {
            stalled_sweeps = 0;
        }

        if step >= config.burn_in {
            for walker in &mut walkers {
                walker.kept_pos.extend_from_slice(&walker.pos);
                walker.kept_ln_l.push(walker.ln_l);
                walker.kept_ln_p.push(walker.ln_p);
            }
        }
    }

    let mut set = SampleSet::new(dim);
    for walker in walkers {
        let positions = Array2::from_shape_vec((n_kept, dim), walker.kept_pos)
            .expect("kept buffer has n_kept * dim entries");
        set.push_chain(Chain {
            positions,
            ln_likelihood: walker.kept_ln_l,
            ln_prior: walker.kept_ln_p,
        })?;
    }
    Ok(set)
}

fn update_walker<P: Posterior>(
    problem: &P,
    walker: &mut Walker,
    frozen: &[Walker],
    stretch_a: f64,
    dim: usize,
) -> bool {
    let partner = walker.rng.random_range(0..frozen.len());
    let z = draw_stretch_z(&mut walker.rng, stretch_a);
    let other = &frozen[partner].pos;
    let proposal: Vec<f64> = other
        .iter()
        .zip(&walker.pos)
        .map(|(oj, wk)| oj + z * (wk - oj))
        .collect();

    let ln_p = problem.ln_prior(&proposal);
    let (ln_l, ln_post) = if ln_p == f64::NEG_INFINITY {
        (f64::NEG_INFINITY, f64::NEG_INFINITY)
    } else {
        let ln_l = problem.ln_likelihood(&proposal);
        (ln_l, ln_l + ln_p)
    };
    let current = walker.ln_l + walker.ln_p;
    let ln_accept = (dim as f64 - 1.0) * z.ln() + ln_post - current;
    let u: f64 = walker.rng.random();
    if ln_accept >= u.ln() {
        walker.pos = proposal;
        walker.ln_l = ln_l;
        walker.ln_p = ln_p;
        true
    } else {
        false
    }
}

/// Draw from the Gaussian-mixture benchmark directly: pick a component with
/// its weight, draw through the cached triangular factor, shuffle all draws
/// globally, and partition them into `n_chains` equal chains. Each sample
/// records the mixture log-likelihood and the uniform log-prior.
pub fn gmm_direct_sample(
    spec: &GmmSpec,
    n_total: usize,
    n_chains: usize,
    seed: u64,
) -> Result<SampleSet> {
    if n_chains == 0 || n_total == 0 {
        return Err(Error::InvalidArgument("need positive sample and chain counts".into()));
    }
    if n_total % n_chains != 0 {
        return Err(Error::InvalidArgument(format!(
            "n_total = {n_total} is not divisible by n_chains = {n_chains}"
        )));
    }
    let dim = spec.dim;
    let mut rng = stream_rng(seed, &[math::STREAM_DIRECT_SAMPLE]);

    // Cumulative weights for the component draw.
    let mut cumulative = Vec::with_capacity(spec.n_components());
    let mut acc = 0.0;
    for w in &spec.weights {
        acc += w;
        cumulative.push(acc);
    }
    let total_weight = acc;

    let mut draws: Vec<(Vec<f64>, f64, f64)> = Vec::with_capacity(n_total);
    let mut z = vec![0.0; dim];
    for _ in 0..n_total {
        let u: f64 = rng.random_range(0.0..total_weight);
        let k = cumulative.iter().position(|c| u < *c).unwrap_or(spec.n_components() - 1);
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let x = spec.component_draw(k, &z);
        let ln_l = spec.ln_likelihood(&x);
        let ln_p = Posterior::ln_prior(spec, &x);
        draws.push((x, ln_l, ln_p));
    }
    draws.shuffle(&mut rng);

    let per_chain = n_total / n_chains;
    let mut set = SampleSet::new(dim);
    for c in 0..n_chains {
        let block = &draws[c * per_chain..(c + 1) * per_chain];
        let mut positions = Array2::<f64>::zeros((per_chain, dim));
        let mut ln_likelihood = Vec::with_capacity(per_chain);
        let mut ln_prior = Vec::with_capacity(per_chain);
        for (i, (x, ln_l, ln_p)) in block.iter().enumerate() {
            for j in 0..dim {
                positions[[i, j]] = x[j];
            }
            ln_likelihood.push(*ln_l);
            ln_prior.push(*ln_p);
        }
        set.push_chain(Chain { positions, ln_likelihood, ln_prior })?;
    }
    Ok(set)
}
