//! Density-side integration checks: a trained 2-D flow must integrate to one
//! over a box, push base samples to the target region, and stay stable under
//! solver refinement.

use flowharmonic::cnf::{FlowModel, OdeConfig, OdeMethod};
use flowharmonic::flowmatch::TrainConfig;
use flowharmonic::math::{logsumexp, stream_rng};
use flowharmonic::net::VelocityNet;
use flowharmonic::samples::{Chain, SampleSet};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two well-separated isotropic Gaussians in 2-D, sampled directly.
fn two_blob_samples(n_chains: usize, per_chain: usize, seed: u64) -> SampleSet {
    let mut rng = stream_rng(seed, &[1001]);
    let centers = [[-1.5, -1.0], [1.5, 1.0]];
    let sigma = 0.4;
    let mut set = SampleSet::new(2);
    for _ in 0..n_chains {
        let mut positions = Array2::<f64>::zeros((per_chain, 2));
        for i in 0..per_chain {
            let c = if rng.random::<bool>() { 0 } else { 1 };
            for j in 0..2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                positions[[i, j]] = centers[c][j] + sigma * z;
            }
        }
        set.push_chain(Chain {
            positions,
            ln_likelihood: vec![0.0; per_chain],
            ln_prior: vec![0.0; per_chain],
        })
        .unwrap();
    }
    set
}

fn train_two_blob_flow(temperature: f64) -> FlowModel {
    let samples = two_blob_samples(8, 2500, 7);
    let net = VelocityNet::init(2, 2, 32, 3).unwrap();
    let config = TrainConfig {
        epochs: 60,
        batch_size: 2048,
        learning_rate: 2e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let (flow, _inference, report) =
        FlowModel::fit(&samples, net, &config, OdeConfig::default(), temperature).unwrap();
    assert!(report.final_loss.is_finite());
    assert!(report.final_loss < report.epoch_losses[0]);
    flow
}

/// Trapezoid quadrature of exp(log_density) over a box, evaluated with the
/// batched density path.
fn grid_mass_2d(flow: &FlowModel, low: f64, high: f64, grid: usize) -> f64 {
    let h = (high - low) / (grid - 1) as f64;
    let mut points = Array2::<f64>::zeros((grid * grid, 2));
    for i in 0..grid {
        for j in 0..grid {
            points[[i * grid + j, 0]] = low + i as f64 * h;
            points[[i * grid + j, 1]] = low + j as f64 * h;
        }
    }
    let ln_density = flow.log_density_batch(&points.view()).unwrap();
    let mut terms = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        let wi: f64 = if i == 0 || i == grid - 1 { 0.5 } else { 1.0 };
        for j in 0..grid {
            let wj: f64 = if j == 0 || j == grid - 1 { 0.5 } else { 1.0 };
            terms.push(ln_density[i * grid + j] + (wi * wj).ln() + 2.0 * h.ln());
        }
    }
    logsumexp(&terms).exp()
}

#[test]
fn trained_flow_normalizes_over_the_box() {
    let flow = train_two_blob_flow(0.95);
    let mass = grid_mass_2d(&flow, -6.0, 6.0, 400);
    assert!(
        (0.98..=1.02).contains(&mass),
        "flow mass over the box = {mass}"
    );
}

#[test]
fn flow_samples_land_on_the_target() {
    // Train on N(3, 1) in 1-D; the de-standardized flow draws must average
    // to 3 within +-0.1 over 10k samples.
    let mut rng = stream_rng(11, &[2002]);
    let mut set = SampleSet::new(1);
    for _ in 0..10 {
        let n = 5000;
        let mut positions = Array2::<f64>::zeros((n, 1));
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            positions[[i, 0]] = 3.0 + z;
        }
        set.push_chain(Chain {
            positions,
            ln_likelihood: vec![0.0; n],
            ln_prior: vec![0.0; n],
        })
        .unwrap();
    }
    let net = VelocityNet::init(1, 2, 32, 9).unwrap();
    let config = TrainConfig {
        epochs: 40,
        batch_size: 4096,
        learning_rate: 1e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let (flow, _, _) =
        FlowModel::fit(&set, net, &config, OdeConfig::default(), 1.0).unwrap();
    let draws = flow.sample(10_000, 77).unwrap();
    let mean = draws.column(0).sum() / draws.nrows() as f64;
    assert!((mean - 3.0).abs() < 0.1, "flow sample mean = {mean}");
}

#[test]
fn density_is_stable_under_step_refinement_and_dopri() {
    let flow = train_two_blob_flow(0.9);
    let fine = flow
        .with_ode(OdeConfig { steps: 200, ..OdeConfig::default() })
        .unwrap();
    let dopri = flow
        .with_ode(OdeConfig {
            method: OdeMethod::DopriAdaptive,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            ..OdeConfig::default()
        })
        .unwrap();
    for theta in [[-1.5, -1.0], [1.5, 1.0], [0.0, 0.0], [2.0, -0.5]] {
        let coarse_v = flow.log_density(&theta).unwrap();
        let fine_v = fine.log_density(&theta).unwrap();
        let dopri_v = dopri.log_density(&theta).unwrap();
        assert!(
            (coarse_v - fine_v).abs() < 1e-4,
            "rk4 100 vs 200 steps at {theta:?}: {}",
            (coarse_v - fine_v).abs()
        );
        assert!(
            (coarse_v - dopri_v).abs() < 1e-3,
            "rk4 vs dopri at {theta:?}: {}",
            (coarse_v - dopri_v).abs()
        );
    }
}

#[test]
fn round_trip_through_the_trained_flow() {
    let flow = train_two_blob_flow(1.0);
    // Integrate base draws forward, then back, through the public transport.
    use flowharmonic::cnf::{transport, ExactField};
    let mut rng = stream_rng(3, &[404]);
    let mut start = Array2::<f64>::zeros((16, 2));
    for v in start.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let mut pos = start.clone();
    let mut field = ExactField::new(flow.net());
    transport(&mut field, flow.ode(), &mut pos, true).unwrap();
    transport(&mut field, flow.ode(), &mut pos, false).unwrap();
    let mut worst = 0.0_f64;
    for (a, b) in pos.iter().zip(start.iter()) {
        worst = worst.max((a - b).abs());
    }
    assert!(worst < 1e-5, "round-trip error {worst}");
}

#[test]
fn hutchinson_tracks_exact_on_the_trained_flow() {
    let flow = train_two_blob_flow(0.95);
    let theta = [1.5, 1.0];
    let exact = flow.log_density(&theta).unwrap();
    let est = flow.log_density_hutchinson(&theta, 1024, 13).unwrap();
    assert!(
        (est - exact).abs() < 0.02,
        "hutchinson(1024) error {}",
        (est - exact).abs()
    );
}
