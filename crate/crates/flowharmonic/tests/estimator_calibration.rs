//! Statistical properties of the estimator's error bar, checked over many
//! small repeated runs: the reported sigma must track the spread actually
//! observed across seeds, and halving the inference set must move the
//! estimate by less than three sigma almost always.

use flowharmonic::cnf::{FlowModel, OdeConfig};
use flowharmonic::evidence::{self, EvidenceEstimate};
use flowharmonic::flowmatch::TrainConfig;
use flowharmonic::net::VelocityNet;
use flowharmonic::problems::{build_gmm, GmmBuildConfig, GmmSpec};
use flowharmonic::samples::SampleSet;
use flowharmonic::sampling::gmm_direct_sample;

fn bench_problem() -> GmmSpec {
    let config = GmmBuildConfig {
        dim: 2,
        n_components: 2,
        ..GmmBuildConfig::standard_20d()
    };
    build_gmm(&config, 8).unwrap()
}

fn one_run(spec: &GmmSpec, seed: u64) -> (EvidenceEstimate, SampleSet, FlowModel) {
    let samples = gmm_direct_sample(spec, 4000, 20, seed).unwrap();
    let net = VelocityNet::init(2, 3, 64, seed ^ 0x5555).unwrap();
    let train = TrainConfig {
        epochs: 400,
        batch_size: 512,
        learning_rate: 2e-3,
        patience: 30,
        seed,
        ..TrainConfig::default()
    };
    let (flow, inference, _) =
        FlowModel::fit(&samples, net, &train, OdeConfig::default(), 0.9).unwrap();
    let estimate = evidence::estimate(&inference, &flow).unwrap();
    (estimate, inference, flow)
}

#[test]
fn reported_sigma_matches_observed_spread_within_factor_two() {
    let spec = bench_problem();
    let truth = spec.analytic_ln_evidence().unwrap();
    let runs = 20;
    let mut ln_z = Vec::with_capacity(runs);
    let mut sigmas = Vec::with_capacity(runs);
    for seed in 0..runs as u64 {
        let (estimate, _, _) = one_run(&spec, seed);
        ln_z.push(estimate.ln_z);
        sigmas.push(estimate.sigma_ln_z);
    }
    let measured = flowharmonic::math::sample_variance(&ln_z).sqrt();
    let estimated = flowharmonic::math::mean(&sigmas);
    assert!(
        measured <= 2.0 * estimated && measured >= estimated / 2.0,
        "measured spread {measured} vs mean reported sigma {estimated}"
    );
    // The ensemble of runs must also land on the truth.
    let mean_ln_z = flowharmonic::math::mean(&ln_z);
    let sem = measured / (runs as f64).sqrt();
    assert!(
        (mean_ln_z - truth).abs() < (4.0 * sem).max(0.1),
        "mean ln_z {mean_ln_z} vs truth {truth} (sem {sem})"
    );
}

#[test]
fn halving_the_inference_set_moves_the_estimate_within_three_sigma() {
    let spec = bench_problem();
    let runs = 20;
    let mut within = 0;
    for seed in 100..(100 + runs as u64) {
        let (full, inference, flow) = one_run(&spec, seed);
        // First half of every chain.
        let mut half = SampleSet::new(inference.dim());
        for chain in inference.chains() {
            let keep = chain.len() / 2;
            half.push_chain(flowharmonic::samples::Chain {
                positions: chain
                    .positions
                    .slice(ndarray::s![0..keep, ..])
                    .to_owned(),
                ln_likelihood: chain.ln_likelihood[..keep].to_vec(),
                ln_prior: chain.ln_prior[..keep].to_vec(),
            })
            .unwrap();
        }
        let halved = evidence::estimate(&half, &flow).unwrap();
        let sigma = full.sigma_ln_z.max(halved.sigma_ln_z);
        if (full.ln_z - halved.ln_z).abs() < 3.0 * sigma {
            within += 1;
        }
    }
    assert!(
        within * 100 >= runs * 95,
        "only {within}/{runs} runs stayed within three sigma"
    );
}
