//! Scratch harness for training-schedule experiments (not part of the
//! deliverable test suite).

use flowharmonic::cnf::{FlowModel, OdeConfig};
use flowharmonic::evidence;
use flowharmonic::flowmatch::TrainConfig;
use flowharmonic::net::VelocityNet;
use flowharmonic::problems::{build_gmm, GmmBuildConfig, RastriginSpec};
use flowharmonic::sampling::{ensemble_sample, gmm_direct_sample, EnsembleConfig};
use flowharmonic::samples::SampleSet;

fn report(tag: &str, truth: f64, samples: &SampleSet, dim: usize, depth: usize, width: usize,
          lr: f64, batch: usize, epochs: usize, patience: usize, temperature: f64) {
    let net = VelocityNet::init(dim, depth, width, 0).unwrap();
    let train = TrainConfig {
        epochs,
        batch_size: batch,
        learning_rate: lr,
        seed: 7,
        patience,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (flow, inference, rep) =
        FlowModel::fit(samples, net, &train, OdeConfig::default(), temperature).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = std::time::Instant::now();
    let est = evidence::estimate(&inference, &flow).unwrap();
    let est_s = t1.elapsed().as_secs_f64();
    println!(
        "{tag} net {depth}x{width} lr {lr} batch {batch} T {temperature}: epochs {} loss0 {:.3} lossN {:.4} | lnz-truth {:+.3} sigma {:.3} ess {:.0}/{} share {:.4} | {:.0}s+{:.0}s",
        rep.epoch_losses.len(),
        rep.epoch_losses.first().unwrap(),
        rep.final_loss,
        est.ln_z - truth,
        est.sigma_ln_z,
        est.ess,
        est.n_samples,
        est.max_term_share,
        train_s,
        est_s,
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("gmm2");

    match which {
        "gmm2" => {
            let config = GmmBuildConfig { dim: 2, n_components: 2, ..GmmBuildConfig::standard_20d() };
            let spec = build_gmm(&config, 8).unwrap();
            let truth = spec.analytic_ln_evidence().unwrap();
            let samples = gmm_direct_sample(&spec, 4000, 20, 0).unwrap();
            println!("gmm2 truth {truth:.4}");
            report("gmm2", truth, &samples, 2, 2, 32, 2e-3, 1024, 40, 10, 0.9);
            report("gmm2", truth, &samples, 2, 3, 64, 1e-3, 512, 200, 20, 0.9);
            report("gmm2", truth, &samples, 2, 3, 64, 2e-3, 512, 400, 30, 0.9);
            report("gmm2", truth, &samples, 2, 4, 64, 2e-3, 256, 400, 30, 0.9);
        }
        "gmm6" => {
            let config = GmmBuildConfig { dim: 6, n_components: 3, ..GmmBuildConfig::standard_20d() };
            let spec = build_gmm(&config, 12).unwrap();
            let truth = spec.analytic_ln_evidence().unwrap();
            let samples = gmm_direct_sample(&spec, 6000, 30, 4).unwrap();
            println!("gmm6 truth {truth:.4}");
            report("gmm6", truth, &samples, 6, 3, 64, 2e-3, 512, 400, 30, 0.9);
            report("gmm6", truth, &samples, 6, 4, 128, 1e-3, 512, 400, 30, 0.9);
        }
        "gmm8" => {
            let config = GmmBuildConfig { dim: 8, n_components: 3, ..GmmBuildConfig::standard_20d() };
            let spec = build_gmm(&config, 12).unwrap();
            let truth = spec.analytic_ln_evidence().unwrap();
            let samples = gmm_direct_sample(&spec, 8000, 40, 4).unwrap();
            println!("gmm8 truth {truth:.4}");
            report("gmm8", truth, &samples, 8, 4, 96, 1e-3, 1024, 300, 25, 0.9);
            report("gmm8", truth, &samples, 8, 4, 96, 2e-3, 512, 400, 30, 0.9);
        }
        "rast2" => {
            let spec = RastriginSpec::standard_2d();
            let truth = spec.quadrature_ln_evidence(400).unwrap();
            let sampler = EnsembleConfig {
                n_walkers: 40,
                n_steps: 1500,
                burn_in: 300,
                stretch_a: 2.0,
                seed: 42,
                init_box: spec.prior_box(),
            };
            let samples = ensemble_sample(&spec, &sampler).unwrap();
            println!("rast2 truth {truth:.4} ({} samples)", samples.n_samples());
            report("rast2", truth, &samples, 2, 6, 128, 1e-3, 1024, 300, 25, 0.95);
        }
        "gmm20" => {
            let spec = build_gmm(&GmmBuildConfig::standard_20d(), 12).unwrap();
            let truth = spec.analytic_ln_evidence().unwrap();
            let samples = gmm_direct_sample(&spec, 6000, 30, 4).unwrap();
            println!("gmm20 truth {truth:.4}");
            report("gmm20", truth, &samples, 20, 4, 64, 1e-3, 512, 300, 25, 0.95);
            report("gmm20", truth, &samples, 20, 6, 128, 1e-3, 512, 300, 25, 0.95);
            report("gmm20", truth, &samples, 20, 6, 128, 1e-3, 512, 600, 40, 0.9);
        }
        "rast" => {
            let spec = RastriginSpec::standard_2d();
            let truth = spec.quadrature_ln_evidence(400).unwrap();
            let sampler = EnsembleConfig {
                n_walkers: 40,
                n_steps: 2500,
                burn_in: 500,
                stretch_a: 2.0,
                seed: 42,
                init_box: spec.prior_box(),
            };
            let samples = ensemble_sample(&spec, &sampler).unwrap();
            println!("rast truth {truth:.4} ({} samples)", samples.n_samples());
            report("rast", truth, &samples, 2, 4, 64, 1e-3, 1024, 200, 20, 0.98);
            report("rast", truth, &samples, 2, 6, 128, 1e-3, 1024, 300, 25, 0.98);
        }
        other => eprintln!("unknown experiment {other}"),
    }
}
