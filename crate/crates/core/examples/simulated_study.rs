//! End-to-end study on simulated data: generate 10 providers and 100 mobile
//! users, fit the stick-breaking model on the first 80% of intervals and
//! score predictions for the remaining 20%.
//!
//! Run with `cargo run --release --example simulated_study [seed]`.

use std::time::Instant;

use usertransfer::evaluation::{calibration_deviation, default_p_grid, reliability_curve};
use usertransfer::inference::{effective_sample_size, fit, split_r_hat, SamplerConfig};
use usertransfer::model::{ModelConfig, Variant};
use usertransfer::prediction::{nominal_error, predict_dataset};
use usertransfer::simulator::{run_simulation, ScenarioConfig};

fn main() -> usertransfer::Result<()> {
    let arg = |k: usize, default: u64| std::env::args().nth(k).and_then(|s| s.parse().ok()).unwrap_or(default);
    let seed = arg(1, 7);
    let scenario = ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    };
    let data = run_simulation(&scenario)?;
    let (train, test) = data.split(0.8);
    println!("{} records: {} train, {} test", data.len(), train.len(), test.len());

    let model = ModelConfig {
        variant: Variant::Complete,
        clusters: 20,
        ..ModelConfig::default()
    };
    let sampler = SamplerConfig {
        n_chains: 4,
        n_warmup: arg(2, 1000) as usize,
        n_draws: 2000,
        thin: arg(3, 1) as usize,
        base_seed: seed,
        ..SamplerConfig::default()
    };
    let started = Instant::now();
    let posterior = fit(&train, &model, &sampler)?;
    println!("sampling took {:.1?}", started.elapsed());
    for (k, chain) in posterior.chains.iter().enumerate() {
        println!("chain {k}: mean acceptance {:.3}", chain.mean_acceptance());
    }
    let c = posterior.concentration_trace();
    let alpha = posterior.alpha_trace().expect("complete model has alpha");
    println!(
        "c: R-hat {:.3}, ESS {:.0};  alpha: R-hat {:.3}, ESS {:.0}",
        split_r_hat(&c)?,
        effective_sample_size(&c)?,
        split_r_hat(&alpha)?,
        effective_sample_size(&alpha)?
    );

    let run = predict_dataset(&posterior, &test, None, seed)?;
    let truths: Vec<Vec<f64>> = test.records().iter().map(|r| r.x.clone()).collect();
    let mut errors = Vec::new();
    let mut sds = Vec::new();
    for (set, truth) in run.scenarios.iter().zip(&truths) {
        let err = nominal_error(&set.nominal()?, truth)?;
        let sd = set.sd()?;
        for i in set.u.support() {
            errors.push(err[i]);
            sds.push(sd[i]);
        }
    }
    let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;
    let within = errors.iter().filter(|e| e.abs() <= 5.0).count() as f64 / errors.len() as f64;
    sds.sort_by(f64::total_cmp);
    println!(
        "nominal error: mean {mean_err:.3}, {:.1}% within +/-5 users; median SD {:.2}",
        100.0 * within,
        sds[sds.len() / 2]
    );

    let curve = reliability_curve(&run.scenarios, &truths, &default_p_grid())?;
    for p in &curve.points {
        println!("  P = {:>4.0}%  coverage {:>5.1}%", p.nominal, p.empirical);
    }
    println!(
        "calibration deviation {:.2} points (max over 10..90: {:.2})",
        calibration_deviation(&curve),
        curve.max_deviation(10.0, 90.0)
    );
    Ok(())
}
