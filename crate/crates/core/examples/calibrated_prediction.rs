//! Predicts loads under unseen availability patterns, then recalibrates the
//! predictive spread by choosing a shrinkage factor on a validation split.
//!
//! Run with `cargo run --release --example calibrated_prediction [seed]`.

use usertransfer::evaluation::{calibration_deviation, default_p_grid, reliability_curve};
use usertransfer::inference::{fit, SamplerConfig};
use usertransfer::model::{ModelConfig, Variant};
use usertransfer::prediction::{predict_dataset, select_shrinkage, shrink_samples, ShrinkageConfig};
use usertransfer::simulator::{run_simulation, ScenarioConfig};

fn main() -> usertransfer::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let data = run_simulation(&ScenarioConfig {
        seed,
        ..ScenarioConfig::default()
    })?;
    let (fit_data, test) = data.split(0.8);
    let (train, validation) = fit_data.split(0.8);
    let model = ModelConfig {
        variant: Variant::Complete,
        clusters: 15,
        ..ModelConfig::default()
    };
    let sampler = SamplerConfig {
        n_chains: 2,
        n_warmup: 500,
        n_draws: 500,
        base_seed: seed,
        ..SamplerConfig::default()
    };
    let posterior = fit(&train, &model, &sampler)?;

    let selection = select_shrinkage(&posterior, &validation, &ShrinkageConfig::default(), seed)?;
    for (s, dev) in &selection.scores {
        println!("s = {s:<4}  validation calibration deviation {dev:.2}");
    }
    println!("selected s = {}", selection.s);

    let run = predict_dataset(&posterior, &test, None, seed)?;
    let truths: Vec<Vec<f64>> = test.records().iter().map(|r| r.x.clone()).collect();
    let shrunk = run
        .scenarios
        .iter()
        .map(|set| shrink_samples(set, selection.s))
        .collect::<usertransfer::Result<Vec<_>>>()?;
    let before = reliability_curve(&run.scenarios, &truths, &default_p_grid())?;
    let after = reliability_curve(&shrunk, &truths, &default_p_grid())?;
    println!("   P   raw coverage   shrunk coverage");
    for (a, b) in before.points.iter().zip(&after.points) {
        println!("{:>4.0}%  {:>12.1}%  {:>15.1}%", a.nominal, a.empirical, b.empirical);
    }
    println!(
        "test calibration deviation {:.2} raw, {:.2} shrunk",
        calibration_deviation(&before),
        calibration_deviation(&after)
    );

    let example = &shrunk[0];
    println!("first test record: u = {:?}", example.u.as_slice());
    println!("  predicted {:.1?}", example.nominal()?);
    println!("  observed  {:.1?}", truths[0]);
    Ok(())
}
