//! How many stick-breaking clusters does the posterior actually use?
//!
//! Simulates users drawn around 10 home locations, fits the stick-breaking
//! model with 20 retained clusters and reports the significant-cluster
//! count for a truncation threshold, together with the sorted posterior
//! mean weights.
//!
//! Run with `cargo run --release --example truncation [delta] [seed]`.

use usertransfer::evaluation::{truncation_count, weight_draws};
use usertransfer::inference::{fit, SamplerConfig};
use usertransfer::model::{ModelConfig, Variant};
use usertransfer::simulator::{run_simulation, ScenarioConfig};

fn main() -> usertransfer::Result<()> {
    let delta: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-6);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(11);
    let data = run_simulation(&ScenarioConfig {
        seed,
        home_clusters: 10,
        ..ScenarioConfig::default()
    })?;
    let model = ModelConfig {
        variant: Variant::Complete,
        clusters: 20,
        ..ModelConfig::default()
    };
    let sampler = SamplerConfig {
        base_seed: seed,
        ..SamplerConfig::default()
    };
    let posterior = fit(&data, &model, &sampler)?;

    let report = truncation_count(&weight_draws(&posterior), delta)?;
    println!(
        "delta = {delta:e}: median significant clusters {} ({} of {} draws never reach delta)",
        report.median,
        report.unreachable,
        report.counts.len()
    );
    for (m, n) in report.histogram.iter().enumerate().filter(|(_, n)| **n > 0) {
        println!("  W = {m:>2}: {n} draws");
    }

    let mut weights = posterior.mean_weights();
    weights.sort_by(|a, b| b.total_cmp(a));
    let top3: f64 = weights.iter().take(3).sum();
    println!("sorted mean weights: {:.3?}", &weights[..10]);
    println!("first three clusters carry {:.1}% of the weight", 100.0 * top3);
    Ok(())
}
