//! Fits the fixed-size mixture with three clusters and recovers user groups
//! by k-means over the preference rows of every posterior draw, which is
//! robust to clusters swapping labels between chains.
//!
//! Run with `cargo run --release --example user_groups [clusters] [seed]`.

use usertransfer::evaluation::{kmeans_preferences, preference_ratios};
use usertransfer::inference::{fit, SamplerConfig};
use usertransfer::model::{ModelConfig, Variant};
use usertransfer::simulator::{run_simulation, ScenarioConfig};

fn main() -> usertransfer::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let data = run_simulation(&ScenarioConfig {
        seed,
        n_providers: 6,
        home_clusters: k,
        home_spread: 0.02,
        ..ScenarioConfig::default()
    })?;
    let model = ModelConfig {
        variant: Variant::Naive,
        clusters: k,
        ..ModelConfig::default()
    };
    let sampler = SamplerConfig {
        n_chains: 2,
        n_warmup: 500,
        n_draws: 500,
        base_seed: seed,
        ..SamplerConfig::default()
    };
    let posterior = fit(&data, &model, &sampler)?;

    let mut rows = Vec::new();
    for params in posterior.pooled() {
        let w = params.mixture_weights();
        for (j, row) in params.preferences().to_rows().into_iter().enumerate() {
            if w[j] > 0.05 {
                rows.push(row);
            }
        }
    }
    let groups = kmeans_preferences(&rows, k, seed)?;
    println!("{} preference rows grouped, inertia {:.4}", rows.len(), groups.inertia);
    for (j, centre) in groups.centroids.iter().enumerate() {
        let size = groups.labels.iter().filter(|l| **l == j).count();
        let mut order: Vec<usize> = (0..centre.len()).collect();
        order.sort_by(|a, b| centre[*b].total_cmp(&centre[*a]));
        let ratios = preference_ratios(centre, &order)?;
        println!("group {j} ({size} rows): preferences {centre:.3?}");
        println!(
            "  favourite providers {:?}, first-to-second ratio {:.2}",
            order.iter().take(3).map(|i| i + 1).collect::<Vec<_>>(),
            ratios[0]
        );
    }
    Ok(())
}
