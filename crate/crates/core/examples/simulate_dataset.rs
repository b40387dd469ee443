//! Generates a dataset of availability and load records from mobile users
//! and writes it as CSV.
//!
//! Run with `cargo run --release --example simulate_dataset [out.csv] [seed]`.

use std::path::PathBuf;

use usertransfer::io::save_dataset;
use usertransfer::simulator::{run_simulation, ScenarioConfig};

fn main() -> usertransfer::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "simulated.csv".into()));
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let config = ScenarioConfig {
        seed,
        // redraw provider states four times per interval so that recorded
        // availability takes fractional values
        state_period: Some(25),
        ..ScenarioConfig::default()
    };
    let data = run_simulation(&config)?;

    let n = data.n_providers();
    let mut availability = vec![0.0; n];
    let mut load = vec![0.0; n];
    for r in data.records() {
        for i in 0..n {
            availability[i] += r.u[i] / data.len() as f64;
            load[i] += r.x[i] / data.len() as f64;
        }
    }
    println!(
        "{} records over {n} providers, {} users each",
        data.len(),
        config.n_users
    );
    println!("provider  mean availability  mean load");
    for i in 0..n {
        println!("{:>8}  {:>17.2}  {:>9.1}", i + 1, availability[i], load[i]);
    }
    let first = &data.records()[0];
    println!("first record: u = {:?}", first.u.as_slice());
    println!("              x = {:?}", first.x);

    save_dataset(&out, &data)?;
    println!("wrote {} (fingerprint {})", out.display(), &data.fingerprint()[..16]);
    Ok(())
}
