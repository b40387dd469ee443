//! Drives the MCMC engine on a user-supplied density: a Bayesian logistic
//! regression with one slope and one intercept. The random-walk sampler only
//! needs the log density; the no-U-turn sampler also needs its gradient.
//!
//! Run with `cargo run --release --example custom_target`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usertransfer::inference::{
    effective_sample_size, run_chains, run_nuts_chains, split_r_hat, ChainOutput, FnTarget, GradientTarget, Method,
    SamplerConfig,
};

struct Logistic {
    x: Vec<f64>,
    y: Vec<bool>,
}

impl Logistic {
    /// Standard normal priors on both coefficients.
    fn log_density(&self, b: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mut lp = -0.5 * (b[0] * b[0] + b[1] * b[1]);
        let mut g = [-b[0], -b[1]];
        for (x, y) in self.x.iter().zip(&self.y) {
            let eta = b[0] + b[1] * x;
            let p = 1.0 / (1.0 + (-eta).exp());
            lp += if *y { p.ln() } else { (1.0 - p).ln() };
            let r = if *y { 1.0 - p } else { -p };
            g[0] += r;
            g[1] += r * x;
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        lp
    }
}

impl GradientTarget for Logistic {
    fn dim(&self) -> usize {
        2
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_density(x, Some(grad))
    }
}

fn summarise(name: &str, out: &[ChainOutput]) -> usertransfer::Result<()> {
    for (k, label) in ["intercept", "slope"].iter().enumerate() {
        let chains: Vec<Vec<f64>> = out.iter().map(|o| o.draws.iter().map(|d| d[k]).collect()).collect();
        let pooled: Vec<f64> = chains.concat();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        println!(
            "{name:>10} {label:<9} mean {mean:+.3}  R-hat {:.3}  ESS {:>6.0}",
            split_r_hat(&chains)?,
            effective_sample_size(&chains)?
        );
    }
    Ok(())
}

fn main() -> usertransfer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = x
        .iter()
        .map(|x| rng.random::<f64>() < 1.0 / (1.0 + (-(0.5 + 1.5 * x)).exp()))
        .collect();
    let model = Logistic { x, y };
    println!("data simulated with intercept +0.5 and slope +1.5");

    let config = SamplerConfig {
        n_chains: 4,
        n_warmup: 1000,
        n_draws: 2000,
        ..SamplerConfig::default()
    };
    let rw = run_chains(
        &FnTarget::new(2, |b: &[f64]| model.log_density(b, None)),
        &SamplerConfig {
            method: Method::Metropolis,
            ..config.clone()
        },
    )?;
    summarise("metropolis", &rw)?;
    let nuts = run_nuts_chains(&model, &config)?;
    summarise("nuts", &nuts)?;
    Ok(())
}
