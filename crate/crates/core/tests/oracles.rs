//! Monte Carlo checks against closed-form answers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use usertransfer::dist::{dirichlet_moments, dirichlet_sample};
use usertransfer::inference::{
    effective_sample_size, rank_histogram, run_chains, run_nuts_chains, split_r_hat, split_r_hat_basic, ChainOutput,
    ChainSamples, FnTarget, GradientTarget, Method, PosteriorSamples, SamplerConfig,
};
use usertransfer::model::{Likelihood, ModelConfig, ModelParams};
use usertransfer::prediction::draw_predictive;
use usertransfer::simplex::{AvailabilityVector, SimplexVector};

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn dirichlet_sample_moments_match_closed_form() {
    let p = SimplexVector::new(vec![0.5, 0.3, 0.2]).unwrap();
    let c = 7.0;
    let alpha: Vec<f64> = p.iter().map(|v| v * c).collect();
    let (mean, var) = dirichlet_moments(&p, c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let draws: Vec<SimplexVector> = (0..n).map(|_| dirichlet_sample(&alpha, &mut rng).unwrap()).collect();
    for i in 0..3 {
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (m, v) = mean_var(&col);
        let se_mean = (var[i] / n as f64).sqrt();
        assert!((m - mean[i]).abs() < 4.0 * se_mean, "mean {i}: {m} vs {}", mean[i]);
        assert!((v - var[i]).abs() / var[i] < 0.02, "variance {i}: {v} vs {}", var[i]);
    }
}

/// With a single posterior draw the predictive loads are `M * Dirichlet(c p)`.
#[test]
fn predictive_moments_match_single_draw_oracle() {
    let l = vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.2, 0.7]];
    let w = vec![0.75, 0.25];
    let c = 40.0;
    let params = ModelParams::naive(w.clone(), l.clone(), c).unwrap();
    let posterior = PosteriorSamples {
        model: ModelConfig {
            likelihood: Likelihood::Dirichlet,
            ..ModelConfig::default()
        },
        sampler: SamplerConfig::default(),
        n_providers: 3,
        dataset_fingerprint: None,
        chains: vec![ChainSamples {
            draws: vec![params],
            ..ChainSamples::default()
        }],
    };
    let u = AvailabilityVector::new(vec![1.0, 0.5, 1.0]).unwrap();
    let total = 100.0;
    // independent computation of the mixture proportions
    let mut p = [0.0; 3];
    for (row, wj) in l.iter().zip(&w) {
        let denom: f64 = row.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        for i in 0..3 {
            p[i] += wj * row[i] * u[i] / denom;
        }
    }
    let q = 100_000;
    let pred = draw_predictive(&posterior, 0, &u, total, q, 5).unwrap();
    for i in 0..3 {
        let col = pred.column(i);
        let (m, v) = mean_var(&col);
        let var = total * total * p[i] * (1.0 - p[i]) / (c + 1.0);
        assert!(
            (m - total * p[i]).abs() < 4.0 * (var / q as f64).sqrt(),
            "provider {i}: {m}"
        );
        assert!((v - var).abs() / var < 0.03, "provider {i}: {v} vs {var}");
    }
}

const PRIOR_A: f64 = 2.0;
const PRIOR_B: f64 = 3.0;
const SUCCESSES: f64 = 7.0;
const TRIALS: f64 = 20.0;

/// Beta(2, 3) prior and 7 of 20 successes on the logit scale.
fn beta_binomial_lp(y: f64) -> (f64, f64) {
    let theta = 1.0 / (1.0 + (-y).exp());
    let a = PRIOR_A + SUCCESSES;
    let b = PRIOR_B + TRIALS - SUCCESSES;
    let lp = a * theta.ln() + b * (1.0 - theta).ln();
    (lp, a * (1.0 - theta) - b * theta)
}

struct BetaBinomial;

impl GradientTarget for BetaBinomial {
    fn dim(&self) -> usize {
        1
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0)]
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (lp, g) = beta_binomial_lp(x[0]);
        grad[0] = g;
        lp
    }
}

fn check_beta_binomial(outputs: &[ChainOutput]) {
    let chains: Vec<Vec<f64>> = outputs
        .iter()
        .map(|o| o.draws.iter().map(|d| 1.0 / (1.0 + (-d[0]).exp())).collect())
        .collect();
    let a = PRIOR_A + SUCCESSES;
    let b = PRIOR_B + TRIALS - SUCCESSES;
    let mean = a / (a + b);
    let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
    let pooled: Vec<f64> = chains.concat();
    let (m, v) = mean_var(&pooled);
    let ess = effective_sample_size(&chains).unwrap();
    assert!(
        (m - mean).abs() < 3.0 * (var / ess).sqrt(),
        "mean {m} vs {mean} (ESS {ess})"
    );
    let sq: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|t| (t - m).powi(2)).collect())
        .collect();
    let (_, sq_var) = mean_var(&sq.concat());
    let ess_sq = effective_sample_size(&sq).unwrap();
    assert!(
        (v - var).abs() < 3.0 * (sq_var / ess_sq).sqrt(),
        "variance {v} vs {var}"
    );
}

#[test]
fn beta_binomial_posterior_through_metropolis() {
    let target = FnTarget::new(1, |y: &[f64]| beta_binomial_lp(y[0]).0);
    let config = SamplerConfig {
        method: Method::Metropolis,
        n_chains: 4,
        n_warmup: 1000,
        n_draws: 5000,
        base_seed: 11,
        ..SamplerConfig::default()
    };
    check_beta_binomial(&run_chains(&target, &config).unwrap());
}

#[test]
fn beta_binomial_posterior_through_nuts() {
    let config = SamplerConfig {
        n_chains: 4,
        n_warmup: 1000,
        n_draws: 5000,
        base_seed: 12,
        ..SamplerConfig::default()
    };
    check_beta_binomial(&run_nuts_chains(&BetaBinomial, &config).unwrap());
}

/// Zero-mean Gaussian with covariance [[4, 1.2], [1.2, 1]].
const COV: [[f64; 2]; 2] = [[4.0, 1.2], [1.2, 1.0]];

fn gaussian_lp(x: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let det = COV[0][0] * COV[1][1] - COV[0][1] * COV[1][0];
    let inv = [[COV[1][1] / det, -COV[0][1] / det], [-COV[1][0] / det, COV[0][0] / det]];
    let g = [
        -(inv[0][0] * x[0] + inv[0][1] * x[1]),
        -(inv[1][0] * x[0] + inv[1][1] * x[1]),
    ];
    if let Some(out) = grad {
        out.copy_from_slice(&g);
    }
    0.5 * (x[0] * g[0] + x[1] * g[1])
}

struct Gaussian2;

impl GradientTarget for Gaussian2 {
    fn dim(&self) -> usize {
        2
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        gaussian_lp(x, Some(grad))
    }
}

fn check_covariance(outputs: &[ChainOutput]) {
    let draws: Vec<&Vec<f64>> = outputs.iter().flat_map(|o| o.draws.iter()).collect();
    assert!(draws.len() >= 100_000);
    let n = draws.len() as f64;
    let mean: Vec<f64> = (0..2).map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / n).collect();
    for a in 0..2 {
        for b in 0..2 {
            let cov = draws.iter().map(|d| (d[a] - mean[a]) * (d[b] - mean[b])).sum::<f64>() / n;
            assert!(
                (cov - COV[a][b]).abs() <= 0.05 * COV[a][b].abs(),
                "cov[{a}][{b}] = {cov}, expected {}",
                COV[a][b]
            );
        }
    }
}

#[test]
fn gaussian_covariance_through_metropolis() {
    let target = FnTarget::new(2, |x: &[f64]| gaussian_lp(x, None));
    let config = SamplerConfig {
        method: Method::Metropolis,
        n_chains: 4,
        n_warmup: 2000,
        n_draws: 25_000,
        thin: 4,
        base_seed: 21,
        ..SamplerConfig::default()
    };
    check_covariance(&run_chains(&target, &config).unwrap());
}

#[test]
fn gaussian_covariance_through_nuts() {
    let config = SamplerConfig {
        n_chains: 4,
        n_warmup: 1000,
        n_draws: 25_000,
        base_seed: 22,
        ..SamplerConfig::default()
    };
    check_covariance(&run_nuts_chains(&Gaussian2, &config).unwrap());
}

fn ar1_chains(phi: f64, chains: usize, len: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (1.0 - phi * phi).sqrt();
    (0..chains)
        .map(|_| {
            let mut x: f64 = rng.sample(StandardNormal);
            (0..len)
                .map(|_| {
                    x = phi * x + sd * rng.sample::<f64, _>(StandardNormal);
                    x
                })
                .collect()
        })
        .collect()
}

#[test]
fn ess_of_ar1_matches_its_autocorrelation_time() {
    let phi = 0.5;
    let chains = ar1_chains(phi, 4, 5000, 3);
    let ess = effective_sample_size(&chains).unwrap();
    let expected = 20_000.0 * (1.0 - phi) / (1.0 + phi);
    assert!((ess - expected).abs() / expected < 0.15, "{ess} vs {expected}");
}

#[test]
fn iid_chains_have_unit_r_hat_and_full_ess() {
    let chains = ar1_chains(0.0, 4, 1000, 4);
    let r = split_r_hat(&chains).unwrap();
    assert!((r - 1.0).abs() < 0.01, "{r}");
    let ess = effective_sample_size(&chains).unwrap();
    assert!(ess > 3000.0, "{ess}");
    let hist = rank_histogram(&chains, 10).unwrap();
    assert!(hist.p_value > 1e-4, "{hist:?}");
}

/// Two chains centred at 0 and 10 with unit variance.
#[test]
fn separated_chains_are_flagged() {
    let mut chains = ar1_chains(0.0, 2, 1000, 5);
    chains[1].iter_mut().for_each(|v| *v += 10.0);
    assert!(split_r_hat_basic(&chains).unwrap() > 2.0);
    assert!(split_r_hat(&chains).unwrap() > 1.5);
    let hist = rank_histogram(&chains, 10).unwrap();
    assert!(hist.p_value < 1e-6);
}
