//! Posterior sampling for the cluster models.

pub mod diagnostics;
pub mod hmc;
pub mod sampler;
pub mod target;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{ModelConfig, ModelParams};

pub use diagnostics::{effective_sample_size, rank_histogram, split_r_hat, split_r_hat_basic, RankHistogram};
pub use hmc::{run_nuts_chains, GradientTarget};
pub use sampler::{run_chains, BlockTarget, ChainOutput, FnTarget, Method, SamplerConfig};
pub use target::ClusterTarget;

/// Post-warmup acceptance rate of one sampler block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainSamples {
    pub draws: Vec<ModelParams>,
    /// Unnormalised log posterior (unconstrained scale) at each draw.
    pub log_density: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
    /// Divergent transitions after warmup.
    pub divergent: u64,
}

impl ChainSamples {
    /// Mean acceptance rate over blocks.
    pub fn mean_acceptance(&self) -> f64 {
        if self.acceptance.is_empty() {
            return 0.0;
        }
        self.acceptance.iter().map(|a| a.rate).sum::<f64>() / self.acceptance.len() as f64
    }
}

/// Posterior draws from several chains together with the settings that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub n_providers: usize,
    /// Fingerprint of the dataset the chains were fitted to.
    pub dataset_fingerprint: Option<String>,
    pub chains: Vec<ChainSamples>,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    /// All draws, chain by chain.
    pub fn pooled(&self) -> impl Iterator<Item = &ModelParams> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    /// Traces of a scalar function of the parameters, one per chain.
    pub fn trace(&self, f: impl Fn(&ModelParams) -> f64) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(&f).collect()).collect()
    }

    pub fn concentration_trace(&self) -> Vec<Vec<f64>> {
        self.trace(ModelParams::concentration)
    }

    pub fn alpha_trace(&self) -> Option<Vec<Vec<f64>>> {
        self.pooled().next()?.alpha()?;
        Some(self.trace(|p| p.alpha().unwrap_or(f64::NAN)))
    }

    /// Posterior mean of the mixture weights, component by component.
    pub fn mean_weights(&self) -> Vec<f64> {
        let mut acc: Vec<f64> = Vec::new();
        for p in self.pooled() {
            let w = p.mixture_weights();
            if acc.is_empty() {
                acc = vec![0.0; w.len()];
            }
            acc.iter_mut().zip(w.iter()).for_each(|(a, b)| *a += b);
        }
        let n = self.n_draws().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Fits `config` to `dataset` with the sampler chosen in `sampler.method`.
pub fn fit(dataset: &Dataset, config: &ModelConfig, sampler: &SamplerConfig) -> Result<PosteriorSamples> {
    if dataset.is_empty() {
        return Err(Error::Data("dataset has no records".into()));
    }
    let target = ClusterTarget::new(dataset, config)?;
    log::info!(
        "sampling {:?} model: {} records, {} providers, {} parameters, {} chains",
        config.variant,
        dataset.len(),
        dataset.n_providers(),
        target.layout().dim(),
        sampler.n_chains
    );
    let (outputs, names) = match sampler.method {
        Method::Metropolis => (
            run_chains(&target, sampler)?,
            target.block_kinds().iter().map(|k| k.name()).collect(),
        ),
        Method::Nuts => (run_nuts_chains(&target, sampler)?, vec!["nuts".to_string()]),
    };
    let chains = outputs
        .into_iter()
        .enumerate()
        .map(|(k, out)| {
            if out.divergent > 0 {
                log::warn!("chain {k}: {} divergent transitions after warmup", out.divergent);
            }
            let acceptance = names
                .iter()
                .zip(out.acceptance.iter().copied())
                .map(|(block, rate)| BlockAcceptance {
                    block: block.clone(),
                    rate,
                })
                .collect();
            let draws = out
                .draws
                .iter()
                .map(|y| target.layout().unpack(y).map(|(p, _)| p))
                .collect::<Result<Vec<_>>>()?;
            Ok(ChainSamples {
                draws,
                log_density: out.log_density,
                acceptance,
                divergent: out.divergent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples {
        model: config.clone(),
        sampler: sampler.clone(),
        n_providers: dataset.n_providers(),
        dataset_fingerprint: Some(dataset.fingerprint()),
        chains,
    })
}
