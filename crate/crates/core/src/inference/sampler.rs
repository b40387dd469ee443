//! Blockwise adaptive random-walk Metropolis.
//!
//! Each sweep updates the blocks of the unconstrained vector in a fixed
//! order with a Gaussian proposal `x_b + s_b * C_b z`. During warmup the
//! scale `s_b` follows a Robbins-Monro recursion towards the target
//! acceptance rate, and `C_b` is re-estimated from the block's draws at the
//! end of each adaptation window (an initial fast phase, doubling slow
//! windows, a final fast phase). Both are frozen once warmup ends, so the
//! retained draws come from a fixed Markov kernel.

use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A log density split into blocks, with caller-managed state so a block
/// update can reuse work shared with the other blocks.
pub trait BlockTarget: Sync {
    type Cache: Send;

    fn dim(&self) -> usize;

    /// Disjoint ranges covering `0..dim()`.
    fn blocks(&self) -> Vec<Range<usize>>;

    /// A random starting point.
    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Builds the cache at `x` and returns it with the log density.
    fn initialize(&self, x: &[f64]) -> (Self::Cache, f64);

    /// Log density of `x` with `block` replaced by `values`. May stage
    /// intermediate results in the cache for [`BlockTarget::accept`].
    fn propose(&self, cache: &mut Self::Cache, x: &[f64], block: usize, values: &[f64]) -> f64;

    /// Commits the last proposal for `block`.
    fn accept(&self, cache: &mut Self::Cache, block: usize);
}

/// Adapts a plain log-density closure to [`BlockTarget`]; every proposal
/// re-evaluates the whole density.
pub struct FnTarget<F> {
    log_density: F,
    blocks: Vec<Range<usize>>,
    init: Vec<f64>,
    init_jitter: f64,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnTarget<F> {
    /// One block covering every coordinate.
    pub fn new(dim: usize, log_density: F) -> Self {
        Self {
            log_density,
            blocks: vec![0..dim],
            init: vec![0.0; dim],
            init_jitter: 1.0,
        }
    }

    pub fn with_blocks(mut self, blocks: Vec<Range<usize>>) -> Self {
        self.blocks = blocks;
        self
    }

    /// Chains start at `center + U(-jitter, jitter)` per coordinate.
    pub fn with_init(mut self, center: Vec<f64>, jitter: f64) -> Self {
        self.init = center;
        self.init_jitter = jitter;
        self
    }
}

pub struct FnCache {
    scratch: Vec<f64>,
}

impl<F: Fn(&[f64]) -> f64 + Sync> BlockTarget for FnTarget<F> {
    type Cache = FnCache;

    fn dim(&self) -> usize {
        self.init.len()
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        self.blocks.clone()
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.init
            .iter()
            .map(|c| c + self.init_jitter * (2.0 * rng.random::<f64>() - 1.0))
            .collect()
    }

    fn initialize(&self, x: &[f64]) -> (FnCache, f64) {
        let lp = (self.log_density)(x);
        (FnCache { scratch: x.to_vec() }, lp)
    }

    fn propose(&self, cache: &mut FnCache, x: &[f64], block: usize, values: &[f64]) -> f64 {
        cache.scratch.copy_from_slice(x);
        cache.scratch[self.blocks[block].clone()].copy_from_slice(values);
        (self.log_density)(&cache.scratch)
    }

    fn accept(&self, _cache: &mut FnCache, _block: usize) {}
}

/// Transition kernel used by [`fit`](super::fit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Blockwise adaptive random-walk Metropolis.
    Metropolis,
    /// No-U-turn Hamiltonian Monte Carlo.
    Nuts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: Method,
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub base_seed: u64,
    pub target_acceptance: f64,
    pub initial_step_scale: f64,
    /// Keep every `thin`-th sweep after warmup.
    pub thin: usize,
    pub adapt_init_buffer: usize,
    pub adapt_term_buffer: usize,
    pub adapt_base_window: usize,
    /// Target mean acceptance statistic for NUTS step size adaptation.
    pub step_size_target: f64,
    pub max_tree_depth: usize,
    /// Length of an independent exploration run made by every chain before
    /// warmup. Chains that end it in a clearly worse region of the posterior
    /// restart warmup from the best chain's final state. Zero disables it.
    pub explore_iterations: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Nuts,
            n_chains: 4,
            n_warmup: 1000,
            n_draws: 1000,
            base_seed: 1,
            target_acceptance: 0.3,
            initial_step_scale: 0.1,
            thin: 1,
            adapt_init_buffer: 75,
            adapt_term_buffer: 50,
            adapt_base_window: 25,
            step_size_target: 0.8,
            max_tree_depth: 10,
            explore_iterations: 500,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 1 {
            return Err(Error::Config("n_chains must be >= 1".into()));
        }
        if self.n_draws < 1 {
            return Err(Error::Config("n_draws must be >= 1".into()));
        }
        if self.thin < 1 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::Config("target_acceptance must lie in (0, 1)".into()));
        }
        if !(self.step_size_target > 0.0 && self.step_size_target < 1.0) {
            return Err(Error::Config("step_size_target must lie in (0, 1)".into()));
        }
        if self.max_tree_depth < 1 {
            return Err(Error::Config("max_tree_depth must be >= 1".into()));
        }
        if !(self.initial_step_scale > 0.0 && self.initial_step_scale.is_finite()) {
            return Err(Error::Config("initial_step_scale must be > 0".into()));
        }
        Ok(())
    }

    /// First slow-phase iteration and the (exclusive) ends of the
    /// covariance adaptation windows.
    pub fn adaptation_windows(&self) -> (usize, Vec<usize>) {
        let warmup = self.n_warmup;
        if warmup < 20 {
            return (warmup, Vec::new());
        }
        let (mut init, mut term, mut base) = (
            self.adapt_init_buffer,
            self.adapt_term_buffer,
            self.adapt_base_window.max(1),
        );
        if init + term + base > warmup {
            init = warmup * 15 / 100;
            term = warmup / 10;
            base = warmup - init - term;
        }
        let slow_end = warmup - term;
        let mut ends = Vec::new();
        let mut start = init;
        let mut size = base;
        while start < slow_end {
            let mut end = start + size;
            if end + 2 * size > slow_end {
                end = slow_end;
            }
            ends.push(end);
            start = end;
            size *= 2;
        }
        (init, ends)
    }
}

/// Raw output of one chain, in unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: Vec<Vec<f64>>,
    /// Log density at each retained draw.
    pub log_density: Vec<f64>,
    /// Post-warmup acceptance rate per block; NUTS reports one mean
    /// acceptance statistic.
    pub acceptance: Vec<f64>,
    /// Final proposal scale per block, or the NUTS step size.
    pub step_scales: Vec<f64>,
    /// Divergent NUTS transitions after warmup.
    pub divergent: u64,
}

/// Running mean and scatter matrix (Welford).
struct Moments {
    n: usize,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            scatter: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.n += 1;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / self.n as f64;
        }
        for i in 0..d {
            let after_i = x[i] - self.mean[i];
            for j in 0..d {
                self.scatter[i * d + j] += delta[j] * after_i;
            }
        }
    }

    /// Sample covariance shrunk towards a scaled identity.
    fn regularized(&self) -> Option<Vec<f64>> {
        let d = self.mean.len();
        if self.n < 3 {
            return None;
        }
        let n = self.n as f64;
        let mut cov: Vec<f64> = self.scatter.iter().map(|s| s / (n - 1.0)).collect();
        let mean_diag = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
        if !(mean_diag > 0.0 && mean_diag.is_finite()) {
            return None;
        }
        let keep = n / (n + 5.0);
        let shrink = 1e-3 * mean_diag * 5.0 / (n + 5.0);
        for (i, c) in cov.iter_mut().enumerate() {
            *c *= keep;
            if i % (d + 1) == 0 {
                *c += shrink;
            }
        }
        Some(cov)
    }
}

/// Lower Cholesky factor of a row-major symmetric matrix.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

struct BlockState {
    range: Range<usize>,
    log_scale: f64,
    chol: Vec<f64>,
    rm_iter: usize,
    moments: Moments,
}

impl BlockState {
    fn new(range: Range<usize>, initial_scale: f64) -> Self {
        let d = range.len();
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            chol[i * d + i] = 1.0;
        }
        Self {
            range,
            log_scale: initial_scale.ln(),
            chol,
            rm_iter: 0,
            moments: Moments::new(d),
        }
    }

    fn propose_into<R: Rng>(&self, x: &[f64], rng: &mut R, z: &mut Vec<f64>, out: &mut Vec<f64>) {
        let d = self.range.len();
        z.clear();
        z.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let scale = self.log_scale.exp();
        out.clear();
        for i in 0..d {
            let step: f64 = (0..=i).map(|k| self.chol[i * d + k] * z[k]).sum();
            out.push(x[self.range.start + i] + scale * step);
        }
    }

    fn adapt_scale(&mut self, accept_prob: f64, target: f64) {
        self.rm_iter += 1;
        let gain = (self.rm_iter as f64).powf(-0.6);
        self.log_scale += gain * (accept_prob - target);
        self.log_scale = self.log_scale.clamp(-30.0, 10.0);
    }

    fn end_window(&mut self) {
        let d = self.range.len();
        if let Some(chol) = self.moments.regularized().and_then(|c| cholesky(&c, d)) {
            self.chol = chol;
            self.log_scale = (2.38 / (d as f64).sqrt()).ln();
            self.rm_iter = 0;
        }
        self.moments = Moments::new(d);
    }
}

const MAX_INIT_ATTEMPTS: usize = 100;

/// Random number stream for chain `chain`: the base seed with the stream
/// index set to the chain number.
pub fn chain_rng(base_seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs one chain to completion from a random initial point.
pub fn run_chain<T: BlockTarget>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    metropolis_chain(target, config, &mut chain_rng(config.base_seed, chain), None)
}

fn metropolis_chain<T: BlockTarget>(
    target: &T,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    start: Option<Vec<f64>>,
) -> Result<ChainOutput> {
    let (mut x, mut cache, mut lp) = match start {
        Some(x) => {
            let (cache, lp) = target.initialize(&x);
            if !lp.is_finite() {
                return Err(Error::NonFiniteDensity { attempts: 1 });
            }
            (x, cache, lp)
        }
        None => {
            let mut found = None;
            for _ in 0..MAX_INIT_ATTEMPTS {
                let x = target.initial_point(rng);
                let (cache, lp) = target.initialize(&x);
                if lp.is_finite() {
                    found = Some((x, cache, lp));
                    break;
                }
            }
            found.ok_or(Error::NonFiniteDensity {
                attempts: MAX_INIT_ATTEMPTS,
            })?
        }
    };

    let mut blocks: Vec<BlockState> = target
        .blocks()
        .into_iter()
        .map(|r| BlockState::new(r, config.initial_step_scale))
        .collect();
    let (slow_start, window_ends) = config.adaptation_windows();
    let slow_end = window_ends.last().copied().unwrap_or(0);

    let n_blocks = blocks.len();
    let mut accepted = vec![0u64; n_blocks];
    let mut proposed = vec![0u64; n_blocks];
    let total_iters = config.n_warmup + config.n_draws * config.thin;
    let mut draws = Vec::with_capacity(config.n_draws);
    let mut log_density = Vec::with_capacity(config.n_draws);
    let mut z = Vec::new();
    let mut proposal = Vec::new();

    for iter in 0..total_iters {
        let warmup = iter < config.n_warmup;
        for (b, state) in blocks.iter_mut().enumerate() {
            state.propose_into(&x, rng, &mut z, &mut proposal);
            let lp_new = target.propose(&mut cache, &x, b, &proposal);
            let log_ratio = lp_new - lp;
            let accept_prob = if log_ratio.is_nan() {
                0.0
            } else {
                log_ratio.min(0.0).exp()
            };
            let u: f64 = rng.random();
            let accept = u < accept_prob;
            if accept {
                target.accept(&mut cache, b);
                x[state.range.clone()].copy_from_slice(&proposal);
                lp = lp_new;
            }
            if warmup {
                state.adapt_scale(accept_prob, config.target_acceptance);
            } else {
                proposed[b] += 1;
                accepted[b] += accept as u64;
            }
        }
        if warmup && iter >= slow_start && iter < slow_end {
            for state in blocks.iter_mut() {
                state.moments.push(&x[state.range.clone()]);
            }
            if window_ends.contains(&(iter + 1)) {
                blocks.iter_mut().for_each(BlockState::end_window);
            }
        }
        if !warmup && (iter - config.n_warmup + 1).is_multiple_of(config.thin) {
            draws.push(x.clone());
            log_density.push(lp);
        }
    }

    Ok(ChainOutput {
        draws,
        log_density,
        acceptance: accepted
            .iter()
            .zip(&proposed)
            .map(|(&a, &p)| if p == 0 { 0.0 } else { a as f64 / p as f64 })
            .collect(),
        step_scales: blocks.iter().map(|b| b.log_scale.exp()).collect(),
        divergent: 0,
    })
}

/// Runs `config.n_chains` chains in parallel threads, with the
/// exploration stage described on [`SamplerConfig::explore_iterations`].
pub fn run_chains<T: BlockTarget>(target: &T, config: &SamplerConfig) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    let covered: usize = target.blocks().iter().map(|r| r.len()).sum();
    if covered != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            found: covered,
        });
    }
    run_staged(config, |cfg, rng, start| metropolis_chain(target, cfg, rng, start))
}

/// Chains whose mean log density trails the best chain by more than this
/// many within-chain standard deviations are relocated.
const RELOCATE_SDS: f64 = 3.0;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Starting points after the exploration stage: each chain keeps its own
/// final state unless its log density is clearly below the best chain's.
fn relocate(explored: &[ChainOutput]) -> Vec<Vec<f64>> {
    let stats: Vec<(f64, f64)> = explored.iter().map(|o| mean_sd(&o.log_density)).collect();
    let best = (0..stats.len())
        .max_by(|&a, &b| stats[a].0.total_cmp(&stats[b].0))
        .unwrap_or(0);
    explored
        .iter()
        .enumerate()
        .map(|(k, out)| {
            let gap = stats[best].0 - stats[k].0;
            if gap > RELOCATE_SDS * stats[k].1.max(stats[best].1) {
                log::info!("chain {k}: relocated to chain {best} (log density {gap:.1} lower)");
                explored[best].draws.last().cloned()
            } else {
                out.draws.last().cloned()
            }
            .expect("exploration keeps draws")
        })
        .collect()
}

pub(crate) fn run_staged<F>(config: &SamplerConfig, run: F) -> Result<Vec<ChainOutput>>
where
    F: Fn(&SamplerConfig, &mut ChaCha8Rng, Option<Vec<f64>>) -> Result<ChainOutput> + Sync,
{
    let mut rngs: Vec<ChaCha8Rng> = (0..config.n_chains).map(|c| chain_rng(config.base_seed, c)).collect();
    let parallel = |cfg: &SamplerConfig, rngs: &mut [ChaCha8Rng], starts: Vec<Option<Vec<f64>>>| {
        std::thread::scope(|scope| {
            let handles: Vec<_> = rngs
                .iter_mut()
                .zip(starts)
                .map(|(rng, start)| {
                    let run = &run;
                    scope.spawn(move || run(cfg, rng, start))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampler thread panicked"))
                .collect::<Result<Vec<_>>>()
        })
    };
    let mut starts = vec![None; config.n_chains];
    if config.explore_iterations > 0 && config.n_chains > 1 {
        let explore = SamplerConfig {
            n_warmup: config.explore_iterations,
            n_draws: (config.explore_iterations / 4).max(10),
            thin: 1,
            ..config.clone()
        };
        let explored = parallel(&explore, &mut rngs, starts)?;
        starts = relocate(&explored).into_iter().map(Some).collect();
    }
    parallel(config, &mut rngs, starts)
}
