//! Posterior predictive draws of provider loads and their summaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{dirichlet_sample_into, multinomial_sample, round_half_even};
use crate::error::{check_dim, Error, Result};
use crate::evaluation::{calibration_deviation, reliability_curve};
use crate::inference::{sampler::chain_rng, PosteriorSamples};
use crate::io::Dataset;
use crate::model::{Likelihood, ModelParams};
use crate::simplex::AvailabilityVector;

/// Predictive load draws for one availability scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    pub scenario: usize,
    pub u: AvailabilityVector,
    pub total: f64,
    /// `draws[q][i]`: predicted load of provider `i` in draw `q`.
    pub draws: Vec<Vec<f64>>,
    /// Posterior draws skipped because a preference row had no mass on
    /// the available providers.
    pub rejected: usize,
}

/// Predictive samples for a batch of scenarios.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictiveRun {
    pub scenarios: Vec<PredictiveSamples>,
    /// Shrinkage factor applied to every scenario, if any.
    pub shrinkage: Option<f64>,
}

impl PredictiveSamples {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn nominal(&self) -> Result<Vec<f64>> {
        nominal_prediction(&self.draws)
    }

    pub fn sd(&self) -> Result<Vec<f64>> {
        predictive_sd(&self.draws)
    }

    /// Draws of provider `i` across the sample.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[i]).collect()
    }
}

fn sample_loads<R: Rng>(
    params: &ModelParams,
    u: &AvailabilityVector,
    total: f64,
    likelihood: Likelihood,
    support: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let p = params.proportions(u)?;
    let mut loads = vec![0.0; u.len()];
    match likelihood {
        Likelihood::Dirichlet => {
            if support.len() == 1 {
                loads[support[0]] = total;
                return Ok(loads);
            }
            let c = params.concentration();
            let alpha: Vec<f64> = support.iter().map(|&i| (c * p[i]).max(f64::MIN_POSITIVE)).collect();
            let mut x = vec![0.0; support.len()];
            dirichlet_sample_into(&alpha, rng, &mut x);
            for (&i, xi) in support.iter().zip(&x) {
                loads[i] = total * xi;
            }
        }
        Likelihood::Multinomial => {
            let counts = multinomial_sample(round_half_even(total) as u64, &p, rng);
            for (l, k) in loads.iter_mut().zip(counts) {
                *l = k as f64;
            }
        }
    }
    Ok(loads)
}

/// Draws `q` predictive load vectors for availability `u` and total `total`,
/// cycling through the pooled posterior draws in chain order. The random
/// stream is keyed by `seed` and `scenario`, so scenarios can be drawn in
/// any order with identical results.
pub fn draw_predictive(
    posterior: &PosteriorSamples,
    scenario: usize,
    u: &AvailabilityVector,
    total: f64,
    q: usize,
    seed: u64,
) -> Result<PredictiveSamples> {
    check_dim(posterior.n_providers, u.len())?;
    if q < 1 {
        return Err(Error::domain("number of predictive draws must be >= 1"));
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::domain("total load must be > 0"));
    }
    let pooled: Vec<&ModelParams> = posterior.pooled().collect();
    if pooled.is_empty() {
        return Err(Error::InsufficientDraws { needed: 1, found: 0 });
    }
    let support = u.support();
    if support.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let likelihood = posterior.model.likelihood;
    let mut rng = chain_rng(seed, scenario);
    let mut draws = Vec::with_capacity(q);
    let mut rejected = 0;
    let mut cursor = 0;
    let mut consecutive = 0;
    while draws.len() < q {
        let params = pooled[cursor % pooled.len()];
        cursor += 1;
        match sample_loads(params, u, total, likelihood, &support, &mut rng) {
            Ok(loads) => {
                draws.push(loads);
                consecutive = 0;
            }
            Err(err @ Error::SingularPreference { .. }) => {
                rejected += 1;
                consecutive += 1;
                if consecutive >= pooled.len() {
                    return Err(err);
                }
            }
            Err(err) => return Err(err),
        }
    }
    if rejected > 0 {
        log::warn!("scenario {scenario}: {rejected} posterior draws rejected as singular");
    }
    Ok(PredictiveSamples {
        scenario,
        u: u.clone(),
        total,
        draws,
        rejected,
    })
}

/// Predictive samples for every record of `dataset`, using the record index
/// as the scenario id. `q` defaults to the number of pooled posterior draws.
pub fn predict_dataset(
    posterior: &PosteriorSamples,
    dataset: &Dataset,
    q: Option<usize>,
    seed: u64,
) -> Result<PredictiveRun> {
    let q = q.unwrap_or_else(|| posterior.n_draws());
    let records = dataset.records();
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(records.len().max(1));
    let chunk = records.len().div_ceil(threads).max(1);
    let scenarios = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .enumerate()
            .map(|(k, recs)| {
                scope.spawn(move || {
                    recs.iter()
                        .enumerate()
                        .map(|(j, r)| draw_predictive(posterior, k * chunk + j, &r.u, r.total, q, seed))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(PredictiveRun {
        scenarios: scenarios.into_iter().flatten().collect(),
        shrinkage: None,
    })
}

/// Per-provider mean of the draws.
pub fn nominal_prediction(draws: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = draws.first().ok_or(Error::InsufficientDraws { needed: 1, found: 0 })?;
    let mut mean = vec![0.0; first.len()];
    for d in draws {
        check_dim(mean.len(), d.len())?;
        mean.iter_mut().zip(d).for_each(|(m, v)| *m += v);
    }
    let q = draws.len() as f64;
    mean.iter_mut().for_each(|m| *m /= q);
    Ok(mean)
}

/// Elementwise `nominal - truth`.
pub fn nominal_error(nominal: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    check_dim(nominal.len(), truth.len())?;
    Ok(nominal.iter().zip(truth).map(|(a, b)| a - b).collect())
}

/// Per-provider sample standard deviation (denominator `Q - 1`).
pub fn predictive_sd(draws: &[Vec<f64>]) -> Result<Vec<f64>> {
    if draws.len() < 2 {
        return Err(Error::InsufficientDraws {
            needed: 2,
            found: draws.len(),
        });
    }
    let mean = nominal_prediction(draws)?;
    let mut ss = vec![0.0; mean.len()];
    for d in draws {
        for ((s, v), m) in ss.iter_mut().zip(d).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = draws.len() as f64 - 1.0;
    Ok(ss.into_iter().map(|s| (s / denom).sqrt()).collect())
}

/// Contracts every draw towards the per-provider mean by a factor `s`.
/// Negative loads produced by the map are raised to zero and the row is
/// rescaled to the scenario total.
pub fn shrink_samples(pred: &PredictiveSamples, s: f64) -> Result<PredictiveSamples> {
    if !(s >= 1.0 && s.is_finite()) {
        return Err(Error::domain(format!("shrinkage factor must be >= 1, got {s}")));
    }
    let mean = nominal_prediction(&pred.draws)?;
    let mut clamped = 0;
    let draws = pred
        .draws
        .iter()
        .map(|d| {
            let mut out: Vec<f64> = d.iter().zip(&mean).map(|(x, m)| (x - m) / s + m).collect();
            if out.iter().any(|v| *v < 0.0) {
                clamped += 1;
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                let sum: f64 = out.iter().sum();
                if sum > 0.0 {
                    out.iter_mut().for_each(|v| *v *= pred.total / sum);
                }
            }
            out
        })
        .collect();
    if clamped > 0 {
        log::debug!("scenario {}: clamped {clamped} shrunk draws", pred.scenario);
    }
    Ok(PredictiveSamples { draws, ..pred.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageConfig {
    /// Candidate factors, each >= 1.
    pub grid: Vec<f64>,
    /// Fraction of the training records held out for selection.
    pub validation_fraction: f64,
    /// Nominal coverages (percent) at which calibration is scored.
    pub p_grid: Vec<f64>,
}

impl Default for ShrinkageConfig {
    fn default() -> Self {
        Self {
            grid: vec![1.0, 1.25, 1.5, 2.0, 2.5, 3.0],
            validation_fraction: 0.2,
            p_grid: crate::evaluation::default_p_grid(),
        }
    }
}

impl ShrinkageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|s| !(*s >= 1.0 && s.is_finite())) {
            return Err(Error::Config("shrink grid must be non-empty with every s >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageSelection {
    pub s: f64,
    /// `(s, calibration deviation)` for every candidate.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the grid factor with the smallest mean calibration deviation on
/// the given predictive sets; ties go to the smallest factor.
pub fn select_shrinkage_for(
    sets: &[PredictiveSamples],
    truths: &[Vec<f64>],
    grid: &[f64],
    p_grid: &[f64],
) -> Result<ShrinkageSelection> {
    if grid.is_empty() {
        return Err(Error::Config("shrink grid is empty".into()));
    }
    if sets.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &s in &sorted {
        let shrunk = sets.iter().map(|p| shrink_samples(p, s)).collect::<Result<Vec<_>>>()?;
        let dev = calibration_deviation(&reliability_curve(&shrunk, truths, p_grid)?);
        scores.push((s, dev));
        if best.is_none_or(|(_, d)| dev < d) {
            best = Some((s, dev));
        }
    }
    Ok(ShrinkageSelection {
        s: best.expect("grid is non-empty").0,
        scores,
    })
}

/// Draws predictive samples for `validation` and selects a shrinkage factor.
pub fn select_shrinkage(
    posterior: &PosteriorSamples,
    validation: &Dataset,
    config: &ShrinkageConfig,
    seed: u64,
) -> Result<ShrinkageSelection> {
    config.validate()?;
    if validation.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let run = predict_dataset(posterior, validation, None, seed)?;
    let truths: Vec<Vec<f64>> = validation.records().iter().map(|r| r.x.clone()).collect();
    select_shrinkage_for(&run.scenarios, &truths, &config.grid, &config.p_grid)
}
