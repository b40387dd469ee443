//! Joint densities of the two cluster models.
//!
//! Both models explain each record's load proportions `x / M` as a draw
//! around the proportion vector implied by cluster preferences `L`, cluster
//! weights `w` and the record's availability `u`. The naive model fixes the
//! number of clusters and puts a flat Dirichlet prior on `w`; the complete
//! model builds `w` by truncated stick-breaking with fractions
//! `beta_j ~ Beta(1, alpha)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dist::{
    beta_log_density, dirichlet_log_density_ln, gamma_log_density, multinomial_log_pmf_unchecked, round_half_even,
    DEFAULT_CLAMP,
};
use crate::error::{check_dim, Error, Result};
use crate::io::{Dataset, Record, TOTAL_TOLERANCE};
use crate::simplex::{
    proportion_into, stick_breaking, AvailabilityVector, PreferenceMatrix, SimplexVector, StickWeights, WeightVector,
};
use crate::transform::{
    positive_forward, positive_inverse, simplex_forward, simplex_inverse_into, unit_forward, unit_inverse,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Dirichlet,
    Multinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub likelihood: Likelihood,
    /// Preset cluster count (naive) or truncation level (complete).
    pub clusters: usize,
    /// Gamma shape on the concentration `c`.
    pub conc_shape: f64,
    /// Gamma rate on the concentration `c`.
    pub conc_rate: f64,
    /// Gamma shape on the stick-breaking scale `alpha`.
    pub alpha_shape: f64,
    /// Gamma rate on the stick-breaking scale `alpha`.
    pub alpha_rate: f64,
    /// Zero load proportions are raised to this before density evaluation.
    pub clamp: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Complete,
            likelihood: Likelihood::Dirichlet,
            clusters: 20,
            conc_shape: 2.0,
            conc_rate: 0.02,
            alpha_shape: 2.0,
            alpha_rate: 1.0,
            clamp: DEFAULT_CLAMP,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 1 {
            return Err(Error::Config("clusters must be >= 1".into()));
        }
        let hyper = [self.conc_shape, self.conc_rate, self.alpha_shape, self.alpha_rate];
        if hyper.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::Config("Gamma hyperparameters must be > 0".into()));
        }
        if !(self.clamp > 0.0 && self.clamp < 1.0) {
            return Err(Error::Config("clamp must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveParams {
    pub w: WeightVector,
    pub l: PreferenceMatrix,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompleteParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub l: PreferenceMatrix,
    pub c: f64,
}

impl CompleteParams {
    pub fn stick_weights(&self) -> StickWeights {
        stick_breaking(&self.beta).expect("validated stick fractions")
    }
}

/// One point in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Naive(NaiveParams),
    Complete(CompleteParams),
}

impl ModelParams {
    pub fn naive(w: Vec<f64>, l: Vec<Vec<f64>>, c: f64) -> Result<Self> {
        let params = ModelParams::Naive(NaiveParams {
            w: SimplexVector::new(w)?,
            l: PreferenceMatrix::from_rows(l)?,
            c,
        });
        params.validate()?;
        Ok(params)
    }

    pub fn complete(alpha: f64, beta: Vec<f64>, l: Vec<Vec<f64>>, c: f64) -> Result<Self> {
        let params = ModelParams::Complete(CompleteParams {
            alpha,
            beta,
            l: PreferenceMatrix::from_rows(l)?,
            c,
        });
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.concentration() > 0.0 && self.concentration().is_finite()) {
            return Err(Error::domain("concentration must be > 0"));
        }
        match self {
            ModelParams::Naive(p) => check_dim(p.l.n_clusters(), p.w.len()),
            ModelParams::Complete(p) => {
                check_dim(p.l.n_clusters(), p.beta.len())?;
                if !(p.alpha > 0.0 && p.alpha.is_finite()) {
                    return Err(Error::domain("alpha must be > 0"));
                }
                stick_breaking(&p.beta).map(|_| ())
            }
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            ModelParams::Naive(_) => Variant::Naive,
            ModelParams::Complete(_) => Variant::Complete,
        }
    }

    pub fn concentration(&self) -> f64 {
        match self {
            ModelParams::Naive(p) => p.c,
            ModelParams::Complete(p) => p.c,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            ModelParams::Naive(_) => None,
            ModelParams::Complete(p) => Some(p.alpha),
        }
    }

    pub fn preferences(&self) -> &PreferenceMatrix {
        match self {
            ModelParams::Naive(p) => &p.l,
            ModelParams::Complete(p) => &p.l,
        }
    }

    /// Raw stick-breaking weights and remainder (complete model only).
    pub fn stick_weights(&self) -> Option<StickWeights> {
        match self {
            ModelParams::Naive(_) => None,
            ModelParams::Complete(p) => Some(p.stick_weights()),
        }
    }

    /// Cluster weights used to mix preference scores. For the complete model
    /// these are the retained stick weights renormalised onto the simplex.
    pub fn mixture_weights(&self) -> WeightVector {
        match self {
            ModelParams::Naive(p) => p.w.clone(),
            ModelParams::Complete(p) => p.stick_weights().normalized(),
        }
    }

    /// Expected load proportions under availability `u`.
    pub fn proportions(&self, u: &[f64]) -> Result<Vec<f64>> {
        let l = self.preferences();
        check_dim(l.n_providers(), u.len())?;
        let mut out = vec![0.0; u.len()];
        proportion_into(l, &self.mixture_weights(), u, &mut out)?;
        Ok(out)
    }
}

/// A record reduced to what the likelihood needs.
#[derive(Debug, Clone)]
pub(crate) struct PreparedRecord {
    pub u: Vec<f64>,
    /// Providers with non-zero availability.
    pub support: Vec<usize>,
    /// `ln` of the clamped, renormalised proportions on the support.
    pub log_x: Vec<f64>,
    pub counts: Vec<u64>,
    pub count_total: u64,
}

impl PreparedRecord {
    pub fn new(u: &[f64], x: &[f64], total: f64, clamp: f64) -> Result<Self> {
        check_dim(u.len(), x.len())?;
        let sum: f64 = x.iter().sum();
        if (sum - total).abs() > TOTAL_TOLERANCE {
            return Err(Error::Data(format!("loads sum to {sum}, declared total {total}")));
        }
        if !(total > 0.0) {
            return Err(Error::Data("total load must be > 0".into()));
        }
        let support: Vec<usize> = (0..u.len()).filter(|&i| u[i] > 0.0).collect();
        if support.is_empty() {
            return Err(Error::Data("no provider is available".into()));
        }
        let outside: f64 = (0..u.len()).filter(|&i| u[i] <= 0.0).map(|i| x[i]).sum();
        if outside > 1e-9 * total {
            return Err(Error::Data(format!("load {outside} observed on unavailable providers")));
        }
        let on_support: Vec<f64> = support.iter().map(|&i| x[i] / total).collect();
        let raised: Vec<f64> = on_support.iter().map(|v| v.max(clamp)).collect();
        let norm: f64 = raised.iter().sum();
        let log_x = raised.iter().map(|v| (v / norm).ln()).collect();
        let counts: Vec<u64> = x.iter().map(|v| round_half_even(v.max(0.0)) as u64).collect();
        let count_total = counts.iter().sum();
        Ok(Self {
            u: u.to_vec(),
            support,
            log_x,
            counts,
            count_total,
        })
    }

    pub fn log_likelihood(&self, p: &[f64], c: f64, likelihood: Likelihood, alpha_buf: &mut Vec<f64>) -> f64 {
        match likelihood {
            Likelihood::Dirichlet => {
                if self.support.len() == 1 {
                    // degenerate: all load sits on the single available provider
                    return 0.0;
                }
                alpha_buf.clear();
                for &i in &self.support {
                    let a = c * p[i];
                    if !(a > 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    alpha_buf.push(a);
                }
                dirichlet_log_density_ln(&self.log_x, alpha_buf)
            }
            Likelihood::Multinomial => multinomial_log_pmf_unchecked(&self.counts, self.count_total, p),
        }
    }
}

/// Log likelihood of one record `(u, x)` with total load `total`.
pub fn log_likelihood_record(
    params: &ModelParams,
    u: &AvailabilityVector,
    x: &[f64],
    total: f64,
    config: &ModelConfig,
) -> Result<f64> {
    let rec = PreparedRecord::new(u, x, total, config.clamp)?;
    let p = params.proportions(u)?;
    Ok(rec.log_likelihood(&p, params.concentration(), config.likelihood, &mut Vec::new()))
}

fn preference_prior(l: &PreferenceMatrix) -> f64 {
    // flat Dirichlet(1_N) density is (N-1)! per row
    l.n_clusters() as f64 * ln_gamma(l.n_providers() as f64)
}

pub fn log_prior(params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    params.validate()?;
    let lp_c = gamma_log_density(params.concentration(), config.conc_shape, config.conc_rate);
    let lp = match params {
        ModelParams::Naive(p) => {
            if p.w.len() != config.clusters && config.clusters != 0 {
                return Err(Error::DimensionMismatch {
                    expected: config.clusters,
                    found: p.w.len(),
                });
            }
            ln_gamma(p.w.len() as f64) + preference_prior(&p.l) + lp_c
        }
        ModelParams::Complete(p) => {
            let lp_alpha = gamma_log_density(p.alpha, config.alpha_shape, config.alpha_rate);
            let lp_beta: f64 = p.beta.iter().map(|&b| beta_log_density(b, 1.0, p.alpha)).sum();
            lp_alpha + lp_beta + preference_prior(&p.l) + lp_c
        }
    };
    Ok(lp)
}

/// Unnormalised log posterior in constrained space.
pub fn log_posterior(params: &ModelParams, dataset: &Dataset, config: &ModelConfig) -> Result<f64> {
    let mut lp = log_prior(params, config)?;
    for rec in dataset.records() {
        lp += log_likelihood_record(params, &rec.u, &rec.x, rec.total, config)?;
    }
    Ok(lp)
}

/// Which part of the parameter vector a sampler block moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Concentration,
    Alpha,
    Weights,
    Preference(usize),
}

impl BlockKind {
    pub fn name(&self) -> String {
        match self {
            BlockKind::Concentration => "c".into(),
            BlockKind::Alpha => "alpha".into(),
            BlockKind::Weights => "w".into(),
            BlockKind::Preference(j) => format!("L[{j}]"),
        }
    }
}

/// Layout of the unconstrained parameter vector:
/// `[ln c, (ln alpha), weight block, L rows...]`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub variant: Variant,
    pub n_clusters: usize,
    pub n_providers: usize,
    blocks: Vec<(BlockKind, Range<usize>)>,
}

impl ParamLayout {
    pub fn new(variant: Variant, n_clusters: usize, n_providers: usize) -> Self {
        let mut blocks = vec![(BlockKind::Concentration, 0..1)];
        let mut at = 1;
        let mut push = |kind, len: usize, blocks: &mut Vec<_>| {
            if len > 0 {
                blocks.push((kind, at..at + len));
                at += len;
            }
        };
        match variant {
            Variant::Naive => push(BlockKind::Weights, n_clusters - 1, &mut blocks),
            Variant::Complete => {
                push(BlockKind::Alpha, 1, &mut blocks);
                push(BlockKind::Weights, n_clusters, &mut blocks);
            }
        }
        for j in 0..n_clusters {
            push(BlockKind::Preference(j), n_providers - 1, &mut blocks);
        }
        Self {
            variant,
            n_clusters,
            n_providers,
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map(|b| b.1.end).unwrap_or(0)
    }

    pub fn blocks(&self) -> &[(BlockKind, Range<usize>)] {
        &self.blocks
    }

    fn range(&self, kind: BlockKind) -> Option<Range<usize>> {
        self.blocks.iter().find(|b| b.0 == kind).map(|b| b.1.clone())
    }

    /// Maps constrained parameters to the unconstrained vector.
    pub fn pack(&self, params: &ModelParams) -> Result<Vec<f64>> {
        params.validate()?;
        if params.variant() != self.variant {
            return Err(Error::domain("parameter variant does not match layout"));
        }
        check_dim(self.n_clusters, params.preferences().n_clusters())?;
        check_dim(self.n_providers, params.preferences().n_providers())?;
        let mut y = Vec::with_capacity(self.dim());
        y.push(positive_forward(params.concentration())?);
        match params {
            ModelParams::Naive(p) => {
                if self.n_clusters > 1 {
                    y.extend(simplex_forward(&p.w)?);
                }
            }
            ModelParams::Complete(p) => {
                y.push(positive_forward(p.alpha)?);
                for &b in &p.beta {
                    y.push(unit_forward(b)?);
                }
            }
        }
        for row in params.preferences().rows() {
            y.extend(simplex_forward(row)?);
        }
        Ok(y)
    }

    /// Maps an unconstrained vector to parameters and the total log-Jacobian.
    pub fn unpack(&self, y: &[f64]) -> Result<(ModelParams, f64)> {
        check_dim(self.dim(), y.len())?;
        let (c, mut lj) = positive_inverse(y[0]);
        let n = self.n_providers;
        let mut l = vec![0.0; self.n_clusters * n];
        for j in 0..self.n_clusters {
            let r = self.range(BlockKind::Preference(j)).expect("row block");
            lj += simplex_inverse_into(&y[r], &mut l[j * n..(j + 1) * n]);
        }
        let l = PreferenceMatrix::from_flat(n, l)?;
        let params = match self.variant {
            Variant::Naive => {
                let w = match self.range(BlockKind::Weights) {
                    Some(r) => {
                        let mut w = vec![0.0; self.n_clusters];
                        lj += simplex_inverse_into(&y[r], &mut w);
                        w
                    }
                    None => vec![1.0],
                };
                ModelParams::Naive(NaiveParams {
                    w: SimplexVector::new(w)?,
                    l,
                    c,
                })
            }
            Variant::Complete => {
                let (alpha, lja) = positive_inverse(y[self.range(BlockKind::Alpha).expect("alpha").start]);
                lj += lja;
                let r = self.range(BlockKind::Weights).expect("beta block");
                let beta = y[r]
                    .iter()
                    .map(|&v| {
                        let (b, j) = unit_inverse(v);
                        lj += j;
                        b
                    })
                    .collect();
                ModelParams::Complete(CompleteParams { alpha, beta, l, c })
            }
        };
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::domain("concentration overflowed"));
        }
        Ok((params, lj))
    }
}

/// Log posterior at an unconstrained point, including log-Jacobians.
/// Points that leave the support after the inverse map give `-inf`.
pub fn log_posterior_unconstrained(layout: &ParamLayout, y: &[f64], dataset: &Dataset, config: &ModelConfig) -> f64 {
    match layout.unpack(y) {
        Ok((params, lj)) => match log_posterior(&params, dataset, config) {
            Ok(lp) if !lp.is_nan() => lp + lj,
            _ => f64::NEG_INFINITY,
        },
        Err(_) => f64::NEG_INFINITY,
    }
}

pub(crate) fn prepare_records(dataset: &Dataset, clamp: f64) -> Result<Vec<PreparedRecord>> {
    dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r): (usize, &Record)| {
            PreparedRecord::new(&r.u, &r.x, r.total, clamp).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("record {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn av(v: &[f64]) -> AvailabilityVector {
        AvailabilityVector::new(v.to_vec()).unwrap()
    }

    fn naive_cfg(w: usize) -> ModelConfig {
        ModelConfig {
            variant: Variant::Naive,
            clusters: w,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_cluster_flat_likelihood() {
        let p = ModelParams::naive(vec![1.0], vec![vec![0.5, 0.5]], 2.0).unwrap();
        let v = log_likelihood_record(&p, &av(&[1.0, 1.0]), &[50.0, 50.0], 100.0, &naive_cfg(1)).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn likelihood_symmetries() {
        let cfg = naive_cfg(2);
        let p = ModelParams::naive(vec![0.4, 0.6], vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]], 30.0).unwrap();
        let u = [1.0, 0.5, 0.8];
        let x = [20.0, 30.0, 50.0];
        let base = log_likelihood_record(&p, &av(&u), &x, 100.0, &cfg).unwrap();

        let perm = [2, 0, 1];
        let pp = ModelParams::naive(
            vec![0.4, 0.6],
            vec![
                perm.iter().map(|&i| [0.2, 0.3, 0.5][i]).collect(),
                perm.iter().map(|&i| [0.6, 0.3, 0.1][i]).collect(),
            ],
            30.0,
        )
        .unwrap();
        let up: Vec<f64> = perm.iter().map(|&i| u[i]).collect();
        let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let permuted = log_likelihood_record(&pp, &av(&up), &xp, 100.0, &cfg).unwrap();
        assert!((base - permuted).abs() < 1e-10);

        let doubled = log_likelihood_record(
            &p,
            &AvailabilityVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
            &x,
            100.0,
            &cfg,
        )
        .unwrap();
        let half = log_likelihood_record(&p, &av(&[0.5, 0.5, 0.5]), &x, 100.0, &cfg).unwrap();
        assert!((doubled - half).abs() < 1e-10);
    }

    #[test]
    fn likelihood_rejects_bad_totals() {
        let p = ModelParams::naive(vec![1.0], vec![vec![0.5, 0.5]], 2.0).unwrap();
        let err = log_likelihood_record(&p, &av(&[1.0, 1.0]), &[40.0, 50.0], 100.0, &naive_cfg(1)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn unavailable_providers_drop_out() {
        let cfg = naive_cfg(1);
        let p = ModelParams::naive(vec![1.0], vec![vec![0.2, 0.3, 0.5]], 10.0).unwrap();
        let three = log_likelihood_record(&p, &av(&[1.0, 0.0, 1.0]), &[30.0, 0.0, 70.0], 100.0, &cfg).unwrap();
        // equals the two-provider Dirichlet on the available pair
        let q = [0.2 / 0.7, 0.5 / 0.7];
        let expected = dirichlet_log_density_ln(&[0.3f64.ln(), 0.7f64.ln()], &[10.0 * q[0], 10.0 * q[1]]);
        assert!((three - expected).abs() < 1e-10);
        let single = log_likelihood_record(&p, &av(&[0.0, 0.0, 1.0]), &[0.0, 0.0, 100.0], 100.0, &cfg).unwrap();
        assert_eq!(single, 0.0);
        assert!(log_likelihood_record(&p, &av(&[1.0, 0.0, 1.0]), &[30.0, 5.0, 65.0], 100.0, &cfg).is_err());
    }

    #[test]
    fn prior_examples() {
        let cfg = ModelConfig {
            conc_shape: 2.0,
            conc_rate: 1.0,
            ..naive_cfg(2)
        };
        let a = ModelParams::naive(vec![0.3, 0.7], vec![vec![0.1, 0.9], vec![0.5, 0.5]], 1.0).unwrap();
        let b = ModelParams::naive(vec![0.9, 0.1], vec![vec![0.6, 0.4], vec![0.2, 0.8]], 1.0).unwrap();
        let la = log_prior(&a, &cfg).unwrap();
        assert!((la - log_prior(&b, &cfg).unwrap()).abs() < 1e-14);
        // flat parts: ln 1! for w plus 2 * ln 1! for rows, so only Gamma(2,1) at 1 remains
        assert!((la + 1.0).abs() < 1e-12);

        let ccfg = ModelConfig {
            conc_shape: 2.0,
            conc_rate: 1.0,
            ..ModelConfig::default()
        };
        let c1 = ModelParams::complete(1.0, vec![0.2, 0.7], vec![vec![0.5, 0.5], vec![0.1, 0.9]], 1.0).unwrap();
        let c2 = ModelParams::complete(1.0, vec![0.9, 0.1], vec![vec![0.5, 0.5], vec![0.1, 0.9]], 1.0).unwrap();
        assert!((log_prior(&c1, &ccfg).unwrap() - log_prior(&c2, &ccfg).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn layout_round_trip() {
        for variant in [Variant::Naive, Variant::Complete] {
            let layout = ParamLayout::new(variant, 3, 4);
            let y: Vec<f64> = (0..layout.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
            let (params, lj) = layout.unpack(&y).unwrap();
            assert!(lj.is_finite());
            let back = layout.pack(&params).unwrap();
            for (a, b) in y.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10, "{variant:?}");
            }
        }
        let naive1 = ParamLayout::new(Variant::Naive, 1, 3);
        assert_eq!(naive1.dim(), 1 + 2);
    }

    #[test]
    fn complete_mixture_weights_are_normalised() {
        let p = ModelParams::complete(1.0, vec![0.5, 0.5], vec![vec![0.5, 0.5], vec![0.1, 0.9]], 1.0).unwrap();
        let w = p.mixture_weights();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.stick_weights().unwrap().remainder, 0.25);
    }

    #[test]
    fn multinomial_uses_rounded_counts() {
        let cfg = ModelConfig {
            likelihood: Likelihood::Multinomial,
            ..naive_cfg(1)
        };
        let p = ModelParams::naive(vec![1.0], vec![vec![0.5, 0.5]], 2.0).unwrap();
        let v = log_likelihood_record(&p, &av(&[1.0, 1.0]), &[0.6, 1.4], 2.0, &cfg).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }
}
