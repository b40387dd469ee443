//! Convergence diagnostics for scalar quantities traced over several chains.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

const MIN_DRAWS: usize = 4;

fn check_chains(chains: &[Vec<f64>]) -> Result<usize> {
    let first = chains.first().ok_or(Error::InsufficientDraws {
        needed: MIN_DRAWS,
        found: 0,
    })?;
    let n = first.len();
    if let Some(bad) = chains.iter().find(|c| c.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: bad.len(),
        });
    }
    if n < MIN_DRAWS {
        return Err(Error::InsufficientDraws {
            needed: MIN_DRAWS,
            found: n,
        });
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateChains("draws contain non-finite values".into()));
    }
    Ok(n)
}

/// Splits every chain into its first and second half, dropping the middle
/// draw of odd-length chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Average ranks (1-based) of the pooled values, ties sharing their mean rank.
fn pooled_ranks(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut flat: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < flat.len() {
        let mut end = start + 1;
        while end < flat.len() && flat[end].0 == flat[start].0 {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &(_, c, i) in &flat[start..end] {
            ranks[c][i] = avg;
        }
        start = end;
    }
    ranks
}

/// Replaces values by normal scores of their pooled fractional ranks.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let normal = Normal::standard();
    pooled_ranks(chains)
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|rank| normal.inverse_cdf((rank - 0.375) / (total as f64 + 0.25)))
                .collect()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Potential scale reduction of already-split chains; `None` when every
/// value is identical.
fn psrf(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let between = if chains.len() > 1 { n * sample_var(&means) } else { 0.0 };
    if within <= 0.0 {
        return if between > 0.0 { Some(f64::INFINITY) } else { None };
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Some((var_plus / within).sqrt())
}

/// Classic split-R-hat on the raw values.
pub fn split_r_hat_basic(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    psrf(&split(chains)).ok_or_else(|| Error::DegenerateChains("all draws are identical".into()))
}

/// Rank-normalised split-R-hat: the larger of the bulk value and the value
/// for draws folded about the pooled median.
pub fn split_r_hat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let bulk = psrf(&rank_normalize(&halves));
    let mut pooled: Vec<f64> = halves.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let median = if pooled.len() % 2 == 1 {
        pooled[pooled.len() / 2]
    } else {
        0.5 * (pooled[pooled.len() / 2 - 1] + pooled[pooled.len() / 2])
    };
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|v| (v - median).abs()).collect())
        .collect();
    let tail = psrf(&rank_normalize(&folded));
    match (bulk, tail) {
        (Some(b), Some(t)) => Ok(b.max(t)),
        (Some(b), None) => Ok(b),
        (None, Some(t)) => Ok(t),
        (None, None) => Err(Error::DegenerateChains("all draws are identical".into())),
    }
}

/// Biased autocovariance of `v` at `lag`.
fn autocov(v: &[f64], m: f64, lag: usize) -> f64 {
    let n = v.len();
    (0..n - lag).map(|i| (v[i] - m) * (v[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size of split chains using Geyer's initial positive
/// sequence with the monotone correction, capped at `S log10 S` for `S`
/// total draws.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let halves = split(chains);
    let m = halves.len();
    let n = halves[0].len();
    let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = halves.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, 0)).collect();
    let mean_var = mean(&acov0) * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return Err(Error::DegenerateChains("all draws are identical".into()));
    }
    let rho_at = |lag: usize| {
        let ac = halves
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (mean_var - ac) / var_plus
    };

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho_at(1);
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 4 < n && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(t + 1);
        rho_odd = rho_at(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut s = 1;
    while s + 3 <= max_t {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0;
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    let ess = total / tau;
    Ok(ess.min(total * total.log10()))
}

#[derive(Debug, Clone, Serialize)]
pub struct RankHistogram {
    /// `counts[chain][bin]`.
    pub counts: Vec<Vec<usize>>,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Histograms of each chain's pooled ranks with a chi-square test of
/// uniformity over all chain-bin cells.
pub fn rank_histogram(chains: &[Vec<f64>], bins: usize) -> Result<RankHistogram> {
    let n = check_chains(chains)?;
    if bins < 2 {
        return Err(Error::domain("rank histogram needs at least 2 bins"));
    }
    let total = (n * chains.len()) as f64;
    let counts: Vec<Vec<usize>> = pooled_ranks(chains)
        .into_iter()
        .map(|ranks| {
            let mut h = vec![0; bins];
            for r in ranks {
                let b = (((r - 1.0) / total) * bins as f64).floor() as usize;
                h[b.min(bins - 1)] += 1;
            }
            h
        })
        .collect();
    let expected = n as f64 / bins as f64;
    let chi_square: f64 = counts
        .iter()
        .flatten()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = chains.len() * (bins - 1);
    let p_value = 1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(chi_square);
    Ok(RankHistogram {
        counts,
        chi_square,
        dof,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_constant_chains_do_not_mix() {
        let chains = vec![vec![0.0; 100], vec![10.0; 100]];
        assert!(split_r_hat(&chains).unwrap() > 2.0);
        assert!(split_r_hat_basic(&chains).unwrap() > 2.0);
    }

    #[test]
    fn identical_draws_are_degenerate() {
        let chains = vec![vec![1.0; 10], vec![1.0; 10]];
        assert!(matches!(split_r_hat(&chains), Err(Error::DegenerateChains(_))));
        assert!(matches!(
            effective_sample_size(&chains),
            Err(Error::DegenerateChains(_))
        ));
    }

    #[test]
    fn too_few_draws() {
        assert!(matches!(
            split_r_hat(&[vec![1.0, 2.0, 3.0]]),
            Err(Error::InsufficientDraws { needed: 4, found: 3 })
        ));
    }

    #[test]
    fn ties_share_ranks() {
        let r = pooled_ranks(&[vec![1.0, 2.0], vec![2.0, 3.0]]);
        assert_eq!(r, vec![vec![1.0, 2.5], vec![2.5, 4.0]]);
    }

    #[test]
    fn antithetic_chain_is_capped() {
        let chain: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let ess = effective_sample_size(&[chain.clone(), chain]).unwrap();
        let total = 2000f64;
        assert!(ess <= total * total.log10() + 1e-9);
    }
}
