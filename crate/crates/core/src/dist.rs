//! Densities and samplers used by the load model and its priors.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_dim, Error, Result};
use crate::simplex::SimplexVector;

/// Zero proportions are raised to this before Dirichlet evaluation.
pub const DEFAULT_CLAMP: f64 = 1e-9;

fn check_concentration(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::domain("Dirichlet concentration must be finite and > 0"));
    }
    Ok(())
}

/// Log density of `Dirichlet(alpha)` at an interior point `x`.
pub fn dirichlet_log_density(x: &SimplexVector, alpha: &[f64]) -> Result<f64> {
    check_dim(x.len(), alpha.len())?;
    check_concentration(alpha)?;
    if let Some(i) = x.iter().position(|v| *v <= 0.0) {
        return Err(Error::BoundaryValue(format!(
            "component {i} is zero; Dirichlet support is the open simplex"
        )));
    }
    let log_x: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    Ok(dirichlet_log_density_ln(&log_x, alpha))
}

/// Same as [`dirichlet_log_density`] given precomputed `ln(x)`.
pub(crate) fn dirichlet_log_density_ln(log_x: &[f64], alpha: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    let mut lp = ln_gamma(total);
    for (a, lx) in alpha.iter().zip(log_x) {
        lp += (a - 1.0) * lx - ln_gamma(*a);
    }
    lp
}

/// Raises components below `eps` to `eps` and renormalises.
pub fn clamp_proportions(x: &[f64], eps: f64) -> Vec<f64> {
    let raised: Vec<f64> = x.iter().map(|v| v.max(eps)).collect();
    let total: f64 = raised.iter().sum();
    raised.into_iter().map(|v| v / total).collect()
}

/// Draws `G_i ~ Gamma(alpha_i, 1)` and returns `G / sum(G)`.
pub fn dirichlet_sample<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<SimplexVector> {
    check_concentration(alpha)?;
    let mut out = vec![0.0; alpha.len()];
    dirichlet_sample_into(alpha, rng, &mut out);
    SimplexVector::normalized(out)
}

pub(crate) fn dirichlet_sample_into<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(alpha) {
        // shape > 0 and scale 1 were checked by the caller
        let g = Gamma::new(a, 1.0).expect("valid gamma parameters").sample(rng);
        *o = g;
        total += g;
    }
    if total > 0.0 {
        out.iter_mut().for_each(|o| *o /= total);
    } else {
        // every gamma draw underflowed (all shapes tiny): pick the largest shape
        let best = alpha
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out.iter_mut().for_each(|o| *o = 0.0);
        out[best] = 1.0;
    }
}

/// Mean and per-component variance of `Dirichlet(c * p)`.
pub fn dirichlet_moments(p: &SimplexVector, c: f64) -> Result<(SimplexVector, Vec<f64>)> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::domain("concentration must be finite and > 0"));
    }
    let var = p.iter().map(|pi| pi * (1.0 - pi) / (c + 1.0)).collect();
    Ok((p.clone(), var))
}

/// Multinomial log probability of `counts` out of `total` trials.
pub fn multinomial_log_pmf(counts: &[u64], total: u64, p: &SimplexVector) -> Result<f64> {
    check_dim(p.len(), counts.len())?;
    let sum: u64 = counts.iter().sum();
    if sum != total {
        return Err(Error::domain(format!("counts sum to {sum}, declared total is {total}")));
    }
    Ok(multinomial_log_pmf_unchecked(counts, total, p))
}

pub(crate) fn multinomial_log_pmf_unchecked(counts: &[u64], total: u64, p: &[f64]) -> f64 {
    let mut lp = ln_gamma(total as f64 + 1.0);
    for (&k, &pi) in counts.iter().zip(p) {
        if k == 0 {
            continue;
        }
        if pi <= 0.0 {
            return f64::NEG_INFINITY;
        }
        lp += k as f64 * pi.ln() - ln_gamma(k as f64 + 1.0);
    }
    lp
}

/// Draws multinomial counts by sequential conditional binomials.
pub fn multinomial_sample<R: Rng + ?Sized>(total: u64, p: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0; p.len()];
    let mut left = total;
    let mut mass_left = 1.0;
    for (i, &pi) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == p.len() {
            out[i] = left;
            break;
        }
        let q = if mass_left > 0.0 {
            (pi / mass_left).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let k = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[i] = k;
        left -= k;
        mass_left -= pi;
    }
    out
}

/// Log density of `Gamma(shape, rate)`.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of `Beta(a, b)`.
pub fn beta_log_density(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0 && x < 1.0) {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

/// Rounds half to even; used to turn aggregate loads into counts.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(v: &[f64]) -> SimplexVector {
        SimplexVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn dirichlet_density_examples() {
        assert!(dirichlet_log_density(&sv(&[0.5, 0.5]), &[1.0, 1.0]).unwrap().abs() < 1e-12);
        assert!(dirichlet_log_density(&sv(&[0.2, 0.8]), &[1.0, 1.0]).unwrap().abs() < 1e-12);
        let v = dirichlet_log_density(&sv(&[0.5, 0.5]), &[2.0, 2.0]).unwrap();
        assert!((v - (6f64.ln() + 0.25f64.ln())).abs() < 1e-12);
        assert!((v - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn dirichlet_density_errors() {
        assert!(matches!(
            dirichlet_log_density(&sv(&[0.5, 0.5]), &[0.0, 1.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            dirichlet_log_density(&sv(&[1.0, 0.0]), &[1.0, 1.0]),
            Err(Error::BoundaryValue(_))
        ));
    }

    #[test]
    fn clamp_renormalises() {
        let c = clamp_proportions(&[1.0, 0.0], 1e-9);
        assert!(c[1] > 0.0);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_sample_is_deterministic() {
        let a = dirichlet_sample(&[2.0, 3.0, 0.5], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = dirichlet_sample(&[2.0, 3.0, 0.5], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(dirichlet_sample(&[1.0, -1.0], &mut ChaCha8Rng::seed_from_u64(7)).is_err());
    }

    #[test]
    fn dirichlet_sample_concentration_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let misses = (0..5000)
            .filter(|_| {
                let x = dirichlet_sample(&[1e6, 1.0], &mut rng).unwrap();
                (x[0] - 1.0).abs() > 1e-2
            })
            .count();
        assert_eq!(misses, 0);
    }

    #[test]
    fn moments_examples() {
        let (_, v) = dirichlet_moments(&sv(&[0.5, 0.5]), 99.0).unwrap();
        assert!((v[0] - 0.0025).abs() < 1e-15 && (v[1] - 0.0025).abs() < 1e-15);
        let (_, v) = dirichlet_moments(&sv(&[1.0, 0.0]), 3.0).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        let (m, v) = dirichlet_moments(&sv(&[0.2, 0.8]), 9.0).unwrap();
        assert_eq!(m.as_slice(), &[0.2, 0.8]);
        assert!((v[0] - 0.016).abs() < 1e-15 && (v[1] - 0.016).abs() < 1e-15);
        assert!(dirichlet_moments(&sv(&[0.2, 0.8]), 0.0).is_err());
    }

    #[test]
    fn multinomial_examples() {
        assert_eq!(multinomial_log_pmf(&[2, 0], 2, &sv(&[1.0, 0.0])).unwrap(), 0.0);
        let v = multinomial_log_pmf(&[1, 1], 2, &sv(&[0.5, 0.5])).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
        let v = multinomial_log_pmf(&[0, 3], 3, &sv(&[0.5, 0.5])).unwrap();
        assert!((v - 0.125f64.ln()).abs() < 1e-12);
        assert!(multinomial_log_pmf(&[1, 1], 3, &sv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn gamma_and_beta_densities() {
        assert!((gamma_log_density(1.0, 2.0, 1.0) + 1.0).abs() < 1e-12);
        assert!(beta_log_density(0.3, 1.0, 1.0).abs() < 1e-12);
        assert_eq!(gamma_log_density(0.0, 2.0, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn multinomial_sample_conserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = multinomial_sample(100, &[0.2, 0.0, 0.5, 0.3], &mut rng);
            assert_eq!(k.iter().sum::<u64>(), 100);
            assert_eq!(k[1], 0);
        }
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        assert_eq!(round_half_even(2.4), 2.0);
        assert_eq!(round_half_even(-2.5), -2.0);
        assert_eq!(round_half_even(7.0), 7.0);
    }
}
