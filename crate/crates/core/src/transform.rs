//! Bijections between constrained parameters and `R^k`, with the
//! log-Jacobian of each inverse map so densities can be evaluated on the
//! unconstrained side.

use crate::error::{Error, Result};

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Centred stick-breaking map from an interior simplex point of length `N`
/// to `R^(N-1)`; the barycentre maps to the origin.
pub fn simplex_forward(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::domain("simplex transform needs dimension >= 2"));
    }
    if x.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::BoundaryValue(
            "simplex transform requires a strictly interior point".into(),
        ));
    }
    let mut out = Vec::with_capacity(n - 1);
    let mut remaining = 1.0;
    for (k, &xk) in x[..n - 1].iter().enumerate() {
        let z = (xk / remaining).min(1.0 - f64::EPSILON);
        out.push(logit(z) + ((n - 1 - k) as f64).ln());
        remaining -= xk;
    }
    Ok(out)
}

/// Inverse of [`simplex_forward`]: writes the simplex point into `out`
/// (length `y.len() + 1`) and returns `ln |det J|` of `y -> x[..N-1]`.
pub fn simplex_inverse_into(y: &[f64], out: &mut [f64]) -> f64 {
    let n = y.len() + 1;
    debug_assert_eq!(out.len(), n);
    let mut remaining: f64 = 1.0;
    let mut log_jac = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        let shifted = yk - ((n - 1 - k) as f64).ln();
        let z = logistic(shifted);
        // ln z + ln(1 - z) computed stably as -softplus(-s) - softplus(s)
        log_jac += -softplus(-shifted) - softplus(shifted) + remaining.ln();
        let xk = remaining * z;
        out[k] = xk;
        remaining -= xk;
    }
    out[n - 1] = remaining.max(0.0);
    log_jac
}

pub fn simplex_inverse(y: &[f64]) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; y.len() + 1];
    let lj = simplex_inverse_into(y, &mut out);
    (out, lj)
}

/// Adds to `gy` the gradient with respect to `y` of `f(x) + ln |det J|`,
/// where `x` is [`simplex_inverse`] of `y` and `gx` is the gradient of `f`.
pub fn simplex_inverse_grad(y: &[f64], gx: &[f64], gy: &mut [f64]) {
    let n = y.len() + 1;
    debug_assert_eq!(gx.len(), n);
    let mut z = vec![0.0; n - 1];
    let mut rem = vec![1.0; n];
    for (k, &yk) in y.iter().enumerate() {
        z[k] = logistic(yk - ((n - 1 - k) as f64).ln());
        rem[k + 1] = rem[k] - rem[k] * z[k];
    }
    let mut g_rem = gx[n - 1];
    for k in (0..n - 1).rev() {
        let zk = z[k];
        gy[k] += (gx[k] - g_rem) * rem[k] * zk * (1.0 - zk) + (1.0 - 2.0 * zk);
        g_rem = gx[k] * zk + g_rem * (1.0 - zk) + 1.0 / rem[k];
    }
}

/// `(0, inf) -> R` via `ln`.
pub fn positive_forward(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::BoundaryValue("positive transform needs x > 0".into()));
    }
    Ok(x.ln())
}

/// Returns `(exp(y), y)`: the value and its log-Jacobian.
pub fn positive_inverse(y: f64) -> (f64, f64) {
    (y.exp(), y)
}

/// `(0, 1) -> R` via logit.
pub fn unit_forward(x: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::BoundaryValue("unit-interval transform needs 0 < x < 1".into()));
    }
    Ok(logit(x))
}

/// Returns `(logistic(y), ln x + ln(1 - x))`.
pub fn unit_inverse(y: f64) -> (f64, f64) {
    (logistic(y), -softplus(-y) - softplus(y))
}
