//! Simplex-valued vectors and the deterministic maps that combine user
//! preferences with provider availability.
//!
//! A user preference `l` is a point on the probability simplex: the chance a
//! user attaches to each provider when every provider is fully available.
//! Availability `u` re-weights that preference elementwise and renormalises
//! (the preference score). A population of preference clusters mixes the
//! scores by cluster weight to give the expected load proportion per provider.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Absolute tolerance on `sum(x) == 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Availability-weighted preference mass at or below this is singular.
pub const SINGULAR_TOL: f64 = 1e-12;

fn validate_simplex(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::domain("simplex components must be finite and >= 0"));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::domain(format!("simplex components sum to {sum}, not 1")));
    }
    Ok(())
}

/// Non-negative vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("simplex vector must be non-empty"));
        }
        validate_simplex(&values)?;
        Ok(Self(values))
    }

    /// Divides a non-negative vector by its total.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("cannot normalise negative or non-finite values"));
        }
        let total: f64 = values.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("cannot normalise a zero vector"));
        }
        Ok(Self(values.into_iter().map(|v| v / total).collect()))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Self {
        v.0
    }
}

impl std::ops::Deref for SimplexVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Cluster weights. Must lie on the simplex.
pub type WeightVector = SimplexVector;

/// Fraction of a recording interval each provider was usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct AvailabilityVector(Vec<f64>);

impl AvailabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::domain("availability components must lie in [0, 1]"));
        }
        Ok(Self(values))
    }

    pub fn all_on(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices of providers with non-zero availability.
    pub fn support(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] > 0.0).collect()
    }
}

impl TryFrom<Vec<f64>> for AvailabilityVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<AvailabilityVector> for Vec<f64> {
    fn from(v: AvailabilityVector) -> Self {
        v.0
    }
}

impl std::ops::Deref for AvailabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `W x N` matrix whose rows are cluster preferences, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceMatrix {
    n_providers: usize,
    data: Vec<f64>,
}

impl PreferenceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_providers = rows.first().map(Vec::len).unwrap_or(0);
        if n_providers == 0 {
            return Err(Error::domain("preference matrix needs at least one non-empty row"));
        }
        let mut data = Vec::with_capacity(rows.len() * n_providers);
        for row in rows {
            check_dim(n_providers, row.len())?;
            validate_simplex(&row)?;
            data.extend(row);
        }
        Ok(Self { n_providers, data })
    }

    /// Builds from a flat row-major buffer; rows must already lie on the simplex.
    pub fn from_flat(n_providers: usize, data: Vec<f64>) -> Result<Self> {
        if n_providers == 0 || data.is_empty() || !data.len().is_multiple_of(n_providers) {
            return Err(Error::domain("flat buffer is not a whole number of rows"));
        }
        for row in data.chunks(n_providers) {
            validate_simplex(row)?;
        }
        Ok(Self { n_providers, data })
    }

    pub fn n_clusters(&self) -> usize {
        self.data.len() / self.n_providers
    }

    pub fn n_providers(&self) -> usize {
        self.n_providers
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_providers..(j + 1) * self.n_providers]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_providers)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }
}

/// Writes `(l ⊙ u) / (l · u)` into `out`.
pub(crate) fn preference_score_into(l: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    let mass: f64 = l.iter().zip(u).map(|(a, b)| a * b).sum();
    if mass <= SINGULAR_TOL {
        return Err(Error::SingularPreference {
            mass,
            tol: SINGULAR_TOL,
        });
    }
    for ((o, a), b) in out.iter_mut().zip(l).zip(u) {
        *o = a * b / mass;
    }
    Ok(())
}

/// Attachment probabilities of a user with preference `l` under availability `u`.
pub fn preference_score(l: &SimplexVector, u: &AvailabilityVector) -> Result<SimplexVector> {
    check_dim(l.len(), u.len())?;
    let mut out = vec![0.0; l.len()];
    preference_score_into(l, u, &mut out)?;
    Ok(SimplexVector(out))
}

/// Matrix form `(diag(L diag(u) 1)^-1 L diag(u))^T w` over raw slices.
///
/// `weights` need not sum to one; the result is scaled by their total.
pub(crate) fn proportion_into(prefs: &PreferenceMatrix, weights: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
    let n = prefs.n_providers();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (row, &w) in prefs.rows().zip(weights) {
        // row of L diag(u), then its row sum
        let row_sum: f64 = row.iter().zip(u).map(|(l, a)| l * a).sum();
        if row_sum <= SINGULAR_TOL {
            return Err(Error::SingularPreference {
                mass: row_sum,
                tol: SINGULAR_TOL,
            });
        }
        let scale = w / row_sum;
        for i in 0..n {
            out[i] += scale * row[i] * u[i];
        }
    }
    Ok(())
}

/// Expected load proportion per provider for a weighted mixture of
/// preference clusters under availability `u`.
pub fn proportion_vector(prefs: &PreferenceMatrix, w: &WeightVector, u: &AvailabilityVector) -> Result<SimplexVector> {
    check_dim(prefs.n_clusters(), w.len())?;
    check_dim(prefs.n_providers(), u.len())?;
    let mut out = vec![0.0; u.len()];
    proportion_into(prefs, w, u, &mut out)?;
    Ok(SimplexVector(out))
}

/// Truncated stick-breaking weights: `weights.sum() + remainder == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickWeights {
    pub weights: Vec<f64>,
    pub remainder: f64,
}

impl StickWeights {
    /// Retained weights renormalised onto the simplex.
    pub fn normalized(&self) -> WeightVector {
        let total: f64 = self.weights.iter().sum();
        SimplexVector(self.weights.iter().map(|w| w / total).collect())
    }
}

/// `w_j = beta_j * prod_{k<j} (1 - beta_k)`, remainder `prod_k (1 - beta_k)`.
pub fn stick_breaking(beta: &[f64]) -> Result<StickWeights> {
    if beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
        return Err(Error::domain("stick fractions must lie in (0, 1)"));
    }
    let mut remaining = 1.0;
    let weights = beta
        .iter()
        .map(|&b| {
            let w = b * remaining;
            remaining *= 1.0 - b;
            w
        })
        .collect();
    Ok(StickWeights {
        weights,
        remainder: remaining,
    })
}
