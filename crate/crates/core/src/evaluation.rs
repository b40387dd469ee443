//! Accuracy and calibration metrics, truncation counts and cluster analyses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::inference::{sampler::chain_rng, PosteriorSamples};
use crate::prediction::PredictiveSamples;
use crate::simplex::StickWeights;

const MIN_HDI_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub lower: f64,
    pub upper: f64,
    /// Nominal mass as a fraction in `(0, 1)`.
    pub mass: f64,
}

impl CredibleInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

fn hdi_sorted(sorted: &[f64], mass: f64) -> CredibleInterval {
    let n = sorted.len();
    // guard against P*n landing a hair above an integer
    let k = ((mass * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut best = 0;
    let mut best_width = f64::INFINITY;
    for i in 0..=n - k {
        let width = sorted[i + k - 1] - sorted[i];
        if width < best_width {
            best_width = width;
            best = i;
        }
    }
    CredibleInterval {
        lower: sorted[best],
        upper: sorted[best + k - 1],
        mass,
    }
}

/// Highest density interval: the shortest window of the sorted samples
/// holding `ceil(mass * n)` of them, leftmost on ties.
pub fn hdi(samples: &[f64], mass: f64) -> Result<CredibleInterval> {
    if samples.len() < MIN_HDI_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_HDI_SAMPLES,
            found: samples.len(),
        });
    }
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::domain(format!("HDI mass must lie in (0, 1), got {mass}")));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("samples contain NaN"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(hdi_sorted(&sorted, mass))
}

/// Percentage of truths inside their intervals.
pub fn empirical_coverage(intervals: &[CredibleInterval], truths: &[f64]) -> Result<f64> {
    check_dim(intervals.len(), truths.len())?;
    if intervals.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, found: 0 });
    }
    let hits = intervals.iter().zip(truths).filter(|(iv, t)| iv.contains(**t)).count();
    Ok(100.0 * hits as f64 / intervals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    /// Nominal coverage, percent.
    pub nominal: f64,
    /// Empirical coverage, percent.
    pub empirical: f64,
    /// Number of (provider, scenario) pairs behind the point.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub points: Vec<ReliabilityPoint>,
}

impl ReliabilityCurve {
    /// Largest `|empirical - nominal|` over points with nominal in `[lo, hi]`.
    pub fn max_deviation(&self, lo: f64, hi: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.nominal >= lo && p.nominal <= hi)
            .map(|p| (p.empirical - p.nominal).abs())
            .fold(0.0, f64::max)
    }
}

/// Nominal coverages 5, 10, ..., 95 percent.
pub fn default_p_grid() -> Vec<f64> {
    (1..=19).map(|k| 5.0 * k as f64).collect()
}

/// Empirical HDI coverage at each nominal level, pooled over every
/// available (provider, scenario) pair. Providers with zero availability
/// carry deterministic zero loads and are left out.
pub fn reliability_curve(sets: &[PredictiveSamples], truths: &[Vec<f64>], p_grid: &[f64]) -> Result<ReliabilityCurve> {
    check_dim(sets.len(), truths.len())?;
    if p_grid.is_empty() {
        return Err(Error::domain("P grid is empty"));
    }
    if p_grid.iter().any(|p| !(*p > 0.0 && *p < 100.0)) || p_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain("P grid must be strictly increasing within (0, 100)"));
    }
    let mut columns: Vec<(Vec<f64>, f64)> = Vec::new();
    for (set, truth) in sets.iter().zip(truths) {
        check_dim(set.u.len(), truth.len())?;
        for i in set.u.support() {
            let mut col = set.column(i);
            col.sort_by(f64::total_cmp);
            columns.push((col, truth[i]));
        }
    }
    let points = p_grid
        .iter()
        .map(|&p| {
            let mut intervals = Vec::with_capacity(columns.len());
            for (col, _) in &columns {
                if col.len() < MIN_HDI_SAMPLES {
                    return Err(Error::InsufficientSamples {
                        needed: MIN_HDI_SAMPLES,
                        found: col.len(),
                    });
                }
                intervals.push(hdi_sorted(col, p / 100.0));
            }
            let t: Vec<f64> = columns.iter().map(|c| c.1).collect();
            Ok(ReliabilityPoint {
                nominal: p,
                empirical: empirical_coverage(&intervals, &t)?,
                count: intervals.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReliabilityCurve { points })
}

/// Mean absolute gap between empirical and nominal coverage, in percentage
/// points.
pub fn calibration_deviation(curve: &ReliabilityCurve) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    curve
        .points
        .iter()
        .map(|p| (p.empirical - p.nominal).abs())
        .sum::<f64>()
        / curve.points.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeMatrix {
    /// `abs_errors[scenario][provider]`.
    pub abs_errors: Vec<Vec<f64>>,
    pub provider_mae: Vec<f64>,
    pub scenario_mae: Vec<f64>,
}

/// Absolute errors with per-provider and per-scenario means; input is
/// indexed `[scenario][provider]`.
pub fn mae_matrix(errors: &[Vec<f64>]) -> Result<MaeMatrix> {
    let n = errors
        .first()
        .map(Vec::len)
        .ok_or(Error::InsufficientSamples { needed: 1, found: 0 })?;
    let abs_errors: Vec<Vec<f64>> = errors
        .iter()
        .map(|row| {
            check_dim(n, row.len())?;
            Ok(row.iter().map(|e| e.abs()).collect())
        })
        .collect::<Result<_>>()?;
    let r = abs_errors.len() as f64;
    let provider_mae = (0..n)
        .map(|i| abs_errors.iter().map(|row| row[i]).sum::<f64>() / r)
        .collect();
    let scenario_mae = abs_errors
        .iter()
        .map(|row| row.iter().sum::<f64>() / n.max(1) as f64)
        .collect();
    Ok(MaeMatrix {
        abs_errors,
        provider_mae,
        scenario_mae,
    })
}

/// `eps[m-1]` = weight left unassigned after the first `m` clusters:
/// the remainder plus the retained weights beyond `m`.
pub fn truncation_errors(w: &StickWeights) -> Vec<f64> {
    let mut eps = vec![0.0; w.weights.len()];
    let mut tail = w.remainder;
    for m in (0..w.weights.len()).rev() {
        eps[m] = tail;
        tail += w.weights[m];
    }
    eps
}

/// Smallest `m` with `eps(m) <= delta`, or `None` when even all retained
/// clusters leave more than `delta` unassigned.
pub fn significant_clusters(w: &StickWeights, delta: f64) -> Option<usize> {
    truncation_errors(w).iter().position(|&e| e <= delta).map(|m| m + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub delta: f64,
    /// Per draw; `None` marks an unreachable threshold.
    pub counts: Vec<Option<usize>>,
    pub unreachable: usize,
    /// Median count with unreachable draws ranked above every reachable one.
    pub median: f64,
    /// Posterior mean of `eps(m)` for `m = 1..=W`.
    pub mean_epsilon: Vec<f64>,
    /// `histogram[m]` = number of draws with count `m`.
    pub histogram: Vec<usize>,
}

pub fn truncation_count(draws: &[StickWeights], delta: f64) -> Result<TruncationReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let levels = draws
        .first()
        .map(|w| w.weights.len())
        .ok_or(Error::InsufficientDraws { needed: 1, found: 0 })?;
    let mut mean_epsilon = vec![0.0; levels];
    let mut counts = Vec::with_capacity(draws.len());
    for w in draws {
        check_dim(levels, w.weights.len())?;
        let eps = truncation_errors(w);
        mean_epsilon.iter_mut().zip(&eps).for_each(|(m, e)| *m += e);
        counts.push(eps.iter().position(|&e| e <= delta).map(|m| m + 1));
    }
    mean_epsilon.iter_mut().for_each(|m| *m /= draws.len() as f64);
    let mut ranked: Vec<usize> = counts.iter().map(|c| c.unwrap_or(levels + 1)).collect();
    ranked.sort_unstable();
    let n = ranked.len();
    let median = if n % 2 == 1 {
        ranked[n / 2] as f64
    } else {
        0.5 * (ranked[n / 2 - 1] + ranked[n / 2]) as f64
    };
    let mut histogram = vec![0; levels + 1];
    for c in counts.iter().flatten() {
        histogram[*c] += 1;
    }
    Ok(TruncationReport {
        delta,
        unreachable: counts.iter().filter(|c| c.is_none()).count(),
        counts,
        median,
        mean_epsilon,
        histogram,
    })
}

/// Stick weights of every pooled posterior draw; fixed-size weights are
/// reported with a zero remainder.
pub fn weight_draws(posterior: &PosteriorSamples) -> Vec<StickWeights> {
    posterior
        .pooled()
        .map(|p| {
            p.stick_weights().unwrap_or_else(|| StickWeights {
                weights: p.mixture_weights().into_inner(),
                remainder: 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
}

const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(row, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_seed<R: Rng>(rows: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = rows.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..rows.len())
        };
        centroids.push(rows[next].clone());
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(rows: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let dim = rows[0].len();
    let k = centroids.len();
    let mut labels = vec![usize::MAX; rows.len()];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut inertia = 0.0;
        for (label, row) in labels.iter_mut().zip(rows) {
            let (j, d) = nearest(row, &centroids);
            inertia += d;
            if *label != j {
                *label = j;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut sizes = vec![0usize; k];
        for (&j, row) in labels.iter().zip(rows) {
            sizes[j] += 1;
            sums[j].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            // an emptied cluster keeps its previous centroid
            if sizes[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / sizes[j] as f64).collect();
            }
        }
    }
    let inertia = labels.iter().zip(rows).map(|(&j, r)| sq_dist(r, &centroids[j])).sum();
    if trace.last() != Some(&inertia) {
        trace.push(inertia);
    }
    KMeansResult {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the best of 20 restarts is
/// kept. Deterministic given `seed`.
pub fn kmeans_preferences(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k < 1 {
        return Err(Error::domain("k must be >= 1"));
    }
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    for r in rows {
        check_dim(dim, r.len())?;
    }
    let mut distinct: Vec<&Vec<f64>> = rows.iter().collect();
    distinct.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateInput(format!(
            "{} distinct rows for k = {k}",
            distinct.len()
        )));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = chain_rng(seed, restart);
        let result = lloyd(rows, plus_plus_seed(rows, k, &mut rng));
        if best.as_ref().is_none_or(|b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Ratios of consecutive preference components taken in `order`:
/// `r_i = l[order[i]] / l[order[i + 1]]`.
pub fn preference_ratios(l: &[f64], order: &[usize]) -> Result<Vec<f64>> {
    check_dim(l.len(), order.len())?;
    let mut seen = vec![false; l.len()];
    for &i in order {
        if i >= l.len() || seen[i] {
            return Err(Error::domain("order must be a permutation of provider indices"));
        }
        seen[i] = true;
    }
    let c: Vec<f64> = order.iter().map(|&i| l[i]).collect();
    if c.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::domain("ordered preference components must be > 0"));
    }
    Ok(c.windows(2).map(|w| w[0] / w[1]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hdi_examples() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        let iv = hdi(&s, 0.8).unwrap();
        assert_eq!((iv.lower, iv.upper), (1.0, 8.0));
        let iv = hdi(&[3.0; 12], 0.5).unwrap();
        assert_eq!((iv.lower, iv.upper), (3.0, 3.0));
        assert!(matches!(hdi(&[1.0; 9], 0.5), Err(Error::InsufficientSamples { .. })));
        assert!(hdi(&s, 1.0).is_err());
    }

    #[test]
    fn coverage_examples() {
        let iv = CredibleInterval {
            lower: 0.0,
            upper: 1.0,
            mass: 0.5,
        };
        assert_eq!(empirical_coverage(&[iv, iv], &[0.5, 1.0]).unwrap(), 100.0);
        let zero = CredibleInterval {
            lower: 2.0,
            upper: 2.0,
            mass: 0.5,
        };
        assert_eq!(empirical_coverage(&[zero], &[3.0]).unwrap(), 0.0);
        assert!(empirical_coverage(&[zero], &[]).is_err());
    }

    #[test]
    fn deviation_examples() {
        let curve = ReliabilityCurve {
            points: vec![
                ReliabilityPoint {
                    nominal: 50.0,
                    empirical: 60.0,
                    count: 1,
                },
                ReliabilityPoint {
                    nominal: 90.0,
                    empirical: 80.0,
                    count: 1,
                },
            ],
        };
        assert_eq!(calibration_deviation(&curve), 10.0);
        let mut rev = curve.clone();
        rev.points.reverse();
        assert_eq!(calibration_deviation(&rev), 10.0);
        assert_eq!(curve.max_deviation(10.0, 90.0), 10.0);
    }

    #[test]
    fn mae_examples() {
        let m = mae_matrix(&[vec![-5.0, 5.0]]).unwrap();
        assert_eq!(m.abs_errors, vec![vec![5.0, 5.0]]);
        assert_eq!(m.provider_mae, vec![5.0, 5.0]);
        let z = mae_matrix(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(z.abs_errors.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn truncation_examples() {
        let w = StickWeights {
            weights: vec![0.9, 0.09, 0.009, 0.001],
            remainder: 0.0,
        };
        assert_eq!(significant_clusters(&w, 0.001), Some(3));
        let one = StickWeights {
            weights: vec![1.0, 0.0, 0.0, 0.0],
            remainder: 0.0,
        };
        assert_eq!(significant_clusters(&one, 1e-6), Some(1));
        let short = StickWeights {
            weights: vec![0.5, 0.25, 0.0, 0.0],
            remainder: 0.25,
        };
        assert_eq!(significant_clusters(&short, 0.1), None);
        let report = truncation_count(&[w, one, short], 0.001).unwrap();
        assert_eq!(report.counts, vec![Some(3), Some(1), None]);
        assert_eq!(report.unreachable, 1);
        assert_eq!(report.median, 3.0);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(preference_ratios(&[0.8, 0.2], &[0, 1]).unwrap(), vec![4.0]);
        assert_eq!(preference_ratios(&[0.25; 4], &[3, 1, 0, 2]).unwrap(), vec![1.0; 3]);
        let r = preference_ratios(&[0.999, 0.001], &[0, 1]).unwrap();
        assert!((r[0] - 999.0).abs() < 1e-9);
        assert!(preference_ratios(&[1.0, 0.0], &[0, 1]).is_err());
        assert!(preference_ratios(&[0.5, 0.5], &[0, 0]).is_err());
    }

    #[test]
    fn kmeans_single_cluster_is_the_mean() {
        let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let r = kmeans_preferences(&rows, 1, 1).unwrap();
        assert!((r.centroids[0][0] - 1.0).abs() < 1e-12 && (r.centroids[0][1] - 1.0).abs() < 1e-12);
        assert!((r.inertia - (2.0 + 2.0 + 4.0)).abs() < 1e-12);
        assert!(matches!(
            kmeans_preferences(&[vec![1.0], vec![1.0]], 2, 0),
            Err(Error::DegenerateInput(_))
        ));
    }
}
