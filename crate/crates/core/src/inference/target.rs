//! The cluster-model posterior as a [`BlockTarget`].
//!
//! The cache keeps per-record preference scores, proportions and log
//! likelihood terms so a block update only recomputes what it touches.

use std::ops::Range;

use rand::{Rng, RngCore};
use statrs::function::gamma::{digamma, ln_gamma};

use super::hmc::GradientTarget;
use super::sampler::BlockTarget;
use crate::dist::{beta_log_density, gamma_log_density, multinomial_log_pmf_unchecked};
use crate::error::Result;
use crate::io::Dataset;
use crate::model::{prepare_records, BlockKind, Likelihood, ModelConfig, ParamLayout, PreparedRecord, Variant};
use crate::simplex::SINGULAR_TOL;
use crate::transform::{simplex_inverse_grad, simplex_inverse_into, unit_inverse};

const INIT_JITTER: f64 = 0.5;

pub struct ClusterTarget {
    config: ModelConfig,
    layout: ParamLayout,
    records: Vec<PreparedRecord>,
    kinds: Vec<BlockKind>,
    ranges: Vec<Range<usize>>,
}

impl ClusterTarget {
    pub fn new(dataset: &Dataset, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config.variant, config.clusters, dataset.n_providers());
        let records = prepare_records(dataset, config.clamp)?;
        let (kinds, ranges) = layout.blocks().iter().cloned().unzip();
        Ok(Self {
            config: config.clone(),
            layout,
            records,
            kinds,
            ranges,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn block_kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    fn n(&self) -> usize {
        self.layout.n_providers
    }

    fn w(&self) -> usize {
        self.layout.n_clusters
    }

    fn record_ll(&self, rec: &PreparedRecord, p: &[f64], c: f64, buf: &mut Vec<f64>) -> f64 {
        rec.log_likelihood(p, c, self.config.likelihood, buf)
    }

    fn lp_c(&self, y: f64) -> f64 {
        gamma_log_density(y.exp(), self.config.conc_shape, self.config.conc_rate) + y
    }

    fn lp_alpha(&self, y: f64) -> f64 {
        gamma_log_density(y.exp(), self.config.alpha_shape, self.config.alpha_rate) + y
    }

    /// Decodes the weight block into normalised mixture weights, returning
    /// the block's prior plus log-Jacobian.
    fn decode_weights(&self, y: &[f64], alpha: f64, beta: &mut [f64], weights: &mut [f64]) -> f64 {
        match self.layout.variant {
            Variant::Naive => {
                if y.is_empty() {
                    weights[0] = 1.0;
                    return 0.0;
                }
                ln_gamma(self.w() as f64) + simplex_inverse_into(y, weights)
            }
            Variant::Complete => {
                let mut lp = 0.0;
                let mut rest = 1.0;
                let mut total = 0.0;
                for (j, &v) in y.iter().enumerate() {
                    let (b, lj) = unit_inverse(v);
                    beta[j] = b;
                    lp += beta_log_density(b, 1.0, alpha) + lj;
                    weights[j] = b * rest;
                    total += weights[j];
                    rest *= 1.0 - b;
                }
                if total > 0.0 {
                    weights.iter_mut().for_each(|w| *w /= total);
                } else {
                    return f64::NEG_INFINITY;
                }
                lp
            }
        }
    }

    fn beta_prior(&self, beta: &[f64], y: &[f64], alpha: f64) -> f64 {
        beta.iter()
            .zip(y)
            .map(|(&b, &v)| beta_log_density(b, 1.0, alpha) + unit_inverse(v).1)
            .sum()
    }

    fn row_prior(&self, y: &[f64], row: &mut [f64]) -> f64 {
        ln_gamma(self.n() as f64) + simplex_inverse_into(y, row)
    }
}

/// Scores `s_i = l_i u_i / sum_k l_k u_k`; false when the denominator vanishes.
fn scores_into(l: &[f64], u: &[f64], out: &mut [f64]) -> bool {
    let mut denom = 0.0;
    for ((o, &li), &ui) in out.iter_mut().zip(l).zip(u) {
        *o = li * ui;
        denom += *o;
    }
    if !(denom > SINGULAR_TOL) {
        return false;
    }
    out.iter_mut().for_each(|o| *o /= denom);
    true
}

fn mix_into(weights: &[f64], scores: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &wj) in weights.iter().enumerate() {
        for (o, s) in out.iter_mut().zip(&scores[j * n..(j + 1) * n]) {
            *o += wj * s;
        }
    }
}

#[derive(Default)]
pub struct ClusterCache {
    alpha: f64,
    beta: Vec<f64>,
    weights: Vec<f64>,
    rows: Vec<f64>,
    /// `scores[r][j * N + i]`, flattened record-major.
    scores: Vec<f64>,
    p: Vec<f64>,
    ll: Vec<f64>,
    lp_c: f64,
    lp_alpha: f64,
    lp_w: f64,
    lp_rows: Vec<f64>,
    c: f64,
    pending: Pending,
    buf: Vec<f64>,
}

#[derive(Default)]
struct Pending {
    c: f64,
    alpha: f64,
    beta: Vec<f64>,
    weights: Vec<f64>,
    row: Vec<f64>,
    row_scores: Vec<f64>,
    p: Vec<f64>,
    ll: Vec<f64>,
    lp: f64,
    lp_w: f64,
    valid: bool,
}

impl ClusterCache {
    fn total(&self) -> f64 {
        self.lp_c + self.lp_alpha + self.lp_w + self.lp_rows.iter().sum::<f64>() + self.ll.iter().sum::<f64>()
    }
}

impl BlockTarget for ClusterTarget {
    type Cache = ClusterCache;

    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        self.ranges.clone()
    }

    /// `c` and `alpha` at their prior means, stick fractions at 1/2, and
    /// simplex blocks at the barycentre plus a seeded jitter.
    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut y = vec![0.0; self.layout.dim()];
        for (kind, range) in self.kinds.iter().zip(&self.ranges) {
            match kind {
                BlockKind::Concentration => y[range.start] = (self.config.conc_shape / self.config.conc_rate).ln(),
                BlockKind::Alpha => y[range.start] = (self.config.alpha_shape / self.config.alpha_rate).ln(),
                BlockKind::Weights if self.layout.variant == Variant::Complete => {}
                BlockKind::Weights | BlockKind::Preference(_) => {
                    for v in &mut y[range.clone()] {
                        *v = rng.random_range(-INIT_JITTER..INIT_JITTER);
                    }
                }
            }
        }
        y
    }

    fn initialize(&self, x: &[f64]) -> (ClusterCache, f64) {
        let (n, w, d) = (self.n(), self.w(), self.records.len());
        let mut cache = ClusterCache {
            beta: vec![0.0; w],
            weights: vec![0.0; w],
            rows: vec![0.0; w * n],
            scores: vec![0.0; d * w * n],
            p: vec![0.0; d * n],
            ll: vec![0.0; d],
            lp_rows: vec![0.0; w],
            ..ClusterCache::default()
        };
        cache.pending = Pending {
            beta: vec![0.0; w],
            weights: vec![0.0; w],
            row: vec![0.0; n],
            row_scores: vec![0.0; d * n],
            p: vec![0.0; d * n],
            ll: vec![0.0; d],
            ..Pending::default()
        };
        cache.c = x[0].exp();
        cache.lp_c = self.lp_c(x[0]);
        for (kind, range) in self.kinds.iter().zip(&self.ranges) {
            let y = &x[range.clone()];
            match *kind {
                BlockKind::Concentration => {}
                BlockKind::Alpha => {
                    cache.alpha = y[0].exp();
                    cache.lp_alpha = self.lp_alpha(y[0]);
                }
                BlockKind::Weights => {}
                BlockKind::Preference(j) => {
                    cache.lp_rows[j] = self.row_prior(y, &mut cache.rows[j * n..(j + 1) * n]);
                }
            }
        }
        let wy: &[f64] = self
            .kinds
            .iter()
            .position(|k| *k == BlockKind::Weights)
            .map(|b| &x[self.ranges[b].clone()])
            .unwrap_or(&[]);
        cache.lp_w = self.decode_weights(wy, cache.alpha, &mut cache.beta, &mut cache.weights);

        let mut ok = true;
        for (r, rec) in self.records.iter().enumerate() {
            let s = &mut cache.scores[r * w * n..(r + 1) * w * n];
            for j in 0..w {
                ok &= scores_into(&cache.rows[j * n..(j + 1) * n], &rec.u, &mut s[j * n..(j + 1) * n]);
            }
            let p = &mut cache.p[r * n..(r + 1) * n];
            mix_into(&cache.weights, s, n, p);
            cache.ll[r] = rec.log_likelihood(p, cache.c, self.config.likelihood, &mut cache.buf);
        }
        let lp = if ok { cache.total() } else { f64::NEG_INFINITY };
        (cache, if lp.is_nan() { f64::NEG_INFINITY } else { lp })
    }

    fn propose(&self, cache: &mut ClusterCache, x: &[f64], block: usize, values: &[f64]) -> f64 {
        let (n, w) = (self.n(), self.w());
        let pend = &mut cache.pending;
        pend.valid = true;
        let mut buf = std::mem::take(&mut cache.buf);
        let lp_rows_sum: f64 = cache.lp_rows.iter().sum();
        let ll_sum: f64 = cache.ll.iter().sum();
        let out = match self.kinds[block] {
            BlockKind::Concentration => {
                pend.c = values[0].exp();
                pend.lp = self.lp_c(values[0]);
                let mut ll = 0.0;
                for (r, rec) in self.records.iter().enumerate() {
                    pend.ll[r] = self.record_ll(rec, &cache.p[r * n..(r + 1) * n], pend.c, &mut buf);
                    ll += pend.ll[r];
                }
                pend.lp + cache.lp_alpha + cache.lp_w + lp_rows_sum + ll
            }
            BlockKind::Alpha => {
                pend.alpha = values[0].exp();
                pend.lp = self.lp_alpha(values[0]);
                let wy = &x[self.ranges[block + 1].clone()];
                pend.lp_w = self.beta_prior(&cache.beta, wy, pend.alpha);
                cache.lp_c + pend.lp + pend.lp_w + lp_rows_sum + ll_sum
            }
            BlockKind::Weights => {
                pend.lp_w = self.decode_weights(values, cache.alpha, &mut pend.beta, &mut pend.weights);
                let mut ll = 0.0;
                for (r, rec) in self.records.iter().enumerate() {
                    let p = &mut pend.p[r * n..(r + 1) * n];
                    mix_into(&pend.weights, &cache.scores[r * w * n..(r + 1) * w * n], n, p);
                    pend.ll[r] = self.record_ll(rec, p, cache.c, &mut buf);
                    ll += pend.ll[r];
                }
                cache.lp_c + cache.lp_alpha + pend.lp_w + lp_rows_sum + ll
            }
            BlockKind::Preference(j) => {
                pend.lp = self.row_prior(values, &mut pend.row);
                let mut ll = 0.0;
                for (r, rec) in self.records.iter().enumerate() {
                    let s_new = &mut pend.row_scores[r * n..(r + 1) * n];
                    if !scores_into(&pend.row, &rec.u, s_new) {
                        pend.valid = false;
                        break;
                    }
                    let s = &cache.scores[r * w * n..(r + 1) * w * n];
                    let p = &mut pend.p[r * n..(r + 1) * n];
                    p.iter_mut().for_each(|v| *v = 0.0);
                    for (k, &wk) in cache.weights.iter().enumerate() {
                        let src = if k == j { &*s_new } else { &s[k * n..(k + 1) * n] };
                        for (o, v) in p.iter_mut().zip(src) {
                            *o += wk * v;
                        }
                    }
                    pend.ll[r] = self.record_ll(rec, p, cache.c, &mut buf);
                    ll += pend.ll[r];
                }
                if pend.valid {
                    cache.lp_c + cache.lp_alpha + cache.lp_w + lp_rows_sum - cache.lp_rows[j] + pend.lp + ll
                } else {
                    f64::NEG_INFINITY
                }
            }
        };
        cache.buf = buf;
        if out.is_nan() {
            f64::NEG_INFINITY
        } else {
            out
        }
    }

    fn accept(&self, cache: &mut ClusterCache, block: usize) {
        let (n, w) = (self.n(), self.w());
        let pend = &mut cache.pending;
        match self.kinds[block] {
            BlockKind::Concentration => {
                cache.c = pend.c;
                cache.lp_c = pend.lp;
                std::mem::swap(&mut cache.ll, &mut pend.ll);
            }
            BlockKind::Alpha => {
                cache.alpha = pend.alpha;
                cache.lp_alpha = pend.lp;
                cache.lp_w = pend.lp_w;
            }
            BlockKind::Weights => {
                cache.lp_w = pend.lp_w;
                std::mem::swap(&mut cache.weights, &mut pend.weights);
                std::mem::swap(&mut cache.beta, &mut pend.beta);
                std::mem::swap(&mut cache.p, &mut pend.p);
                std::mem::swap(&mut cache.ll, &mut pend.ll);
            }
            BlockKind::Preference(j) => {
                cache.lp_rows[j] = pend.lp;
                cache.rows[j * n..(j + 1) * n].copy_from_slice(&pend.row);
                for r in 0..self.records.len() {
                    cache.scores[r * w * n + j * n..r * w * n + (j + 1) * n]
                        .copy_from_slice(&pend.row_scores[r * n..(r + 1) * n]);
                }
                std::mem::swap(&mut cache.p, &mut pend.p);
                std::mem::swap(&mut cache.ll, &mut pend.ll);
            }
        }
    }
}

impl ClusterTarget {
    /// Log posterior on the unconstrained scale with its gradient.
    fn value_and_gradient(&self, y: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (n, w) = (self.n(), self.w());
        let cfg = &self.config;

        let c = y[0].exp();
        let mut lp = self.lp_c(y[0]);
        grad[0] = cfg.conc_shape - cfg.conc_rate * c;

        let mut alpha = 0.0;
        let mut weights = vec![0.0; w];
        let mut beta = vec![0.0; w];
        let mut raw = vec![0.0; w];
        let mut rest = vec![0.0; w];
        let mut total = 0.0;
        let mut rows = vec![0.0; w * n];
        let mut weight_range = 0..0;
        let mut row_ranges = Vec::with_capacity(w);
        for (kind, range) in self.kinds.iter().zip(&self.ranges) {
            match kind {
                BlockKind::Concentration => {}
                BlockKind::Alpha => {
                    alpha = y[range.start].exp();
                    lp += self.lp_alpha(y[range.start]);
                    grad[range.start] = cfg.alpha_shape - cfg.alpha_rate * alpha;
                }
                BlockKind::Weights => weight_range = range.clone(),
                BlockKind::Preference(j) => {
                    lp += self.row_prior(&y[range.clone()], &mut rows[j * n..(j + 1) * n]);
                    row_ranges.push(range.clone());
                }
            }
        }
        match self.layout.variant {
            Variant::Naive if w == 1 => weights[0] = 1.0,
            Variant::Naive => {
                lp += ln_gamma(w as f64) + simplex_inverse_into(&y[weight_range.clone()], &mut weights);
            }
            Variant::Complete => {
                let mut r = 1.0;
                for (j, &v) in y[weight_range.clone()].iter().enumerate() {
                    let (b, lj) = unit_inverse(v);
                    beta[j] = b;
                    lp += beta_log_density(b, 1.0, alpha) + lj;
                    rest[j] = r;
                    raw[j] = b * r;
                    total += raw[j];
                    r *= 1.0 - b;
                }
                if !(total > 0.0) {
                    return f64::NEG_INFINITY;
                }
                weights.iter_mut().zip(&raw).for_each(|(o, v)| *o = v / total);
            }
        }
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }

        let mut g_weights = vec![0.0; w];
        let mut g_rows = vec![0.0; w * n];
        let mut g_c = 0.0;
        let mut scores = vec![0.0; w * n];
        let mut denoms = vec![0.0; w];
        let mut p = vec![0.0; n];
        let mut g_p = vec![0.0; n];
        for rec in &self.records {
            for j in 0..w {
                let l = &rows[j * n..(j + 1) * n];
                let denom: f64 = l.iter().zip(&rec.u).map(|(a, b)| a * b).sum();
                if !scores_into(l, &rec.u, &mut scores[j * n..(j + 1) * n]) {
                    return f64::NEG_INFINITY;
                }
                denoms[j] = denom;
            }
            mix_into(&weights, &scores, n, &mut p);
            g_p.iter_mut().for_each(|g| *g = 0.0);
            match cfg.likelihood {
                Likelihood::Dirichlet => {
                    if rec.support.len() == 1 {
                        continue;
                    }
                    let a_total = c * rec.support.iter().map(|&i| p[i]).sum::<f64>();
                    let psi_total = digamma(a_total);
                    lp += ln_gamma(a_total);
                    for (&i, &lx) in rec.support.iter().zip(&rec.log_x) {
                        let a = c * p[i];
                        if !(a > 0.0) {
                            return f64::NEG_INFINITY;
                        }
                        lp += (a - 1.0) * lx - ln_gamma(a);
                        let h = psi_total - digamma(a) + lx;
                        g_p[i] = c * h;
                        g_c += p[i] * h;
                    }
                }
                Likelihood::Multinomial => {
                    let ll = multinomial_log_pmf_unchecked(&rec.counts, rec.count_total, &p);
                    if !ll.is_finite() {
                        return f64::NEG_INFINITY;
                    }
                    lp += ll;
                    for (i, &k) in rec.counts.iter().enumerate() {
                        if k > 0 {
                            g_p[i] = k as f64 / p[i];
                        }
                    }
                }
            }
            for j in 0..w {
                let s = &scores[j * n..(j + 1) * n];
                let dot: f64 = s.iter().zip(&g_p).map(|(a, b)| a * b).sum();
                g_weights[j] += dot;
                let coef = weights[j] / denoms[j];
                for ((g, &gp), &u) in g_rows[j * n..(j + 1) * n].iter_mut().zip(&g_p).zip(&rec.u) {
                    *g += coef * u * (gp - dot);
                }
            }
        }

        grad[0] += g_c * c;
        match self.layout.variant {
            Variant::Naive if w == 1 => {}
            Variant::Naive => simplex_inverse_grad(&y[weight_range.clone()], &g_weights, &mut grad[weight_range]),
            Variant::Complete => {
                let centre: f64 = g_weights.iter().zip(&weights).map(|(g, v)| g * v).sum();
                let g_raw: Vec<f64> = g_weights.iter().map(|g| (g - centre) / total).collect();
                let alpha_idx = weight_range.start - 1;
                grad[alpha_idx] += w as f64 + alpha * beta.iter().map(|b| (-b).ln_1p()).sum::<f64>();
                let mut tail = 0.0;
                for j in (0..w).rev() {
                    let b = beta[j];
                    let g_beta = rest[j] * (g_raw[j] - tail);
                    grad[weight_range.start + j] += g_beta * b * (1.0 - b) - alpha * b + (1.0 - b);
                    tail = g_raw[j] * b + (1.0 - b) * tail;
                }
            }
        }
        for (j, range) in row_ranges.into_iter().enumerate() {
            simplex_inverse_grad(&y[range.clone()], &g_rows[j * n..(j + 1) * n], &mut grad[range]);
        }
        lp
    }
}

impl GradientTarget for ClusterTarget {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        BlockTarget::initial_point(self, rng)
    }

    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let lp = self.value_and_gradient(x, grad);
        if lp.is_finite() {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_posterior_unconstrained;
    use crate::simplex::AvailabilityVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset() -> Dataset {
        let u = vec![
            AvailabilityVector::new(vec![1.0, 1.0, 1.0]).unwrap(),
            AvailabilityVector::new(vec![1.0, 0.0, 1.0]).unwrap(),
            AvailabilityVector::new(vec![0.0, 1.0, 1.0]).unwrap(),
        ];
        let x = vec![vec![20.0, 30.0, 50.0], vec![60.0, 0.0, 40.0], vec![0.0, 100.0, 0.0]];
        Dataset::from_parts(u, x).unwrap()
    }

    /// Cached incremental evaluation must agree with the direct formula
    /// after an arbitrary sequence of block updates.
    #[test]
    fn cache_matches_direct_evaluation() {
        let data = toy_dataset();
        for variant in [Variant::Naive, Variant::Complete] {
            for likelihood in [Likelihood::Dirichlet, Likelihood::Multinomial] {
                let config = ModelConfig {
                    variant,
                    likelihood,
                    clusters: 3,
                    ..ModelConfig::default()
                };
                let target = ClusterTarget::new(&data, &config).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let mut x = BlockTarget::initial_point(&target, &mut rng);
                let (mut cache, mut lp) = target.initialize(&x);
                let direct = log_posterior_unconstrained(target.layout(), &x, &data, &config);
                assert!((lp - direct).abs() < 1e-8, "{lp} vs {direct}");
                for step in 0..60 {
                    let b = step % target.blocks().len();
                    let range = target.blocks()[b].clone();
                    let values: Vec<f64> = x[range.clone()]
                        .iter()
                        .map(|v| v + rng.random_range(-0.5..0.5))
                        .collect();
                    let proposed = target.propose(&mut cache, &x, b, &values);
                    let mut y = x.clone();
                    y[range.clone()].copy_from_slice(&values);
                    let direct = log_posterior_unconstrained(target.layout(), &y, &data, &config);
                    assert!((proposed - direct).abs() < 1e-8, "{variant:?} {likelihood:?} block {b}");
                    if step % 3 != 0 {
                        target.accept(&mut cache, b);
                        x = y;
                        lp = proposed;
                    }
                }
                let (_, fresh) = target.initialize(&x);
                assert!((fresh - lp).abs() < 1e-8);
            }
        }
    }

    /// The analytic gradient must match central finite differences and the
    /// value must match the direct posterior.
    #[test]
    fn gradient_matches_finite_differences() {
        let data = toy_dataset();
        for variant in [Variant::Naive, Variant::Complete] {
            for likelihood in [Likelihood::Dirichlet, Likelihood::Multinomial] {
                let config = ModelConfig {
                    variant,
                    likelihood,
                    clusters: 3,
                    ..ModelConfig::default()
                };
                let target = ClusterTarget::new(&data, &config).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                for _ in 0..5 {
                    let x: Vec<f64> = BlockTarget::initial_point(&target, &mut rng)
                        .iter()
                        .map(|v| v + rng.random_range(-1.0..1.0))
                        .collect();
                    let mut grad = vec![0.0; x.len()];
                    let lp = target.log_density_gradient(&x, &mut grad);
                    let direct = log_posterior_unconstrained(target.layout(), &x, &data, &config);
                    assert!((lp - direct).abs() < 1e-8, "{lp} vs {direct}");
                    let mut scratch = vec![0.0; x.len()];
                    for k in 0..x.len() {
                        let h = 1e-5;
                        let mut up = x.clone();
                        up[k] += h;
                        let mut down = x.clone();
                        down[k] -= h;
                        let fd = (target.log_density_gradient(&up, &mut scratch)
                            - target.log_density_gradient(&down, &mut scratch))
                            / (2.0 * h);
                        assert!(
                            (fd - grad[k]).abs() < 1e-4 * (1.0 + fd.abs()),
                            "{variant:?} {likelihood:?} coordinate {k}: {fd} vs {}",
                            grad[k]
                        );
                    }
                }
            }
        }
    }
}
