//! No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! a diagonal metric estimated in warmup windows and dual-averaging step
//! size adaptation.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use rand_chacha::ChaCha8Rng;

use super::sampler::{chain_rng, run_staged, ChainOutput, SamplerConfig};
use crate::error::{Error, Result};

/// A log density with its gradient.
pub trait GradientTarget: Sync {
    fn dim(&self) -> usize;

    fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Log density at `x`; the gradient is written into `grad`.
    fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// `rho` points along the trajectory in the direction of both end momenta.
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct Nuts<'a, T: GradientTarget, R: Rng> {
    target: &'a T,
    inv_metric: Vec<f64>,
    step: f64,
    max_depth: usize,
    rng: &'a mut R,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

/// Subtree summary shared with the caller.
struct Edge {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    rho: Vec<f64>,
}

impl<T: GradientTarget, R: Rng> Nuts<'_, T, R> {
    fn hamiltonian(&self, z: &Point) -> f64 {
        let kinetic: f64 = z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>() * 0.5;
        let h = -z.lp + kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(a, m)| a * m).collect()
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.target.log_density_gradient(&z.q, &mut z.grad);
        if !z.lp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.lp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Extends the trajectory by `2^depth` leapfrog steps from `z` in
    /// direction `sign`. Returns `false` on divergence or a U-turn.
    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        edge: &mut Edge,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step);
            self.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            self.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            z_propose.clone_from(z);
            edge.p_sharp_beg = self.p_sharp(&z.p);
            edge.p_sharp_end.clone_from(&edge.p_sharp_beg);
            add_into(&mut edge.rho, &z.p);
            edge.p_beg.clone_from(&z.p);
            edge.p_end.clone_from(&z.p);
            return !self.divergent;
        }
        let dim = z.q.len();
        let zeros = || vec![0.0; dim];

        let mut init = Edge {
            p_sharp_beg: zeros(),
            p_sharp_end: zeros(),
            p_beg: zeros(),
            p_end: zeros(),
            rho: zeros(),
        };
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build_tree(depth - 1, z, z_propose, &mut init, h0, sign, &mut lsw_init) {
            return false;
        }

        let mut z_final = z_propose.clone();
        let mut fin = Edge {
            p_sharp_beg: zeros(),
            p_sharp_end: zeros(),
            p_beg: zeros(),
            p_end: zeros(),
            rho: zeros(),
        };
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build_tree(depth - 1, z, &mut z_final, &mut fin, h0, sign, &mut lsw_final) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        let take_final = if lsw_final > lsw_subtree {
            true
        } else {
            self.rng.random::<f64>() < (lsw_final - lsw_subtree).exp()
        };
        if take_final {
            *z_propose = z_final;
        }

        let mut rho_subtree = init.rho.clone();
        add_into(&mut rho_subtree, &fin.rho);
        add_into(&mut edge.rho, &rho_subtree);

        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho_subtree);
        let mut rho_ext = init.rho.clone();
        add_into(&mut rho_ext, &fin.p_beg);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &rho_ext);
        let mut rho_ext = fin.rho.clone();
        add_into(&mut rho_ext, &init.p_end);
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &rho_ext);

        edge.p_sharp_beg = init.p_sharp_beg;
        edge.p_beg = init.p_beg;
        edge.p_sharp_end = fin.p_sharp_end;
        edge.p_end = fin.p_end;
        persist
    }

    /// One NUTS transition from `current`; returns the new point and the
    /// mean Metropolis acceptance probability over the trajectory.
    fn transition(&mut self, current: &Point) -> (Point, f64) {
        let dim = current.q.len();
        let mut z = current.clone();
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            *p = self.rng.sample::<f64, _>(StandardNormal) / m.sqrt();
        }
        self.n_leapfrog = 0;
        self.sum_metro_prob = 0.0;
        self.divergent = false;
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let ps = self.p_sharp(&z.p);
        let (mut p_fwd_bck, mut p_bck_fwd) = (z.p.clone(), z.p.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bck, mut ps_bck_fwd, mut ps_bck_bck) = (ps.clone(), ps.clone(), ps.clone(), ps);
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;

        for depth in 0..self.max_depth {
            let mut lsw_subtree = f64::NEG_INFINITY;
            let mut edge = Edge {
                p_sharp_beg: vec![0.0; dim],
                p_sharp_end: vec![0.0; dim],
                p_beg: vec![0.0; dim],
                p_end: vec![0.0; dim],
                rho: vec![0.0; dim],
            };
            let forward = self.rng.random::<f64>() > 0.5;
            let (rho_fwd, rho_bck);
            let valid = if forward {
                rho_bck = rho.clone();
                p_bck_fwd.clone_from(&p_fwd_bck);
                ps_bck_fwd.clone_from(&ps_fwd_bck);
                let ok = self.build_tree(depth, &mut z_fwd, &mut z_propose, &mut edge, h0, 1.0, &mut lsw_subtree);
                ps_fwd_bck = edge.p_sharp_beg;
                ps_fwd_fwd = edge.p_sharp_end;
                p_fwd_bck = edge.p_beg;
                rho_fwd = edge.rho;
                ok
            } else {
                rho_fwd = rho.clone();
                p_fwd_bck.clone_from(&p_bck_fwd);
                ps_fwd_bck.clone_from(&ps_bck_fwd);
                let ok = self.build_tree(depth, &mut z_bck, &mut z_propose, &mut edge, h0, -1.0, &mut lsw_subtree);
                ps_bck_fwd = edge.p_sharp_beg;
                ps_bck_bck = edge.p_sharp_end;
                p_bck_fwd = edge.p_beg;
                rho_bck = edge.rho;
                ok
            };
            if !valid {
                break;
            }
            if lsw_subtree > log_sum_weight || self.rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample.clone_from(&z_propose);
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            rho = rho_bck.clone();
            add_into(&mut rho, &rho_fwd);
            let mut persist = no_u_turn(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let mut ext = rho_bck.clone();
            add_into(&mut ext, &p_fwd_bck);
            persist &= no_u_turn(&ps_bck_bck, &ps_fwd_bck, &ext);
            let mut ext = rho_fwd.clone();
            add_into(&mut ext, &p_bck_fwd);
            persist &= no_u_turn(&ps_bck_fwd, &ps_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let accept = if self.n_leapfrog > 0 {
            self.sum_metro_prob / self.n_leapfrog as f64
        } else {
            0.0
        };
        (z_sample, accept)
    }
}

/// Dual averaging of `ln(step)` towards a target acceptance statistic.
struct DualAveraging {
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    delta: f64,
}

impl DualAveraging {
    fn new(step: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * step).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let x_eta = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running variance (Welford) for the diagonal metric.
struct Variance {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Variance {
    fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n as f64;
            *s += d * (v - *m);
        }
    }

    fn regularized(&self) -> Option<Vec<f64>> {
        if self.n < 3 {
            return None;
        }
        let n = self.n as f64;
        Some(
            self.m2
                .iter()
                .map(|s| (n / (n + 5.0)) * s / (n - 1.0) + 1e-3 * 5.0 / (n + 5.0))
                .collect(),
        )
    }
}

/// Doubles or halves the step until one leapfrog step crosses an
/// acceptance probability of 0.8.
fn initial_step<T: GradientTarget, R: Rng>(nuts: &mut Nuts<'_, T, R>, z0: &Point) {
    let mut z = z0.clone();
    for (p, m) in z.p.iter_mut().zip(&nuts.inv_metric) {
        *p = nuts.rng.sample::<f64, _>(StandardNormal) / m.sqrt();
    }
    let h0 = nuts.hamiltonian(&z);
    let mut probe = z.clone();
    nuts.leapfrog(&mut probe, nuts.step);
    let delta_h = h0 - nuts.hamiltonian(&probe);
    let direction = if delta_h > 0.8f64.ln() { 1.0 } else { -1.0 };
    for _ in 0..100 {
        let mut probe = z.clone();
        for (p, m) in probe.p.iter_mut().zip(&nuts.inv_metric) {
            *p = nuts.rng.sample::<f64, _>(StandardNormal) / m.sqrt();
        }
        let h0 = nuts.hamiltonian(&probe);
        nuts.leapfrog(&mut probe, nuts.step);
        let delta_h = h0 - nuts.hamiltonian(&probe);
        if direction > 0.0 && !(delta_h > 0.8f64.ln()) {
            break;
        }
        if direction < 0.0 && delta_h > 0.8f64.ln() {
            break;
        }
        nuts.step = if direction > 0.0 {
            nuts.step * 2.0
        } else {
            nuts.step * 0.5
        };
        if !(nuts.step > 1e-10 && nuts.step < 1e7) {
            break;
        }
        z = z0.clone();
    }
}

const MAX_INIT_ATTEMPTS: usize = 100;

fn start_point<T: GradientTarget>(target: &T, q: Vec<f64>) -> Option<Point> {
    let mut grad = vec![0.0; q.len()];
    let lp = target.log_density_gradient(&q, &mut grad);
    (lp.is_finite() && grad.iter().all(|g| g.is_finite())).then(|| Point {
        p: vec![0.0; q.len()],
        q,
        grad,
        lp,
    })
}

/// Runs one NUTS chain from a random initial point.
pub fn run_nuts_chain<T: GradientTarget>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainOutput> {
    nuts_chain(target, config, &mut chain_rng(config.base_seed, chain), None)
}

fn nuts_chain<T: GradientTarget>(
    target: &T,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    start: Option<Vec<f64>>,
) -> Result<ChainOutput> {
    let dim = target.dim();
    let mut current = if let Some(q) = start {
        start_point(target, q).ok_or(Error::NonFiniteDensity { attempts: 1 })?
    } else {
        let mut found = None;
        for _ in 0..MAX_INIT_ATTEMPTS {
            found = start_point(target, target.initial_point(rng));
            if found.is_some() {
                break;
            }
        }
        found.ok_or(Error::NonFiniteDensity {
            attempts: MAX_INIT_ATTEMPTS,
        })?
    };

    let (slow_start, window_ends) = config.adaptation_windows();
    let slow_end = window_ends.last().copied().unwrap_or(0);
    let mut nuts = Nuts {
        target,
        inv_metric: vec![1.0; dim],
        step: config.initial_step_scale,
        max_depth: config.max_tree_depth,
        rng,
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
    };
    initial_step(&mut nuts, &current);
    let mut averaging = DualAveraging::new(nuts.step, config.step_size_target);
    let mut variance = Variance::new(dim);

    let total_iters = config.n_warmup + config.n_draws * config.thin;
    let mut draws = Vec::with_capacity(config.n_draws);
    let mut log_density = Vec::with_capacity(config.n_draws);
    let mut accept_sum = 0.0;
    let mut transitions = 0u64;
    let mut divergent = 0u64;
    for iter in 0..total_iters {
        let warmup = iter < config.n_warmup;
        let (next, accept) = nuts.transition(&current);
        current = next;
        if warmup {
            nuts.step = averaging.update(accept);
            if iter >= slow_start && iter < slow_end {
                variance.push(&current.q);
                if window_ends.contains(&(iter + 1)) {
                    if let Some(v) = variance.regularized() {
                        nuts.inv_metric = v;
                    }
                    variance = Variance::new(dim);
                    initial_step(&mut nuts, &current);
                    averaging = DualAveraging::new(nuts.step, config.step_size_target);
                }
            }
            if iter + 1 == config.n_warmup {
                nuts.step = averaging.final_step();
            }
        } else {
            accept_sum += accept;
            transitions += 1;
            divergent += nuts.divergent as u64;
            if (iter - config.n_warmup + 1).is_multiple_of(config.thin) {
                draws.push(current.q.clone());
                log_density.push(current.lp);
            }
        }
    }
    let mean_accept = if transitions > 0 {
        accept_sum / transitions as f64
    } else {
        0.0
    };
    Ok(ChainOutput {
        draws,
        log_density,
        acceptance: vec![mean_accept],
        step_scales: vec![nuts.step],
        divergent,
    })
}

/// Runs `config.n_chains` NUTS chains in parallel threads, with the
/// exploration stage described on [`SamplerConfig::explore_iterations`].
pub fn run_nuts_chains<T: GradientTarget>(target: &T, config: &SamplerConfig) -> Result<Vec<ChainOutput>> {
    config.validate()?;
    run_staged(config, |cfg, rng, start| nuts_chain(target, cfg, rng, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    /// Correlated bivariate normal with unit variances.
    struct Correlated {
        rho: f64,
    }

    impl GradientTarget for Correlated {
        fn dim(&self) -> usize {
            2
        }

        fn initial_point(&self, rng: &mut dyn RngCore) -> Vec<f64> {
            vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]
        }

        fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let k = 1.0 / (1.0 - self.rho * self.rho);
            grad[0] = -k * (x[0] - self.rho * x[1]);
            grad[1] = -k * (x[1] - self.rho * x[0]);
            -0.5 * k * (x[0] * x[0] - 2.0 * self.rho * x[0] * x[1] + x[1] * x[1])
        }
    }

    #[test]
    fn recovers_correlated_gaussian_moments() {
        let target = Correlated { rho: 0.8 };
        let config = SamplerConfig {
            n_chains: 2,
            n_warmup: 500,
            n_draws: 5000,
            base_seed: 3,
            ..SamplerConfig::default()
        };
        let out = run_nuts_chains(&target, &config).unwrap();
        let draws: Vec<&Vec<f64>> = out.iter().flat_map(|o| o.draws.iter()).collect();
        let n = draws.len() as f64;
        let mean: Vec<f64> = (0..2).map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / n).collect();
        let cov = |a: usize, b: usize| draws.iter().map(|d| (d[a] - mean[a]) * (d[b] - mean[b])).sum::<f64>() / n;
        assert!(mean[0].abs() < 0.1 && mean[1].abs() < 0.1, "{mean:?}");
        assert!((cov(0, 0) - 1.0).abs() < 0.1);
        assert!((cov(1, 1) - 1.0).abs() < 0.1);
        assert!((cov(0, 1) - 0.8).abs() < 0.1);
        assert!(out.iter().all(|o| o.divergent == 0));
        assert!(out.iter().all(|o| o.acceptance[0] > 0.6));
    }

    #[test]
    fn chains_are_reproducible() {
        let target = Correlated { rho: 0.3 };
        let config = SamplerConfig {
            n_chains: 2,
            n_warmup: 100,
            n_draws: 50,
            ..SamplerConfig::default()
        };
        let a = run_nuts_chains(&target, &config).unwrap();
        let b = run_nuts_chains(&target, &config).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.draws, y.draws);
        }
        assert_ne!(a[0].draws, a[1].draws);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(f64::NEG_INFINITY, 1.5), 1.5);
        assert!((log_sum_exp(0.0, 0.0) - 2f64.ln()).abs() < 1e-12);
    }
}
