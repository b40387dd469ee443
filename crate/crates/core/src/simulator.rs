//! Synthetic provider/user datasets.
//!
//! Providers sit uniformly in the unit square and switch on and off at
//! random. Users wander around a home point following an Ornstein–Uhlenbeck
//! process and always attach to the nearest active provider. Only aggregate
//! per-interval availability and load are recorded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::simplex::AvailabilityVector;

// independent generator streams per simulation concern
const STREAM_SCENARIO: u64 = 0;
const STREAM_SCHEDULE: u64 = 1;
const STREAM_MOTION: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_providers: usize,
    pub n_users: usize,
    /// Half-normal scale of per-user mobility.
    pub mobility_scale: f64,
    /// Half-normal scale of per-user reversion rate.
    pub reversion_scale: f64,
    /// Probability a provider is on after each redraw.
    pub on_probability: f64,
    /// Sampling steps per recording interval.
    pub toggle_period: usize,
    pub total_steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Steps between on/off redraws; must divide `toggle_period`.
    /// Defaults to `toggle_period`, which makes recorded availability binary.
    #[serde(default)]
    pub state_period: Option<usize>,
    /// When non-zero, user homes are scattered around this many centres
    /// instead of uniformly.
    #[serde(default)]
    pub home_clusters: usize,
    /// Standard deviation of homes around their centre.
    #[serde(default = "default_home_spread")]
    pub home_spread: f64,
}

fn default_home_spread() -> f64 {
    0.03
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_providers: 10,
            n_users: 100,
            mobility_scale: 0.1,
            reversion_scale: 1.0,
            on_probability: 0.5,
            toggle_period: 100,
            total_steps: 20_000,
            dt: 0.01,
            seed: 0,
            state_period: None,
            home_clusters: 0,
            home_spread: default_home_spread(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_providers < 2 {
            return fail("n_providers must be >= 2");
        }
        if self.n_users < 1 {
            return fail("n_users must be >= 1");
        }
        if !(self.mobility_scale > 0.0 && self.mobility_scale.is_finite()) {
            return fail("mobility_scale must be > 0");
        }
        if !(self.reversion_scale > 0.0 && self.reversion_scale.is_finite()) {
            return fail("reversion_scale must be > 0");
        }
        if !(self.on_probability > 0.0 && self.on_probability < 1.0) {
            return fail("on_probability must lie in (0, 1)");
        }
        if self.toggle_period < 1 {
            return fail("toggle_period must be >= 1");
        }
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(self.toggle_period) {
            return fail("total_steps must be a positive multiple of toggle_period");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt must be > 0");
        }
        let sp = self.state_period();
        if sp == 0 || !self.toggle_period.is_multiple_of(sp) {
            return fail("state_period must divide toggle_period");
        }
        if self.home_clusters > 0 && !(self.home_spread >= 0.0) {
            return fail("home_spread must be >= 0");
        }
        Ok(())
    }

    pub fn state_period(&self) -> usize {
        self.state_period.unwrap_or(self.toggle_period)
    }

    /// Number of recorded intervals.
    pub fn dataset_size(&self) -> usize {
        self.total_steps / self.toggle_period
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    fn dist2(&self, other: &Point) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub provider_positions: Vec<Point>,
    pub user_homes: Vec<Point>,
    pub user_mobility: Vec<f64>,
    pub user_reversion: Vec<f64>,
}

fn half_normal<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (z * scale).abs()
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let mut rng = config.rng(STREAM_SCENARIO);
    let uniform_point = |rng: &mut ChaCha8Rng| Point {
        x: rng.random::<f64>(),
        y: rng.random::<f64>(),
    };
    let provider_positions = (0..config.n_providers).map(|_| uniform_point(&mut rng)).collect();
    let user_homes = if config.home_clusters == 0 {
        (0..config.n_users).map(|_| uniform_point(&mut rng)).collect()
    } else {
        let centres: Vec<Point> = (0..config.home_clusters).map(|_| uniform_point(&mut rng)).collect();
        let jitter = Normal::new(0.0, config.home_spread).map_err(|e| Error::Config(e.to_string()))?;
        (0..config.n_users)
            .map(|_| {
                let c = centres[rng.random_range(0..centres.len())];
                Point {
                    x: (c.x + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                    y: (c.y + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                }
            })
            .collect()
    };
    let mut user_mobility = Vec::with_capacity(config.n_users);
    let mut user_reversion = Vec::with_capacity(config.n_users);
    for _ in 0..config.n_users {
        user_mobility.push(half_normal(config.mobility_scale, &mut rng));
        // a zero draw has probability zero but would break the update
        let mut theta = 0.0;
        while theta <= 0.0 {
            theta = half_normal(config.reversion_scale, &mut rng);
        }
        user_reversion.push(theta);
    }
    Ok(Scenario {
        provider_positions,
        user_homes,
        user_mobility,
        user_reversion,
    })
}

/// One exact OU update of every user position.
pub fn step_users<R: Rng + ?Sized>(
    positions: &[Point],
    scenario: &Scenario,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<Point>> {
    if scenario.user_reversion.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::domain("reversion rates must be > 0"));
    }
    let mut out = positions.to_vec();
    advance(&mut out, scenario, dt, rng);
    Ok(out)
}

fn advance<R: Rng + ?Sized>(positions: &mut [Point], scenario: &Scenario, dt: f64, rng: &mut R) {
    for (j, p) in positions.iter_mut().enumerate() {
        let home = scenario.user_homes[j];
        let theta = scenario.user_reversion[j];
        let sigma = scenario.user_mobility[j];
        let decay = (-theta * dt).exp();
        let sd = (sigma * sigma * (1.0 - (-2.0 * theta * dt).exp()) / (2.0 * theta)).sqrt();
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        p.x = home.x + (p.x - home.x) * decay + sd * ex;
        p.y = home.y + (p.y - home.y) * decay + sd * ey;
    }
}

/// Per-step on/off states, `total_steps` rows of `n_providers` flags.
pub fn availability_schedule<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Vec<Vec<bool>>> {
    config.validate()?;
    let period = config.state_period();
    let mut rows = Vec::with_capacity(config.total_steps);
    let mut state = vec![false; config.n_providers];
    for k in 0..config.total_steps {
        if k % period == 0 {
            loop {
                for s in state.iter_mut() {
                    *s = rng.random::<f64>() < config.on_probability;
                }
                if state.iter().any(|&s| s) {
                    break;
                }
            }
        }
        rows.push(state.clone());
    }
    Ok(rows)
}

/// Nearest active provider; ties go to the lowest index.
pub fn select_provider(position: &Point, scenario: &Scenario, active: &[bool]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, pos) in scenario.provider_positions.iter().enumerate() {
        if !active.get(i).copied().unwrap_or(false) {
            continue;
        }
        let d = position.dist2(pos);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::EmptyActiveSet)
}

/// Runs the full simulation and aggregates it into one record per interval.
pub fn run_simulation(config: &ScenarioConfig) -> Result<Dataset> {
    let scenario = generate_scenario(config)?;
    simulate_with(config, &scenario)
}

/// Runs the simulation for a given scenario layout.
pub fn simulate_with(config: &ScenarioConfig, scenario: &Scenario) -> Result<Dataset> {
    config.validate()?;
    let schedule = availability_schedule(config, &mut config.rng(STREAM_SCHEDULE))?;
    let mut motion = config.rng(STREAM_MOTION);
    let n = config.n_providers;
    let d = config.toggle_period;

    let mut positions = scenario.user_homes.clone();
    let mut counts = vec![0u64; n];
    let mut on_steps = vec![0u64; n];
    let mut loads = Vec::with_capacity(config.dataset_size());
    let mut availability = Vec::with_capacity(config.dataset_size());

    for (k, active) in schedule.iter().enumerate() {
        for p in &positions {
            counts[select_provider(p, scenario, active)?] += 1;
        }
        for (i, &on) in active.iter().enumerate() {
            on_steps[i] += on as u64;
        }
        advance(&mut positions, scenario, config.dt, &mut motion);

        if (k + 1) % d == 0 {
            loads.push(counts.iter().map(|&c| c as f64 / d as f64).collect::<Vec<_>>());
            availability.push(AvailabilityVector::new(
                on_steps.iter().map(|&c| c as f64 / d as f64).collect(),
            )?);
            counts.iter_mut().for_each(|c| *c = 0);
            on_steps.iter_mut().for_each(|c| *c = 0);
        }
    }
    Dataset::from_parts(availability, loads)
}
