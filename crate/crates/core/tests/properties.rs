use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use usertransfer::evaluation::{hdi, kmeans_preferences, reliability_curve, truncation_count};
use usertransfer::inference::{ChainSamples, PosteriorSamples, SamplerConfig};
use usertransfer::model::{Likelihood, ModelConfig, ModelParams};
use usertransfer::prediction::{draw_predictive, nominal_prediction, predictive_sd, shrink_samples, PredictiveSamples};
use usertransfer::simplex::{
    preference_score, proportion_vector, stick_breaking, AvailabilityVector, PreferenceMatrix, SimplexVector,
};
use usertransfer::simulator::{run_simulation, ScenarioConfig};
use usertransfer::transform::{simplex_forward, simplex_inverse};

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

/// Availability with at least one provider fully on.
fn availability(n: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(prop_oneof![Just(0.0), 0.0..=1.0f64], n), 0..n).prop_map(|(mut u, on)| {
        u[on] = 1.0;
        u
    })
}

fn sized<T: std::fmt::Debug>(f: impl Fn(usize) -> BoxedStrategy<T>) -> impl Strategy<Value = (usize, T)> {
    (2usize..7).prop_flat_map(move |n| (Just(n), f(n)))
}

fn assert_on_simplex(p: &[f64], u: &[f64]) {
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (pi, ui) in p.iter().zip(u) {
        assert!(*pi >= 0.0);
        if *ui == 0.0 {
            assert_eq!(*pi, 0.0);
        }
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

/// Brute-force HDI: every window of sorted samples holding at least
/// `ceil(mass * n)` samples, narrowest first, leftmost on ties.
fn hdi_exhaustive(samples: &[f64], mass: f64) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let k = (mass * n as f64 - 1e-9).ceil() as usize;
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..n {
        for j in i..n {
            if j - i + 1 >= k && s[j] - s[i] < best.0 {
                best = (s[j] - s[i], i, j);
            }
        }
    }
    (s[best.1], s[best.1] + best.0)
}

fn posterior_from(params: Vec<ModelParams>, likelihood: Likelihood, n: usize) -> PosteriorSamples {
    PosteriorSamples {
        model: ModelConfig {
            likelihood,
            ..ModelConfig::default()
        },
        sampler: SamplerConfig::default(),
        n_providers: n,
        dataset_fingerprint: None,
        chains: vec![ChainSamples {
            draws: params,
            ..ChainSamples::default()
        }],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preference_score_lies_on_simplex((n, (l, u)) in sized(|n| (simplex(n), availability(n)).boxed())) {
        let _ = n;
        let s = preference_score(&SimplexVector::new(l).unwrap(), &AvailabilityVector::new(u.clone()).unwrap()).unwrap();
        assert_on_simplex(&s, &u);
    }

    #[test]
    fn preference_score_ignores_availability_scale(
        (_, (l, u)) in sized(|n| (simplex(n), availability(n)).boxed()),
        k in 0.01..1.0f64,
    ) {
        let l = SimplexVector::new(l).unwrap();
        let a = preference_score(&l, &AvailabilityVector::new(u.clone()).unwrap()).unwrap();
        let scaled: Vec<f64> = u.iter().map(|v| v * k).collect();
        let b = preference_score(&l, &AvailabilityVector::new(scaled).unwrap()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn proportion_vector_lies_on_simplex(
        (n, (rows, u)) in sized(|n| (prop::collection::vec(simplex(n), 1..5), availability(n)).boxed()),
        seed in any::<u64>(),
    ) {
        let _ = n;
        let w: Vec<f64> = (0..rows.len()).map(|j| 1.0 + ((seed >> (j * 8)) & 0xff) as f64).collect();
        let total: f64 = w.iter().sum();
        let w = SimplexVector::new(w.iter().map(|v| v / total).collect()).unwrap();
        let p = proportion_vector(
            &PreferenceMatrix::from_rows(rows).unwrap(),
            &w,
            &AvailabilityVector::new(u.clone()).unwrap(),
        )
        .unwrap();
        assert_on_simplex(&p, &u);
    }

    #[test]
    fn stick_weights_and_remainder_sum_to_one(beta in prop::collection::vec(1e-6..1.0 - 1e-6, 1..40)) {
        let sw = stick_breaking(&beta).unwrap();
        prop_assert!((sw.weights.iter().sum::<f64>() + sw.remainder - 1.0).abs() < 1e-12);
        prop_assert!(sw.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn simplex_transform_round_trips_with_exact_jacobian(y in prop::collection::vec(-3.0..3.0f64, 1..6)) {
        let (x, log_jac) = simplex_inverse(&y);
        let back = simplex_forward(&x).unwrap();
        for (a, b) in y.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        let k = y.len();
        let h = 1e-6;
        let jac: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let mut up = y.clone();
                        up[j] += h;
                        let mut down = y.clone();
                        down[j] -= h;
                        (simplex_inverse(&up).0[i] - simplex_inverse(&down).0[i]) / (2.0 * h)
                    })
                    .collect()
            })
            .collect();
        let fd = determinant(jac).abs().ln();
        prop_assert!((fd - log_jac).abs() < 1e-5, "{} vs {}", fd, log_jac);
    }

    #[test]
    fn hdi_matches_exhaustive_search(
        samples in prop::collection::vec(prop_oneof![-50.0..50.0f64, (-5i32..5).prop_map(f64::from)], 10..300),
        mass in 0.01..0.99f64,
    ) {
        let ci = hdi(&samples, mass).unwrap();
        let (lo, hi) = hdi_exhaustive(&samples, mass);
        prop_assert_eq!(ci.lower, lo);
        prop_assert!((ci.upper - hi).abs() < 1e-12);
    }

    #[test]
    fn hdi_nests_for_unimodal_samples(
        n in 20usize..1000,
        loc in -10.0..10.0f64,
        scale in 0.1..10.0f64,
        lognormal in any::<bool>(),
        p_small in 0.05..0.9f64,
        gap in 0.01..0.09f64,
    ) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let z = normal.inverse_cdf((i as f64 + 0.5) / n as f64);
                if lognormal { (0.5 * z).exp() * scale } else { loc + scale * z }
            })
            .collect();
        let inner = hdi(&samples, p_small).unwrap();
        let outer = hdi(&samples, p_small + gap).unwrap();
        prop_assert!(outer.lower <= inner.lower && inner.upper <= outer.upper);
    }

    #[test]
    fn truncation_count_is_monotone_in_delta(
        beta in prop::collection::vec(0.01..0.99f64, 2..30),
        d1 in 1e-8..0.5f64,
        d2 in 1e-8..0.5f64,
    ) {
        let draws = vec![stick_breaking(&beta).unwrap()];
        let (small, large) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        let a = truncation_count(&draws, small).unwrap();
        let b = truncation_count(&draws, large).unwrap();
        prop_assert!(a.median >= b.median);
    }

    #[test]
    fn predictive_draws_conserve_load(
        (n, (rows, u)) in sized(|n| (prop::collection::vec(simplex(n), 1..4), availability(n)).boxed()),
        c in 1.0..500.0f64,
        total in 1.0..200.0f64,
        multinomial in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let w = vec![1.0 / rows.len() as f64; rows.len()];
        let total = if multinomial { total.round() } else { total };
        let params = ModelParams::naive(w, rows, c).unwrap();
        let likelihood = if multinomial { Likelihood::Multinomial } else { Likelihood::Dirichlet };
        let posterior = posterior_from(vec![params], likelihood, n);
        let u = AvailabilityVector::new(u).unwrap();
        let pred = draw_predictive(&posterior, 0, &u, total, 20, seed).unwrap();
        for d in &pred.draws {
            prop_assert!((d.iter().sum::<f64>() - total).abs() < 1e-6);
            for (x, a) in d.iter().zip(u.iter()) {
                prop_assert!(*x >= 0.0);
                if *a == 0.0 {
                    prop_assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn shrinkage_keeps_means_and_divides_spread(
        centre in simplex(4),
        noise in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 10..40),
        s in 1.0..5.0f64,
    ) {
        let total = 100.0;
        let draws: Vec<Vec<f64>> = noise
            .iter()
            .map(|e| {
                let mean_e = e.iter().sum::<f64>() / 4.0;
                centre.iter().zip(e).map(|(c, v)| c * total + 0.05 * (v - mean_e)).collect()
            })
            .collect();
        let pred = PredictiveSamples {
            scenario: 0,
            u: AvailabilityVector::all_on(4),
            total,
            draws,
            rejected: 0,
        };
        let shrunk = shrink_samples(&pred, s).unwrap();
        let (m0, m1) = (nominal_prediction(&pred.draws).unwrap(), nominal_prediction(&shrunk.draws).unwrap());
        let (s0, s1) = (predictive_sd(&pred.draws).unwrap(), predictive_sd(&shrunk.draws).unwrap());
        for i in 0..4 {
            prop_assert!((m0[i] - m1[i]).abs() < 1e-9);
            prop_assert!((s1[i] - s0[i] / s).abs() < 1e-9);
        }
    }

    /// Coverage can only grow with P when the HDIs nest, which holds for
    /// unimodal sample sets.
    #[test]
    fn reliability_is_monotone_in_nominal_coverage(
        truths in prop::collection::vec(0.0..100.0f64, 1..6),
        centres in prop::collection::vec(20.0..80.0f64, 6),
        scales in prop::collection::vec(1.0..15.0f64, 6),
    ) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let sets: Vec<PredictiveSamples> = (0..truths.len())
            .map(|k| PredictiveSamples {
                scenario: k,
                u: AvailabilityVector::all_on(2),
                total: 100.0,
                draws: (0..200)
                    .map(|i| {
                        let z = normal.inverse_cdf((i as f64 + 0.5) / 200.0);
                        let a = (centres[k] + scales[k] * z).clamp(0.0, 100.0);
                        vec![a, 100.0 - a]
                    })
                    .collect(),
                rejected: 0,
            })
            .collect();
        let truth_rows: Vec<Vec<f64>> = truths.iter().map(|t| vec![*t, 100.0 - t]).collect();
        let grid: Vec<f64> = (1..20).map(|k| k as f64 * 5.0).collect();
        let curve = reliability_curve(&sets, &truth_rows, &grid).unwrap();
        for pair in curve.points.windows(2) {
            prop_assert!(pair[0].empirical <= pair[1].empirical);
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(
        rows in prop::collection::vec(simplex(3), 6..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let res = kmeans_preferences(&rows, k, seed).unwrap();
        for pair in res.inertia_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulated_records_conserve_load(seed in any::<u64>(), users in 5usize..40, fractional in any::<bool>()) {
        let config = ScenarioConfig {
            n_providers: 5,
            n_users: users,
            total_steps: 2000,
            seed,
            state_period: fractional.then_some(25),
            ..ScenarioConfig::default()
        };
        let data = run_simulation(&config).unwrap();
        prop_assert_eq!(data.len(), config.dataset_size());
        for r in data.records() {
            prop_assert!((r.x.iter().sum::<f64>() - r.total).abs() < 1e-6);
            prop_assert!((r.total - users as f64).abs() < 1e-6);
            if !fractional {
                prop_assert!(r.u.iter().all(|v| *v == 0.0 || *v == 1.0));
            }
        }
    }
}
