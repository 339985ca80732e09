mod common;

use common::{load, scalar_spec};
use gdtre::cli::{default_horizon, finite_horizon_cost};
use gdtre::game::{equilibrium_pair, StrategyPair};
use gdtre::model::{GainSchedule, MarkovSpec, ProblemSpec};
use gdtre::riccati::{stabilizing_solve, SolveOptions};
use gdtre::sim::{empirical_decay, pairwise_sum, sample_chain, simulate, NoiseLaw, SimConfig, SimError};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use serde_json::json;

fn zero_pair(spec: &ProblemSpec) -> StrategyPair {
    let d = spec.dims;
    StrategyPair::StateFeedback {
        f1: GainSchedule::zeros(1, d.modes, d.m1, d.n),
        f2: GainSchedule::zeros(1, d.modes, d.m2, d.n),
    }
}

/// `x(1) = w(0)·x(0)`: the first step reads out one noise draw.
fn noise_readout() -> ProblemSpec {
    let doc = json!({
        "dims": {"n": 1, "m1": 1, "m2": 1, "r": 1, "N": 1, "period": 1},
        "markov": {"transitions": [[[1.0]]], "initial": [1.0]},
        "system": {"A": [[[[[0.0]], [[1.0]]]]], "B": [[[[[0.0, 0.0]], [[0.0, 0.0]]]]]},
        "weights": {"M": [[[[1.0]]]], "L": [[[[0.0, 0.0]]]], "R": [[[[-1.0, 0.0], [0.0, 1.0]]]]},
    });
    ProblemSpec::from_json_str(&doc.to_string()).unwrap()
}

fn one() -> DVector<f64> {
    DVector::from_element(1, 1.0)
}

fn readouts(law: NoiseLaw, count: usize, seed: u64) -> Vec<f64> {
    let spec = noise_readout();
    let cfg = SimConfig { noise_law: law, ..SimConfig::new(count, 1, seed) };
    let batch = simulate(&spec, &zero_pair(&spec), &one(), &cfg).unwrap();
    (0..count).map(|k| batch.state(k, 1)[0]).collect()
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
}

#[test]
fn batches_are_reproducible_across_thread_counts() {
    let spec = load("periodic_mjls");
    let sol = stabilizing_solve(&spec, &spec.tol, &SolveOptions::default()).unwrap();
    let pair = equilibrium_pair(&sol);
    let x0 = DVector::from_element(spec.dims.n, 1.0);
    let cfg = SimConfig::new(300, 25, 17);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| simulate(&spec, &pair, &x0, &cfg).unwrap())
    };
    let one_thread = run(1);
    assert_eq!(one_thread, run(4));
    assert_eq!(one_thread.cost_summary(), run(3).cost_summary());
    let other_seed = simulate(&spec, &pair, &x0, &SimConfig::new(300, 25, 18)).unwrap();
    assert_ne!(one_thread.costs, other_seed.costs);
}

#[test]
fn gaussian_noise_has_unit_moments() {
    let n = 100_000;
    let (mean, var) = mean_var(&readouts(NoiseLaw::Gaussian, n, 3));
    assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
    assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "{var}");
}

#[test]
fn rademacher_noise_is_a_fair_sign() {
    let n = 100_000;
    let draws = readouts(NoiseLaw::Rademacher, n, 4);
    assert!(draws.iter().all(|&w| w == 1.0 || w == -1.0));
    let (mean, _) = mean_var(&draws);
    assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
}

#[test]
fn antithetic_pairs_mirror_the_noise() {
    let spec = noise_readout();
    let cfg = SimConfig { antithetic: true, ..SimConfig::new(40, 3, 8) };
    let batch = simulate(&spec, &zero_pair(&spec), &one(), &cfg).unwrap();
    for k in 0..20 {
        assert_eq!(batch.state(2 * k, 1)[0], -batch.state(2 * k + 1, 1)[0]);
    }
    assert_eq!(batch.cost_summary().samples, 20);
}

#[test]
fn bad_configs_are_rejected() {
    let spec = noise_readout();
    let pair = zero_pair(&spec);
    let odd = SimConfig { antithetic: true, ..SimConfig::new(3, 2, 0) };
    assert!(matches!(simulate(&spec, &pair, &one(), &odd), Err(SimError::Config(_))));
    assert!(matches!(simulate(&spec, &pair, &one(), &SimConfig::new(4, 0, 0)), Err(SimError::Config(_))));
    assert!(matches!(simulate(&spec, &pair, &one(), &SimConfig::new(0, 4, 0)), Err(SimError::Config(_))));
    let wrong = DVector::from_element(2, 1.0);
    assert!(matches!(simulate(&spec, &pair, &wrong, &SimConfig::new(4, 4, 0)), Err(SimError::Config(_))));
}

#[test]
fn chain_examples() {
    let stay = MarkovSpec { transitions: vec![DMatrix::identity(3, 3)], initial: DVector::from_vec(vec![0.2, 0.3, 0.5]) };
    for path in sample_chain(&stay, 0, 12, 50, 1) {
        assert_eq!(path.len(), 13);
        assert!(path.iter().all(|&m| m == path[0]));
    }
    let swap = MarkovSpec {
        transitions: vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])],
        initial: DVector::from_vec(vec![1.0, 0.0]),
    };
    for path in sample_chain(&swap, 0, 9, 10, 2) {
        for (s, &m) in path.iter().enumerate() {
            assert_eq!(m, s % 2);
        }
    }
}

#[test]
fn fair_chain_visits_both_modes_equally() {
    let fair = MarkovSpec { transitions: vec![DMatrix::from_element(2, 2, 0.5)], initial: DVector::from_vec(vec![0.5, 0.5]) };
    let n = 100_000;
    let paths = sample_chain(&fair, 0, 1, n, 6);
    let ones = paths.iter().filter(|p| p[1] == 1).count() as f64;
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((ones - 0.5 * n as f64).abs() < 3.0 * sigma, "{ones}");
}

#[test]
fn deterministic_scalar_decay() {
    let spec = scalar_spec(0.5, 1.0, 1.0, 1.0, -5.0, 1.0);
    let batch = simulate(&spec, &zero_pair(&spec), &one(), &SimConfig::new(4, 10, 0)).unwrap();
    for (s, want) in [1.0, 0.5, 0.25, 0.125].iter().enumerate() {
        assert_eq!(batch.state(0, s)[0], *want);
    }
    let cost = batch.cost_summary();
    let want: f64 = (0..10).map(|s| 0.25f64.powi(s)).sum();
    assert!((cost.mean - want).abs() < 1e-14);
    assert_eq!(cost.std_error, 0.0);
    let decay = empirical_decay(&batch, 1, (0, 10)).unwrap();
    assert!((decay.slope - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((decay.per_mode[0].unwrap() - decay.slope).abs() < 1e-12);
}

#[test]
fn zero_start_has_nothing_to_decay() {
    let spec = scalar_spec(0.5, 1.0, 1.0, 1.0, -5.0, 1.0);
    let batch = simulate(&spec, &zero_pair(&spec), &DVector::zeros(1), &SimConfig::new(4, 10, 0)).unwrap();
    assert_eq!(empirical_decay(&batch, 1, (0, 5)), Err(SimError::InsufficientDecay));
    assert!(matches!(empirical_decay(&batch, 1, (5, 5)), Err(SimError::Config(_))));
    assert!(matches!(empirical_decay(&batch, 1, (0, 11)), Err(SimError::Config(_))));
}

#[test]
fn without_inputs_strategies_do_not_matter() {
    let spec = scalar_spec(0.9, 0.0, 0.0, 1.0, -5.0, 1.0);
    let other = StrategyPair::StateFeedback {
        f1: GainSchedule::constant(1, 1, DMatrix::from_element(1, 1, 3.0)),
        f2: GainSchedule::constant(1, 1, DMatrix::from_element(1, 1, -7.0)),
    };
    let cfg = SimConfig::new(8, 15, 2);
    let a = simulate(&spec, &zero_pair(&spec), &one(), &cfg).unwrap();
    let b = simulate(&spec, &other, &one(), &cfg).unwrap();
    assert_eq!(a.states, b.states);
}

#[test]
fn exploding_paths_are_flagged_not_fatal() {
    let spec = scalar_spec(10.0, 0.0, 0.0, 1.0, -5.0, 1.0);
    let batch = simulate(&spec, &zero_pair(&spec), &one(), &SimConfig::new(6, 40, 0)).unwrap();
    assert_eq!(batch.overflow_count(), 6);
    let summary = batch.cost_summary();
    assert_eq!((summary.samples, summary.overflowed), (0, 6));
    assert!(batch.costs.iter().all(|c| c.is_nan()));
}

#[test]
fn monte_carlo_matches_the_exact_finite_horizon_cost() {
    let spec = load("mjls_game");
    let sol = stabilizing_solve(&spec, &spec.tol, &SolveOptions::default()).unwrap();
    let pair = equilibrium_pair(&sol);
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let horizon = default_horizon(sol.rho_closed, sol.period());
    let exact = finite_horizon_cost(&spec, &pair, &x0, horizon);
    for antithetic in [false, true] {
        let cfg = SimConfig { antithetic, ..SimConfig::new(20_000, horizon, 21) };
        let summary = simulate(&spec, &pair, &x0, &cfg).unwrap().cost_summary();
        assert!((summary.mean - exact).abs() <= 3.0 * summary.std_error, "{} vs {exact} ± {}", summary.mean, summary.std_error);
    }
}

#[test]
fn moments_csv_has_a_column_per_mode() {
    let spec = load("mjls_game");
    let batch = simulate(&spec, &zero_pair(&spec), &DVector::from_element(2, 1.0), &SimConfig::new(10, 4, 0)).unwrap();
    let csv = batch.moments_csv(2);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,all,mode0,mode1");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,"));
}

proptest! {
    #[test]
    fn pairwise_sum_is_close_to_naive(v in prop::collection::vec(-1e6f64..1e6, 0..300)) {
        let naive: f64 = v.iter().sum();
        let scale: f64 = v.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((pairwise_sum(&v) - naive).abs() <= 1e-12 * scale);
    }

    #[test]
    fn pairwise_sum_of_integers_is_exact(v in prop::collection::vec(-1000i32..1000, 0..500)) {
        let want: i64 = v.iter().map(|&x| x as i64).sum();
        let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        prop_assert_eq!(pairwise_sum(&f), want as f64);
    }
}
