mod common;

use common::{load, random_shape, random_spec, scalar_spec};
use gdtre::model::{validate, ModelError, ProblemSpec, RiccatiData};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALL_VALID: &[&str] = &[
    "lqr_limb",
    "scalar_game",
    "scalar_game_noisy",
    "period2",
    "mjls_game",
    "periodic_mjls",
    "cross_weight",
    "no_convergence",
    "unstable_unobserved",
];

#[test]
fn fixtures_round_trip_byte_identical() {
    for name in ALL_VALID {
        let spec = load(name);
        let text = spec.to_canonical_string();
        let again = ProblemSpec::from_json_str(&text).unwrap();
        assert_eq!(again, spec, "{name}");
        assert_eq!(again.to_canonical_string(), text, "{name}");
    }
}

#[test]
fn valid_fixtures_have_empty_reports() {
    for name in ALL_VALID {
        let rep = validate(&load(name));
        assert!(rep.is_empty(), "{name}: {}", rep.to_json());
    }
}

#[test]
fn invalid_fixtures_name_their_violation() {
    let rep = validate(&load("negative_probability"));
    assert!(rep.has("H1b-negative-probability"), "{}", rep.to_json());
    let rep = validate(&load("negative_state_weight"));
    assert!(!rep.is_empty());
    assert!(rep.has("H4b-M-Schur"), "{}", rep.to_json());
}

#[test]
fn violations_carry_location_and_margin() {
    let rep = validate(&load("negative_probability"));
    let v = &rep.violations[0];
    assert!(v.t.is_some() && v.i.is_some());
    assert!(v.margin < 0.0);
}

#[test]
fn malformed_json_is_a_parse_error() {
    let err = ProblemSpec::from_path(common::fixture_path("malformed")).unwrap_err();
    assert!(matches!(err, ModelError::Parse(_)), "{err}");
    let err = ProblemSpec::from_json_str("{\"dims\": ").unwrap_err();
    assert!(err.to_string().contains("line"), "{err}");
}

#[test]
fn non_finite_entries_are_structural() {
    let text = load("scalar_game").to_canonical_string().replacen("1.0000000000000000e0", "1e400", 1);
    assert!(ProblemSpec::from_json_str(&text).is_err());
}

#[test]
fn scalar_trivial_spec_is_valid() {
    assert!(validate(&scalar_spec(1.0, 0.0, 1.0, 1.0, -1.0, 1.0)).is_empty());
}

#[test]
fn zero_r22_is_rejected() {
    let rep = validate(&scalar_spec(1.0, 1.0, 1.0, 1.0, -1.0, 0.0));
    assert!(rep.has("H4a-R22"), "{}", rep.to_json());
}

#[test]
fn digest_input_changes_with_content() {
    let a = load("scalar_game");
    let mut b = a.clone();
    b.weights.m[0][0][(0, 0)] += 1e-12;
    assert_ne!(a.to_canonical_string(), b.to_canonical_string());
}

fn inertia(r: &nalgebra::DMatrix<f64>) -> (usize, usize, usize) {
    let ev = r.clone().symmetric_eigenvalues();
    let tiny = 1e-12 * r.norm();
    let neg = ev.iter().filter(|&&v| v < -tiny).count();
    let pos = ev.iter().filter(|&&v| v > tiny).count();
    (neg, ev.len() - neg - pos, pos)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_specs_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng);
        let spec = random_spec(&mut rng, shape, 0.5);
        let text = spec.to_canonical_string();
        let again = ProblemSpec::from_json_str(&text).unwrap();
        prop_assert_eq!(again.to_canonical_string(), text);
    }

    #[test]
    fn validate_is_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng);
        let spec = random_spec(&mut rng, shape, 0.5);
        prop_assert_eq!(validate(&spec).to_json(), validate(&spec).to_json());
    }

    #[test]
    fn accepted_specs_have_the_game_inertia(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng);
        let spec = random_spec(&mut rng, shape, 0.5);
        prop_assert!(validate(&spec).is_empty());
        let (m1, m2) = (spec.dims.m1, spec.dims.m2);
        for t in 0..spec.dims.period {
            for i in 0..spec.dims.modes {
                let r = spec.weight_r(t, i);
                prop_assert_eq!(inertia(r), (m1, 0, m2));
                let r22 = r.view((m1, m1), (m2, m2)).clone_owned();
                prop_assert!(r22.try_inverse().is_some());
            }
        }
    }

    #[test]
    fn lookups_are_periodic(seed in any::<u64>(), t in 0usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng);
        let spec = random_spec(&mut rng, shape, 0.5);
        let p = spec.dims.period;
        prop_assert_eq!(spec.time_index(t), t % p);
        prop_assert_eq!(spec.a(t, 0, 0), spec.a(t + p, 0, 0));
        prop_assert_eq!(spec.transition(t), spec.transition(t + 3 * p));
    }
}
