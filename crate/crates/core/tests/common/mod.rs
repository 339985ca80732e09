//! Shared fixtures and independent reference computations for the
//! integration tests. Nothing here calls the solver internals it checks.
#![allow(dead_code)]

use std::path::PathBuf;

use gdtre::model::{ProblemSpec, RiccatiData, SymTuple};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};

/// Fixtures on which the stabilizing solution exists.
pub const SOLVABLE: &[&str] = &[
    "lqr_limb",
    "scalar_game",
    "scalar_game_noisy",
    "period2",
    "mjls_game",
    "periodic_mjls",
    "cross_weight",
];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.json"))
}

pub fn load(name: &str) -> ProblemSpec {
    ProblemSpec::from_path(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// The Riccati map written out directly from its definition with a general
/// LU inverse.
pub fn reference_step(spec: &impl RiccatiData, t: usize, next: &SymTuple) -> Vec<DMatrix<f64>> {
    let (n, m) = (spec.state_dim(), spec.input_dim());
    let p = spec.transition(t);
    (0..spec.modes())
        .map(|i| {
            let mut e = DMatrix::zeros(n, n);
            for j in 0..spec.modes() {
                e += &next[j] * p[(i, j)];
            }
            let mut p1 = spec.weight_m(t, i).clone();
            let mut s = spec.weight_l(t, i).clone();
            let mut r = spec.weight_r(t, i).clone();
            for k in 0..=spec.noise_channels() {
                let a = spec.a(t, i, k);
                let b = spec.b(t, i, k);
                p1 += a.transpose() * &e * a;
                s += a.transpose() * &e * b;
                r += b.transpose() * &e * b;
            }
            let r_inv = r.clone().try_inverse().expect("R + Π₃ invertible");
            let x = p1 - &s * r_inv * s.transpose();
            assert_eq!(x.nrows(), n);
            assert_eq!(r.nrows(), m);
            (&x + x.transpose()) * 0.5
        })
        .collect()
}

/// Largest Frobenius residual of the periodic tuple `x` under the reference map.
pub fn reference_residual(spec: &impl RiccatiData, x: &[SymTuple]) -> f64 {
    let p = x.len();
    let mut worst: f64 = 0.0;
    for t in 0..p {
        let rhs = reference_step(spec, t, &x[(t + 1) % p]);
        for (i, r) in rhs.iter().enumerate() {
            worst = worst.max((&x[t][i] - r).norm());
        }
    }
    worst
}

/// Spectral radius of `Φ = M(p−1)···M(0)` built on all of `ℝ^{n×n}` with
/// Kronecker products, `vec(A X Aᵀ) = (A ⊗ A) vec X`, solved by a dense
/// eigen decomposition.
pub fn kron_spectral_radius(transitions: &[DMatrix<f64>], mats: &[Vec<Vec<DMatrix<f64>>>]) -> f64 {
    let modes = mats[0].len();
    let n = mats[0][0][0].nrows();
    let blk = n * n;
    let d = modes * blk;
    let mut phi = DMatrix::<f64>::identity(d, d);
    for (t, per_mode) in mats.iter().enumerate() {
        let mut step = DMatrix::zeros(d, d);
        for i in 0..modes {
            for j in 0..modes {
                let pji = transitions[t][(j, i)];
                if pji == 0.0 {
                    continue;
                }
                let mut acc = DMatrix::zeros(blk, blk);
                for a in &per_mode[j] {
                    acc += a.kronecker(a);
                }
                let mut view = step.view_mut((i * blk, j * blk), (blk, blk));
                view += acc * pji;
            }
        }
        phi = step * phi;
    }
    phi.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

pub fn max_abs_diff(a: &[SymTuple], b: &[SymTuple]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).amax()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

pub fn golden() -> f64 {
    (1.0 + 5f64.sqrt()) / 2.0
}

/// Fixed point of the scalar game map `x ↦ 1 + x − [x x] (R + x·11ᵀ)⁻¹ [x x]ᵀ`
/// with `R = diag(−5, 1)`, iterated with explicit 2×2 algebra.
pub fn scalar_game_fixed_point() -> f64 {
    let mut x = 0.0f64;
    for _ in 0..10_000 {
        let (a, b, c) = (-5.0 + x, x, 1.0 + x);
        let det = a * c - b * b;
        // [x x] adj [x x]ᵀ / det
        let quad = x * x * (c - 2.0 * b + a) / det;
        let next = 1.0 + x - quad;
        if (next - x).abs() < 1e-15 {
            return next;
        }
        x = next;
    }
    x
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_stochastic(rng: &mut ChaCha8Rng, modes: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(modes, modes, |_, _| rng.random::<f64>() + 0.05);
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = normal(rng, n, n, 1.0);
    (&g + g.transpose()) * 0.5
}

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = normal(rng, n, n, 1.0);
    &g * g.transpose()
}

pub fn random_tuple(rng: &mut ChaCha8Rng, modes: usize, n: usize) -> SymTuple {
    SymTuple::new((0..modes).map(|_| random_symmetric(rng, n)).collect())
}

pub fn random_psd_tuple(rng: &mut ChaCha8Rng, modes: usize, n: usize) -> SymTuple {
    SymTuple::new((0..modes).map(|_| random_psd(rng, n)).collect())
}

/// Sizes of a randomly drawn problem.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub r: usize,
    pub modes: usize,
    pub period: usize,
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape {
        n: rng.random_range(1..=3),
        m1: rng.random_range(1..=2),
        m2: rng.random_range(1..=2),
        r: rng.random_range(0..=2),
        modes: rng.random_range(1..=3),
        period: rng.random_range(1..=3),
    }
}

/// A spec satisfying the structural assumptions: positive chain entries,
/// `M − L₂R₂₂⁻¹L₂ᵀ ⪰ 0.1 I`, `R₂₂ ⪰ I` and a Schur complement `⪯ −I`.
pub fn random_spec(rng: &mut ChaCha8Rng, s: Shape, a_scale: f64) -> ProblemSpec {
    let m = s.m1 + s.m2;
    let per_phase = |rng: &mut ChaCha8Rng, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Value| -> Value {
        Value::Array((0..s.period).map(|_| Value::Array((0..s.modes).map(|_| f(rng)).collect())).collect())
    };
    let transitions: Vec<Value> =
        (0..s.period).map(|_| json!(rows_of(&random_stochastic(rng, s.modes)))).collect();
    let a = per_phase(rng, &mut |rng| {
        json!((0..=s.r).map(|k| rows_of(&normal(rng, s.n, s.n, if k == 0 { a_scale } else { 0.2 }))).collect::<Vec<_>>())
    });
    let b = per_phase(rng, &mut |rng| {
        json!((0..=s.r).map(|k| rows_of(&normal(rng, s.n, m, if k == 0 { 0.6 } else { 0.1 }))).collect::<Vec<_>>())
    });
    let grid = |rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> DMatrix<f64>| -> Vec<Vec<DMatrix<f64>>> {
        (0..s.period).map(|_| (0..s.modes).map(|_| f(rng)).collect()).collect()
    };
    let mut ms = grid(rng, &|rng| random_psd(rng, s.n) + DMatrix::identity(s.n, s.n) * 0.1);
    let ls = grid(rng, &|rng| normal(rng, s.n, m, 0.1));
    // R₂₂ ⪰ I, so adding L₂L₂ᵀ keeps M − L₂R₂₂⁻¹L₂ᵀ ⪰ 0.1 I
    for (mrow, lrow) in ms.iter_mut().zip(&ls) {
        for (mm, l) in mrow.iter_mut().zip(lrow) {
            let l2 = l.columns(s.m1, s.m2);
            *mm += &l2 * l2.transpose();
        }
    }
    let table = |g: &[Vec<DMatrix<f64>>]| json!(g.iter().map(|row| row.iter().map(rows_of).collect::<Vec<_>>()).collect::<Vec<_>>());
    let (mw, lw) = (table(&ms), table(&ls));
    let rw = per_phase(rng, &mut |rng| {
        let r22 = random_psd(rng, s.m2) * 0.5 + DMatrix::identity(s.m2, s.m2);
        let r12 = normal(rng, s.m1, s.m2, 0.3);
        let r22_inv = r22.clone().try_inverse().unwrap();
        let coupling = &r12 * &r22_inv * r12.transpose();
        let r11 = coupling - DMatrix::identity(s.m1, s.m1) * (2.0 + 3.0 * rng.random::<f64>());
        let mut r = DMatrix::zeros(m, m);
        r.view_mut((0, 0), (s.m1, s.m1)).copy_from(&r11);
        r.view_mut((0, s.m1), (s.m1, s.m2)).copy_from(&r12);
        r.view_mut((s.m1, 0), (s.m2, s.m1)).copy_from(&r12.transpose());
        r.view_mut((s.m1, s.m1), (s.m2, s.m2)).copy_from(&r22);
        json!(rows_of(&((&r + r.transpose()) * 0.5)))
    });
    let doc = json!({
        "dims": {"n": s.n, "m1": s.m1, "m2": s.m2, "r": s.r, "N": s.modes, "period": s.period},
        "markov": {"transitions": transitions, "initial": vec![1.0 / s.modes as f64; s.modes]},
        "system": {"A": a, "B": b},
        "weights": {"M": mw, "L": lw, "R": rw},
    });
    ProblemSpec::from_json_str(&doc.to_string()).expect("random spec parses")
}

/// Time-invariant scalar spec with one maximizer and one minimizer.
pub fn scalar_spec(a: f64, b1: f64, b2: f64, m: f64, r11: f64, r22: f64) -> ProblemSpec {
    let doc = json!({
        "dims": {"n": 1, "m1": 1, "m2": 1, "r": 0, "N": 1, "period": 1},
        "markov": {"transitions": [[[1.0]]], "initial": [1.0]},
        "system": {"A": [[[[[a]]]]], "B": [[[[[b1, b2]]]]]},
        "weights": {"M": [[[[m]]]], "L": [[[[0.0, 0.0]]]], "R": [[[[r11, 0.0], [0.0, r22]]]]},
    });
    ProblemSpec::from_json_str(&doc.to_string()).expect("scalar spec parses")
}
