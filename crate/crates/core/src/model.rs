//! Problem data: the system quadruple, the Markov chain, the weights and the
//! structural assumptions they must satisfy.
//!
//! Coefficient tables are periodic in time. Every lookup takes an absolute
//! time `t` and reduces it with [`time_index`], so a time-invariant problem is
//! simply `period = 1`.

use std::fmt;
use std::ops::{Add, Index, Mul, Sub};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::linalg::{self, from_rows, to_rows};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed problem file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape { what: String, expected: String, found: String },
    #[error("non-finite entry in {what}")]
    NonFinite { what: String },
    #[error("{what} is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { what: String, asymmetry: f64 },
    #[error("invalid dimensions: {0}")]
    Dims(String),
}

/// Reduces an absolute time to its phase in `[0, period)`.
pub fn time_index(period: usize, t: usize) -> usize {
    t % period
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub r: usize,
    #[serde(rename = "N")]
    pub modes: usize,
    pub period: usize,
}

impl Dims {
    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.n == 0 || self.m1 == 0 || self.m2 == 0 || self.modes == 0 || self.period == 0 {
            return Err(ModelError::Dims(format!(
                "n, m1, m2, N and period must all be >= 1 (got n={}, m1={}, m2={}, N={}, period={})",
                self.n, self.m1, self.m2, self.modes, self.period
            )));
        }
        Ok(())
    }
}

/// Numerical thresholds used across the solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct ToleranceConfig {
    /// Relative change between iterates one period apart that stops the
    /// Riccati iteration.
    pub convergence: f64,
    /// A spectral radius must be below `1 − stability_margin`.
    pub stability_margin: f64,
    /// Largest accepted relative asymmetry of symmetric inputs.
    pub symmetrization: f64,
    /// Row sums of transition matrices may deviate from 1 by this much.
    pub probability: f64,
    /// Cap on the number of periods swept by iterative solvers.
    pub max_sweeps: usize,
    /// Smallest accepted reciprocal condition number of `R + Π₃[X]`.
    pub min_rcond: f64,
    /// Sign-condition margins must exceed this to count.
    pub sign_margin: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            convergence: 1e-10,
            stability_margin: 1e-7,
            symmetrization: 1e-10,
            probability: 1e-10,
            max_sweeps: 100_000,
            min_rcond: 1e-12,
            sign_margin: 1e-10,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    convergence: Option<f64>,
    stability_margin: Option<f64>,
    symmetrization: Option<f64>,
    probability: Option<f64>,
    max_sweeps: Option<usize>,
    min_rcond: Option<f64>,
    sign_margin: Option<f64>,
}

impl RawTolerances {
    fn resolve(self) -> Result<ToleranceConfig, ModelError> {
        let d = ToleranceConfig::default();
        let tol = ToleranceConfig {
            convergence: self.convergence.unwrap_or(d.convergence),
            stability_margin: self.stability_margin.unwrap_or(d.stability_margin),
            symmetrization: self.symmetrization.unwrap_or(d.symmetrization),
            probability: self.probability.unwrap_or(d.probability),
            max_sweeps: self.max_sweeps.unwrap_or(d.max_sweeps),
            min_rcond: self.min_rcond.unwrap_or(d.min_rcond),
            sign_margin: self.sign_margin.unwrap_or(d.sign_margin),
        };
        for (name, v) in [
            ("convergence", tol.convergence),
            ("stability_margin", tol.stability_margin),
            ("symmetrization", tol.symmetrization),
            ("probability", tol.probability),
            ("min_rcond", tol.min_rcond),
            ("sign_margin", tol.sign_margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::Dims(format!("tolerance {name} must be finite and >= 0")));
            }
        }
        if tol.max_sweeps == 0 {
            return Err(ModelError::Dims("max_sweeps must be >= 1".into()));
        }
        Ok(tol)
    }
}

/// An N-tuple of symmetric n×n matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTuple(Vec<DMatrix<f64>>);

impl SymTuple {
    /// Builds a tuple, replacing every entry by its symmetric part.
    pub fn new(entries: Vec<DMatrix<f64>>) -> Self {
        SymTuple(entries.iter().map(linalg::symmetrize).collect())
    }

    pub fn zeros(modes: usize, n: usize) -> Self {
        SymTuple(vec![DMatrix::zeros(n, n); modes])
    }

    pub fn identity(modes: usize, n: usize) -> Self {
        SymTuple(vec![DMatrix::identity(n, n); modes])
    }

    pub fn modes(&self) -> usize {
        self.0.len()
    }

    pub fn dim(&self) -> usize {
        self.0.first().map_or(0, |m| m.nrows())
    }

    pub fn entries(&self) -> &[DMatrix<f64>] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.0.iter()
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> SymTuple {
        SymTuple::new(self.0.iter().map(f).collect())
    }

    /// `⟨X, Y⟩ = Σᵢ Tr[X(i) Y(i)]`.
    pub fn inner(&self, other: &SymTuple) -> f64 {
        self.0.iter().zip(&other.0).map(|(x, y)| x.component_mul(y).sum()).sum()
    }

    /// Norm induced by [`SymTuple::inner`].
    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// Largest Frobenius norm over the modes.
    pub fn max_norm(&self) -> f64 {
        self.0.iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    /// Smallest eigenvalue over all modes.
    pub fn min_eig(&self) -> f64 {
        self.0.iter().map(linalg::min_eig).fold(f64::INFINITY, f64::min)
    }

    pub fn max_eig(&self) -> f64 {
        self.0.iter().map(linalg::max_eig).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&self, s: f64) -> SymTuple {
        SymTuple(self.0.iter().map(|x| x * s).collect())
    }

    pub fn to_json(&self) -> Value {
        Value::Array(self.0.iter().map(matrix_json).collect())
    }
}

impl Index<usize> for SymTuple {
    type Output = DMatrix<f64>;
    fn index(&self, i: usize) -> &DMatrix<f64> {
        &self.0[i]
    }
}

impl Add for &SymTuple {
    type Output = SymTuple;
    fn add(self, rhs: &SymTuple) -> SymTuple {
        SymTuple(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &SymTuple {
    type Output = SymTuple;
    fn sub(self, rhs: &SymTuple) -> SymTuple {
        SymTuple(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Mul<f64> for &SymTuple {
    type Output = SymTuple;
    fn mul(self, s: f64) -> SymTuple {
        self.scale(s)
    }
}

/// Feedback matrices indexed by phase and mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSchedule(Vec<Vec<DMatrix<f64>>>);

impl GainSchedule {
    /// `gains[phase][mode]`.
    pub fn new(gains: Vec<Vec<DMatrix<f64>>>) -> Self {
        assert!(!gains.is_empty(), "gain schedule needs at least one phase");
        GainSchedule(gains)
    }

    pub fn constant(period: usize, modes: usize, gain: DMatrix<f64>) -> Self {
        GainSchedule(vec![vec![gain; modes]; period])
    }

    pub fn zeros(period: usize, modes: usize, rows: usize, cols: usize) -> Self {
        Self::constant(period, modes, DMatrix::zeros(rows, cols))
    }

    pub fn period(&self) -> usize {
        self.0.len()
    }

    pub fn modes(&self) -> usize {
        self.0[0].len()
    }

    /// Gain at absolute time `t`.
    pub fn at(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.0[time_index(self.0.len(), t)][i]
    }

    pub fn phases(&self) -> &[Vec<DMatrix<f64>>] {
        &self.0
    }

    pub fn map(&self, f: impl Fn(usize, usize, &DMatrix<f64>) -> DMatrix<f64>) -> GainSchedule {
        GainSchedule(
            self.0
                .iter()
                .enumerate()
                .map(|(t, row)| row.iter().enumerate().map(|(i, g)| f(t, i, g)).collect())
                .collect(),
        )
    }

    pub fn zip_map(
        &self,
        other: &GainSchedule,
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> GainSchedule {
        let period = self.period().max(other.period());
        GainSchedule(
            (0..period)
                .map(|t| (0..self.modes()).map(|i| f(self.at(t, i), other.at(t, i))).collect())
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().map(|g| g.amax()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.0.iter().map(|row| Value::Array(row.iter().map(matrix_json).collect())).collect(),
        )
    }

    pub fn from_json(value: &Value, rows: usize, cols: usize, modes: usize) -> Result<Self, ModelError> {
        let raw: Vec<Vec<Vec<Vec<f64>>>> = serde_json::from_value(value.clone())?;
        if raw.is_empty() {
            return Err(ModelError::Shape {
                what: "gain schedule".into(),
                expected: "at least one phase".into(),
                found: "0".into(),
            });
        }
        let mut phases = Vec::with_capacity(raw.len());
        for (t, row) in raw.iter().enumerate() {
            check_len(&format!("gains[{t}]"), row.len(), modes)?;
            let mut mats = Vec::with_capacity(modes);
            for (i, m) in row.iter().enumerate() {
                mats.push(parse_matrix(&format!("gains[{t}][{i}]"), m, rows, cols)?);
            }
            phases.push(mats);
        }
        Ok(GainSchedule(phases))
    }
}

pub fn matrix_json(x: &DMatrix<f64>) -> Value {
    Value::Array(
        to_rows(x)
            .into_iter()
            .map(|row| Value::Array(row.into_iter().map(canonical::num).collect()))
            .collect(),
    )
}

/// Transition matrices (one per phase) and the initial mode distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSpec {
    pub transitions: Vec<DMatrix<f64>>,
    pub initial: DVector<f64>,
}

impl MarkovSpec {
    pub fn transition(&self, t: usize) -> &DMatrix<f64> {
        &self.transitions[time_index(self.transitions.len(), t)]
    }

    /// Mode distribution at time `t`, propagated by `π_{s+1} = π_s P_s`.
    pub fn distribution_at(&self, t: usize) -> DVector<f64> {
        let mut pi = self.initial.clone();
        for s in 0..t {
            pi = self.transition(s).tr_mul(&pi);
        }
        pi
    }
}

/// `A[t][i][k]` and `B[t][i][k]` for phase t, mode i, noise channel k (0 is the drift).
#[derive(Clone, Debug, PartialEq)]
pub struct SystemCoeffs {
    pub a: Vec<Vec<Vec<DMatrix<f64>>>>,
    pub b: Vec<Vec<Vec<DMatrix<f64>>>>,
}

/// Quadratic weights `Q = [M L; Lᵀ R]` indexed `[t][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightCoeffs {
    pub m: Vec<Vec<DMatrix<f64>>>,
    pub l: Vec<Vec<DMatrix<f64>>>,
    pub r: Vec<Vec<DMatrix<f64>>>,
    pub rho1: f64,
    pub rho2: f64,
}

/// Read access to the coefficients of a generalized Riccati equation.
///
/// Implemented by [`ProblemSpec`] and by closed-loop constructions, so that
/// the Riccati engine runs unchanged on both.
pub trait RiccatiData {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Leading inputs that play the maximizing role; the remaining ones
    /// minimize.
    fn maximizer_dim(&self) -> usize;
    fn noise_channels(&self) -> usize;
    fn modes(&self) -> usize;
    fn period(&self) -> usize;
    fn transition(&self, t: usize) -> &DMatrix<f64>;
    fn a(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64>;
    fn b(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64>;
    fn weight_m(&self, t: usize, i: usize) -> &DMatrix<f64>;
    fn weight_l(&self, t: usize, i: usize) -> &DMatrix<f64>;
    fn weight_r(&self, t: usize, i: usize) -> &DMatrix<f64>;

    fn phase(&self, t: usize) -> usize {
        time_index(self.period(), t)
    }

    /// `Q(t,i) = [M L; Lᵀ R]`.
    fn weight_q(&self, t: usize, i: usize) -> DMatrix<f64> {
        let top = linalg::hstack(self.weight_m(t, i), self.weight_l(t, i));
        let bottom = linalg::hstack(&self.weight_l(t, i).transpose(), self.weight_r(t, i));
        linalg::vstack(&top, &bottom)
    }
}

/// The full problem: dimensions, chain, system, weights, tolerances.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub markov: MarkovSpec,
    pub system: SystemCoeffs,
    pub weights: WeightCoeffs,
    pub tol: ToleranceConfig,
}

impl RiccatiData for ProblemSpec {
    fn state_dim(&self) -> usize {
        self.dims.n
    }
    fn input_dim(&self) -> usize {
        self.dims.m()
    }
    fn maximizer_dim(&self) -> usize {
        self.dims.m1
    }
    fn noise_channels(&self) -> usize {
        self.dims.r
    }
    fn modes(&self) -> usize {
        self.dims.modes
    }
    fn period(&self) -> usize {
        self.dims.period
    }
    fn transition(&self, t: usize) -> &DMatrix<f64> {
        self.markov.transition(t)
    }
    fn a(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64> {
        &self.system.a[self.phase(t)][i][k]
    }
    fn b(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64> {
        &self.system.b[self.phase(t)][i][k]
    }
    fn weight_m(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.weights.m[self.phase(t)][i]
    }
    fn weight_l(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.weights.l[self.phase(t)][i]
    }
    fn weight_r(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.weights.r[self.phase(t)][i]
    }
}

impl ProblemSpec {
    pub fn time_index(&self, t: usize) -> usize {
        time_index(self.dims.period, t)
    }

    /// Player-1 columns `B_{k1}`.
    pub fn b1(&self, t: usize, i: usize, k: usize) -> DMatrix<f64> {
        linalg::cols(self.b(t, i, k), 0, self.dims.m1)
    }

    /// Player-2 columns `B_{k2}`.
    pub fn b2(&self, t: usize, i: usize, k: usize) -> DMatrix<f64> {
        linalg::cols(self.b(t, i, k), self.dims.m1, self.dims.m2)
    }

    pub fn l1(&self, t: usize, i: usize) -> DMatrix<f64> {
        linalg::cols(self.weight_l(t, i), 0, self.dims.m1)
    }

    pub fn l2(&self, t: usize, i: usize) -> DMatrix<f64> {
        linalg::cols(self.weight_l(t, i), self.dims.m1, self.dims.m2)
    }

    /// `(R₁₁, R₁₂, R₂₂)`.
    pub fn r_blocks(&self, t: usize, i: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        split_blocks(self.weight_r(t, i), self.dims.m1)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let raw: RawProblem = serde_json::from_str(text)?;
        raw.into_spec()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Value {
        let nested = |tab: &Vec<Vec<DMatrix<f64>>>| {
            Value::Array(tab.iter().map(|row| Value::Array(row.iter().map(matrix_json).collect())).collect())
        };
        let nested3 = |tab: &Vec<Vec<Vec<DMatrix<f64>>>>| {
            Value::Array(
                tab.iter()
                    .map(|row| {
                        Value::Array(
                            row.iter().map(|ch| Value::Array(ch.iter().map(matrix_json).collect())).collect(),
                        )
                    })
                    .collect(),
            )
        };
        json!({
            "dims": serde_json::to_value(self.dims).unwrap(),
            "markov": {
                "transitions": Value::Array(self.markov.transitions.iter().map(matrix_json).collect()),
                "initial": Value::Array(self.markov.initial.iter().map(|&v| canonical::num(v)).collect()),
            },
            "system": { "A": nested3(&self.system.a), "B": nested3(&self.system.b) },
            "weights": {
                "M": nested(&self.weights.m),
                "L": nested(&self.weights.l),
                "R": nested(&self.weights.r),
                "rho1": canonical::num(self.weights.rho1),
                "rho2": canonical::num(self.weights.rho2),
            },
            "tolerances": {
                "convergence": canonical::num(self.tol.convergence),
                "stability_margin": canonical::num(self.tol.stability_margin),
                "symmetrization": canonical::num(self.tol.symmetrization),
                "probability": canonical::num(self.tol.probability),
                "max_sweeps": self.tol.max_sweeps,
                "min_rcond": canonical::num(self.tol.min_rcond),
                "sign_margin": canonical::num(self.tol.sign_margin),
            },
        })
    }

    /// Canonical text: sorted keys, 17-significant-digit floats.
    pub fn to_canonical_string(&self) -> String {
        canonical::to_string_pretty(&self.to_json())
    }
}

/// Splits a symmetric `m×m` matrix at `m1` into `(X₁₁, X₁₂, X₂₂)`.
pub fn split_blocks(x: &DMatrix<f64>, m1: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = x.nrows();
    let m2 = m - m1;
    (
        x.view((0, 0), (m1, m1)).into_owned(),
        x.view((0, m1), (m1, m2)).into_owned(),
        x.view((m1, m1), (m2, m2)).into_owned(),
    )
}

type RawMatrix = Vec<Vec<f64>>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    dims: Dims,
    markov: RawMarkov,
    system: RawSystem,
    weights: RawWeights,
    #[serde(default)]
    tolerances: RawTolerances,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarkov {
    transitions: Vec<RawMatrix>,
    initial: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(rename = "A")]
    a: Vec<Vec<Vec<RawMatrix>>>,
    #[serde(rename = "B")]
    b: Vec<Vec<Vec<RawMatrix>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    #[serde(rename = "M")]
    m: Vec<Vec<RawMatrix>>,
    #[serde(rename = "L")]
    l: Vec<Vec<RawMatrix>>,
    #[serde(rename = "R")]
    r: Vec<Vec<RawMatrix>>,
    rho1: Option<f64>,
    rho2: Option<f64>,
}

fn check_len(what: &str, found: usize, expected: usize) -> Result<(), ModelError> {
    if found != expected {
        return Err(ModelError::Shape { what: what.into(), expected: expected.to_string(), found: found.to_string() });
    }
    Ok(())
}

fn parse_matrix(what: &str, raw: &RawMatrix, rows: usize, cols: usize) -> Result<DMatrix<f64>, ModelError> {
    let shape_err = |found: String| ModelError::Shape { what: what.into(), expected: format!("{rows}x{cols}"), found };
    if raw.len() != rows {
        return Err(shape_err(format!("{} rows", raw.len())));
    }
    if let Some(bad) = raw.iter().find(|row| row.len() != cols) {
        return Err(shape_err(format!("a row of length {}", bad.len())));
    }
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { what: what.into() });
    }
    Ok(from_rows(raw))
}

fn parse_symmetric(what: &str, raw: &RawMatrix, dim: usize, tol: f64) -> Result<DMatrix<f64>, ModelError> {
    let x = parse_matrix(what, raw, dim, dim)?;
    let asym = linalg::asymmetry(&x);
    if asym > tol {
        return Err(ModelError::NotSymmetric { what: what.into(), asymmetry: asym });
    }
    Ok(linalg::symmetrize(&x))
}

fn parse_table(
    what: &str,
    raw: &[Vec<RawMatrix>],
    dims: &Dims,
    parse: impl Fn(&str, &RawMatrix) -> Result<DMatrix<f64>, ModelError>,
) -> Result<Vec<Vec<DMatrix<f64>>>, ModelError> {
    check_len(what, raw.len(), dims.period)?;
    raw.iter()
        .enumerate()
        .map(|(t, row)| {
            check_len(&format!("{what}[{t}]"), row.len(), dims.modes)?;
            row.iter().enumerate().map(|(i, m)| parse(&format!("{what}[{t}][{i}]"), m)).collect()
        })
        .collect()
}

fn parse_channels(
    what: &str,
    raw: &[Vec<Vec<RawMatrix>>],
    dims: &Dims,
    cols: usize,
) -> Result<Vec<Vec<Vec<DMatrix<f64>>>>, ModelError> {
    check_len(what, raw.len(), dims.period)?;
    raw.iter()
        .enumerate()
        .map(|(t, row)| {
            check_len(&format!("{what}[{t}]"), row.len(), dims.modes)?;
            row.iter()
                .enumerate()
                .map(|(i, chans)| {
                    check_len(&format!("{what}[{t}][{i}]"), chans.len(), dims.r + 1)?;
                    chans
                        .iter()
                        .enumerate()
                        .map(|(k, m)| parse_matrix(&format!("{what}[{t}][{i}][{k}]"), m, dims.n, cols))
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Rescales a probability vector whose sum is within `tol` of one. Sums
/// already within a few ulps are left untouched so that the operation is
/// idempotent.
fn renormalize(v: &mut [f64], tol: f64) {
    if v.iter().any(|&p| p < 0.0) {
        return;
    }
    let s: f64 = v.iter().sum();
    let dev = (s - 1.0).abs();
    if dev <= tol && dev > 1e-13 {
        v.iter_mut().for_each(|p| *p /= s);
    }
}

impl RawProblem {
    fn into_spec(self) -> Result<ProblemSpec, ModelError> {
        let dims = self.dims;
        dims.check()?;
        let tol = self.tolerances.resolve()?;
        let (n, m, nm) = (dims.n, dims.m(), dims.modes);

        check_len("markov.transitions", self.markov.transitions.len(), dims.period)?;
        let mut transitions = Vec::with_capacity(dims.period);
        for (t, raw) in self.markov.transitions.iter().enumerate() {
            let mut p = parse_matrix(&format!("markov.transitions[{t}]"), raw, nm, nm)?;
            for i in 0..nm {
                let mut row: Vec<f64> = p.row(i).iter().copied().collect();
                renormalize(&mut row, tol.probability);
                for (j, v) in row.into_iter().enumerate() {
                    p[(i, j)] = v;
                }
            }
            transitions.push(p);
        }
        check_len("markov.initial", self.markov.initial.len(), nm)?;
        if self.markov.initial.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { what: "markov.initial".into() });
        }
        let mut initial = self.markov.initial.clone();
        renormalize(&mut initial, tol.probability);

        let a = parse_channels("system.A", &self.system.a, &dims, n)?;
        let b = parse_channels("system.B", &self.system.b, &dims, m)?;
        let sym = tol.symmetrization;
        let wm = parse_table("weights.M", &self.weights.m, &dims, |w, x| parse_symmetric(w, x, n, sym))?;
        let wl = parse_table("weights.L", &self.weights.l, &dims, |w, x| parse_matrix(w, x, n, m))?;
        let wr = parse_table("weights.R", &self.weights.r, &dims, |w, x| parse_symmetric(w, x, m, sym))?;
        let rho1 = self.weights.rho1.unwrap_or(1e-8);
        let rho2 = self.weights.rho2.unwrap_or(1e-8);
        if !(rho1.is_finite() && rho2.is_finite()) {
            return Err(ModelError::NonFinite { what: "weights.rho".into() });
        }

        Ok(ProblemSpec {
            dims,
            markov: MarkovSpec { transitions, initial: DVector::from_vec(initial) },
            system: SystemCoeffs { a, b },
            weights: WeightCoeffs { m: wm, l: wl, r: wr, rho1, rho2 },
            tol,
        })
    }
}

/// One violated assumption.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
    pub t: Option<usize>,
    pub i: Option<usize>,
    /// Signed amount by which the condition fails.
    pub margin: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)?;
        if let Some(t) = self.t {
            write!(f, " at t={t}")?;
        }
        if let Some(i) = self.i {
            write!(f, " mode={i}")?;
        }
        write!(f, " (margin {:.3e})", self.margin)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn to_json(&self) -> Value {
        Value::Array(
            self.violations
                .iter()
                .map(|v| {
                    json!({
                        "code": v.code,
                        "message": v.message,
                        "t": v.t,
                        "mode": v.i,
                        "margin": canonical::num(v.margin),
                    })
                })
                .collect(),
        )
    }
}

/// Checks the structural assumptions on the chain and the weights.
///
/// The report is empty iff every transition matrix is a nondegenerate
/// stochastic matrix, the initial distribution charges every mode, and the
/// weights satisfy the three sign conditions with margins `rho1`, `rho2`.
pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut out = Vec::new();
    let tol = &spec.tol;
    let nm = spec.dims.modes;

    for (t, p) in spec.markov.transitions.iter().enumerate() {
        for i in 0..nm {
            for j in 0..nm {
                if p[(i, j)] < 0.0 {
                    out.push(Violation {
                        code: "H1b-negative-probability",
                        message: format!("H1 b) negative transition probability p({i},{j})"),
                        t: Some(t),
                        i: Some(i),
                        margin: p[(i, j)],
                    });
                }
            }
            let s: f64 = p.row(i).sum();
            if (s - 1.0).abs() > tol.probability {
                out.push(Violation {
                    code: "H1b-row-sum",
                    message: format!("H1 b) row {i} sums to {s}"),
                    t: Some(t),
                    i: Some(i),
                    margin: s - 1.0,
                });
            }
        }
        for j in 0..nm {
            let s: f64 = p.column(j).sum();
            if s <= 0.0 {
                out.push(Violation {
                    code: "H1b-column-sum-zero",
                    message: format!("H1 b) column sum zero for column {j}"),
                    t: Some(t),
                    i: Some(j),
                    margin: s,
                });
            }
        }
    }

    let pi = &spec.markov.initial;
    for i in 0..nm {
        if pi[i] <= 0.0 {
            out.push(Violation {
                code: "H3b-initial-not-positive",
                message: format!("H3 b) initial probability of mode {i} is not positive"),
                t: None,
                i: Some(i),
                margin: pi[i],
            });
        }
    }
    let s = pi.sum();
    if (s - 1.0).abs() > tol.probability {
        out.push(Violation {
            code: "H3b-initial-sum",
            message: format!("H3 b) initial distribution sums to {s}"),
            t: None,
            i: None,
            margin: s - 1.0,
        });
    }

    let (rho1, rho2) = (spec.weights.rho1, spec.weights.rho2);
    if rho1 <= 0.0 || rho2 <= 0.0 {
        out.push(Violation {
            code: "H4-margins",
            message: "H4 margins rho1, rho2 must be positive".into(),
            t: None,
            i: None,
            margin: rho1.min(rho2),
        });
    }
    for t in 0..spec.dims.period {
        for i in 0..nm {
            let (r11, r12, r22) = spec.r_blocks(t, i);
            let lam = linalg::min_eig(&r22);
            if lam < rho2 {
                out.push(Violation {
                    code: "H4a-R22",
                    message: format!("H4 a) min eigenvalue of R22 is {lam}, below rho2 = {rho2}"),
                    t: Some(t),
                    i: Some(i),
                    margin: lam - rho2,
                });
                // the two Schur complements below need R22 invertible
                continue;
            }
            let (r22_inv, _) = linalg::sym_inverse(&r22);
            let l2 = spec.l2(t, i);
            let m_schur = spec.weight_m(t, i) - &l2 * &r22_inv * l2.transpose();
            let lam_m = linalg::min_eig(&m_schur);
            let scale = spec.weight_m(t, i).norm().max(1.0);
            if lam_m < -tol.symmetrization * scale {
                out.push(Violation {
                    code: "H4b-M-Schur",
                    message: format!("H4 b) M - L2 R22^-1 L2^T is not positive semidefinite (min eigenvalue {lam_m})"),
                    t: Some(t),
                    i: Some(i),
                    margin: lam_m,
                });
            }
            let r_schur = &r11 - &r12 * &r22_inv * r12.transpose();
            let lam_r = linalg::max_eig(&r_schur);
            if lam_r > -rho1 {
                out.push(Violation {
                    code: "H4c-R-Schur",
                    message: format!(
                        "H4 Schur complement not <= -rho1: max eigenvalue of R11 - R12 R22^-1 R12^T is {lam_r}"
                    ),
                    t: Some(t),
                    i: Some(i),
                    margin: -rho1 - lam_r,
                });
            }
        }
    }

    ValidationReport { violations: out }
}
