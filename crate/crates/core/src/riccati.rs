//! The generalized Riccati recursion with indefinite quadratic term.
//!
//! One backward step maps `X(t+1)` to
//! `X(t) = Π₁[X] + M − (Π₂[X] + L) ℛ⁻¹ (Π₂[X] + L)ᵀ` with
//! `ℛ = R + Π₃[X(t+1)]`, and returns the feedback `F = −ℛ⁻¹(Π₂ + L)ᵀ`.
//! The stabilizing solution is the limit of backward sweeps started from a
//! zero terminal value.

use std::fmt;

use nalgebra::DMatrix;
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::linalg;
use crate::model::{matrix_json, split_blocks, GainSchedule, ModelError, ProblemSpec, RiccatiData, SymTuple, ToleranceConfig};
use crate::operators::{self, LyapunovOperator, OperatorError};

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("R + Π₃[X] is numerically singular at t={t}, mode {mode} (reciprocal condition {rcond:.3e})")]
    SingularRcal { t: usize, mode: usize, rcond: f64 },
    #[error("iteration did not converge after {sweeps} sweeps (last change {last_delta:.3e}{})", if *.diverged { ", iterates diverged" } else { "" })]
    NoConvergence { sweeps: usize, last_delta: f64, diverged: bool },
    #[error("limit is not stabilizing (closed-loop spectral radius {})", .solution.rho_closed)]
    NotStabilizing { solution: Box<StabilizingSolution> },
    #[error("limit violates the sign conditions at phase {phase} (class {class})")]
    NotAdmissible { phase: usize, class: SignClass, solution: Option<Box<StabilizingSolution>> },
    #[error("limit is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPositive { min_eig: f64, solution: Box<StabilizingSolution> },
    #[error("comparison precondition failed: {0}")]
    PreconditionFailed(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Output of one backward step, per mode.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub x: SymTuple,
    /// `ℛ(t, X(t+1), i)`.
    pub rcal: Vec<DMatrix<f64>>,
    /// `F(t,i) = −ℛ⁻¹(Π₂ᵀ + Lᵀ)`.
    pub gains: Vec<DMatrix<f64>>,
}

pub fn riccati_step(
    data: &impl RiccatiData,
    t: usize,
    xnext: &SymTuple,
    min_rcond: f64,
) -> Result<StepOutput, RiccatiError> {
    let pi = operators::pi_ops(data, t, xnext);
    let mut xs = Vec::with_capacity(data.modes());
    let mut rcal = Vec::with_capacity(data.modes());
    let mut gains = Vec::with_capacity(data.modes());
    for i in 0..data.modes() {
        let r = linalg::symmetrize(&(data.weight_r(t, i) + &pi.pi3[i]));
        let (r_inv, rcond) = linalg::sym_inverse(&r);
        if !(rcond >= min_rcond) {
            return Err(RiccatiError::SingularRcal { t, mode: i, rcond });
        }
        let s = &pi.pi2[i] + data.weight_l(t, i);
        let f = -(&r_inv * s.transpose());
        let x = &pi.pi1[i] + data.weight_m(t, i) + &s * &f;
        xs.push(x);
        rcal.push(r);
        gains.push(f);
    }
    Ok(StepOutput { x: SymTuple::new(xs), rcal, gains })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignClass {
    /// `ℛ₁₁ ≺ 0` and `ℛ₂₂ ≻ 0`; implies `Admissible`.
    Strong,
    /// Schur complement of `ℛ₂₂` negative definite and `ℛ₂₂ ≻ 0`.
    Admissible,
    /// Only the inertia `(m1, 0, m2)` holds.
    IndefiniteOnly,
    Degenerate,
}

impl SignClass {
    pub fn is_admissible(self) -> bool {
        matches!(self, SignClass::Strong | SignClass::Admissible)
    }

    pub fn name(self) -> &'static str {
        match self {
            SignClass::Strong => "strong",
            SignClass::Admissible => "admissible",
            SignClass::IndefiniteOnly => "indefinite-only",
            SignClass::Degenerate => "degenerate",
        }
    }
}

impl fmt::Display for SignClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Measured sign margins; over several modes the margins are minima.
#[derive(Clone, Debug, PartialEq)]
pub struct SignReport {
    pub class: SignClass,
    /// `−λ_max(ℛ₁₁ − ℛ₁₂ℛ₂₂⁻¹ℛ₁₂ᵀ)`.
    pub delta1: f64,
    /// `λ_min(ℛ₂₂)`.
    pub delta2: f64,
    /// `−λ_max(ℛ₁₁)`.
    pub delta3: f64,
    /// `true` when every inspected `ℛ` has inertia `(m1, 0, m2)`.
    pub inertia_ok: bool,
}

impl SignReport {
    fn from_margins(delta1: f64, delta2: f64, delta3: f64, inertia_ok: bool, threshold: f64) -> Self {
        let class = if delta3 > threshold && delta2 > threshold {
            SignClass::Strong
        } else if delta1 > threshold && delta2 > threshold {
            SignClass::Admissible
        } else if inertia_ok {
            SignClass::IndefiniteOnly
        } else {
            SignClass::Degenerate
        };
        SignReport { class, delta1, delta2, delta3, inertia_ok }
    }

    /// Combines per-mode or per-phase reports by taking minima.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a SignReport>, threshold: f64) -> SignReport {
        let (mut d1, mut d2, mut d3, mut ok) = (f64::INFINITY, f64::INFINITY, f64::INFINITY, true);
        for r in reports {
            d1 = d1.min(r.delta1);
            d2 = d2.min(r.delta2);
            d3 = d3.min(r.delta3);
            ok &= r.inertia_ok;
        }
        Self::from_margins(d1, d2, d3, ok, threshold)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "class": self.class.name(),
            "delta1": canonical::num(self.delta1),
            "delta2": canonical::num(self.delta2),
            "delta3": canonical::num(self.delta3),
            "inertia_ok": self.inertia_ok,
        })
    }
}

/// Schur complement `ℛ₁₁ − ℛ₁₂ℛ₂₂⁻¹ℛ₁₂ᵀ`.
pub fn schur_complement(rcal: &DMatrix<f64>, m1: usize) -> DMatrix<f64> {
    let (r11, r12, r22) = split_blocks(rcal, m1);
    let (r22_inv, _) = linalg::sym_inverse(&r22);
    linalg::symmetrize(&(&r11 - &r12 * r22_inv * r12.transpose()))
}

/// Classifies one `ℛ` with `m1` leading maximizing inputs.
pub fn classify_sign(rcal: &DMatrix<f64>, m1: usize, threshold: f64) -> SignReport {
    let m = rcal.nrows();
    let (r11, _, r22) = split_blocks(rcal, m1);
    let delta2 = linalg::min_eig(&r22);
    let delta3 = -linalg::max_eig(&r11);
    let delta1 = if delta2 > 0.0 { -linalg::max_eig(&schur_complement(rcal, m1)) } else { f64::NEG_INFINITY };
    let inertia_ok = linalg::inertia(rcal, 1e-12) == (m1, 0, m - m1);
    SignReport::from_margins(delta1, delta2, delta3, inertia_ok, threshold)
}

/// Block-triangular factor of an admissible `ℛ`:
/// `ℛ = Vᵀ diag(−I, I) V` with `V = [V₁₁ 0; V₂₁ V₂₂]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VFactorization {
    pub v11: DMatrix<f64>,
    pub v21: DMatrix<f64>,
    pub v22: DMatrix<f64>,
}

impl VFactorization {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let (m1, m2) = (self.v11.nrows(), self.v22.nrows());
        let top = linalg::hstack(&self.v11, &DMatrix::zeros(m1, m2));
        let bottom = linalg::hstack(&self.v21, &self.v22);
        let v = linalg::vstack(&top, &bottom);
        let mut sig = DMatrix::identity(m1 + m2, m1 + m2);
        for k in 0..m1 {
            sig[(k, k)] = -1.0;
        }
        linalg::symmetrize(&(v.transpose() * sig * v))
    }
}

pub fn v_factorize(rcal: &DMatrix<f64>, m1: usize, threshold: f64) -> Result<VFactorization, SignClass> {
    let sign = classify_sign(rcal, m1, threshold);
    if !sign.class.is_admissible() {
        return Err(sign.class);
    }
    let (_, r12, r22) = split_blocks(rcal, m1);
    let v22 = linalg::sym_sqrt(&r22);
    let v22_inv = linalg::sym_fn(&r22, |v| 1.0 / v.sqrt());
    let v21 = v22_inv * r12.transpose();
    let v11 = linalg::sym_sqrt(&(-schur_complement(rcal, m1)));
    Ok(VFactorization { v11, v21, v22 })
}

/// One backward step with its sign classification.
#[derive(Clone, Debug)]
pub struct RiccatiIterate {
    pub t: usize,
    pub x: SymTuple,
    pub rcal: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub sign: SignReport,
}

fn iterate_from_step(t: usize, step: StepOutput, m1: usize, threshold: f64) -> RiccatiIterate {
    let reports: Vec<SignReport> = step.rcal.iter().map(|r| classify_sign(r, m1, threshold)).collect();
    RiccatiIterate { t, x: step.x, rcal: step.rcal, gains: step.gains, sign: SignReport::combine(&reports, threshold) }
}

/// Backward recursion from `X(τ+1) = 0`; entry `t` of the result is the
/// iterate at time `t`, for `t = 0..=τ`.
pub fn finite_horizon_solve(
    data: &impl RiccatiData,
    tau: usize,
    tol: &ToleranceConfig,
) -> Result<Vec<RiccatiIterate>, RiccatiError> {
    let m1 = data.maximizer_dim();
    let mut next = SymTuple::zeros(data.modes(), data.state_dim());
    let mut out = Vec::with_capacity(tau + 1);
    for t in (0..=tau).rev() {
        let step = riccati_step(data, t, &next, tol.min_rcond)?;
        let it = iterate_from_step(t, step, m1, tol.sign_margin);
        next = it.x.clone();
        out.push(it);
    }
    out.reverse();
    Ok(out)
}

/// When the stopping test is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonSchedule {
    /// Horizons `K·p − 1` with `K = every, 2·every, …`.
    Arithmetic { every: usize },
    /// Horizons `K·p − 1` with `K = initial·factorʲ`.
    Geometric { initial: usize, factor: usize },
}

impl Default for HorizonSchedule {
    fn default() -> Self {
        HorizonSchedule::Arithmetic { every: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub schedule: HorizonSchedule,
    /// Reject limits that are not positive semidefinite.
    pub require_psd: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { schedule: HorizonSchedule::default(), require_psd: true }
    }
}

#[derive(Clone, Debug)]
pub struct StabilizingSolution {
    pub m1: usize,
    /// `X̃(t)` for phases `0..period`.
    pub x: Vec<SymTuple>,
    pub gains: GainSchedule,
    /// `ℛ(t, X̃(t+1), i)` per phase and mode.
    pub rcal: Vec<Vec<DMatrix<f64>>>,
    pub sign: Vec<SignReport>,
    pub margins: SignReport,
    pub sweeps: usize,
    pub last_delta: f64,
    pub residual: f64,
    pub rho_closed: f64,
    pub min_eig: f64,
}

impl StabilizingSolution {
    pub fn period(&self) -> usize {
        self.x.len()
    }

    pub fn modes(&self) -> usize {
        self.x[0].modes()
    }

    pub fn at(&self, t: usize) -> &SymTuple {
        &self.x[t % self.period()]
    }

    /// Player-1 rows of the gains.
    pub fn gains1(&self) -> GainSchedule {
        self.gains.map(|_, _, f| linalg::rows(f, 0, self.m1))
    }

    /// Player-2 rows of the gains.
    pub fn gains2(&self) -> GainSchedule {
        self.gains.map(|_, _, f| linalg::rows(f, self.m1, f.nrows() - self.m1))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "X": Value::Array(self.x.iter().map(SymTuple::to_json).collect()),
            "F": self.gains.to_json(),
            "F1": self.gains1().to_json(),
            "F2": self.gains2().to_json(),
            "sweeps": self.sweeps,
            "last_delta": canonical::num(self.last_delta),
            "residual": canonical::num(self.residual),
            "rho_closed": canonical::num(self.rho_closed),
            "min_eig": canonical::num(self.min_eig),
            "sign": self.margins.to_json(),
            "sign_per_phase": Value::Array(self.sign.iter().map(SignReport::to_json).collect()),
            "Rcal": Value::Array(
                self.rcal.iter().map(|row| Value::Array(row.iter().map(matrix_json).collect())).collect()
            ),
        })
    }
}

/// Reads the `X` tables of a solution report.
pub fn solution_values_from_json(value: &Value, spec: &ProblemSpec) -> Result<Vec<SymTuple>, RiccatiError> {
    let x = value.get("X").ok_or_else(|| ModelError::Dims("solution has no \"X\" field".into()))?;
    let n = spec.dims.n;
    let sched = GainSchedule::from_json(x, n, n, spec.dims.modes)?;
    if sched.period() != spec.dims.period {
        return Err(ModelError::Shape {
            what: "solution X".into(),
            expected: spec.dims.period.to_string(),
            found: sched.period().to_string(),
        }
        .into());
    }
    Ok(sched.phases().iter().map(|row| SymTuple::new(row.clone())).collect())
}

/// Largest Frobenius residual of `X(t) − step(t, X(t+1))` over one period.
pub fn riccati_residual(data: &impl RiccatiData, x: &[SymTuple], min_rcond: f64) -> Result<f64, RiccatiError> {
    let p = x.len();
    let mut res: f64 = 0.0;
    for t in 0..p {
        let step = riccati_step(data, t, &x[(t + 1) % p], min_rcond)?;
        for i in 0..data.modes() {
            res = res.max((&x[t][i] - &step.x[i]).norm());
        }
    }
    Ok(res)
}

fn relative_change(a: &[SymTuple], b: &[SymTuple]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.iter().zip(y.iter()).map(|(p, q)| (p - q).norm() / (1.0 + p.norm())).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// One backward sweep over a period from `X(p) = terminal`; returns `X(t)` for
/// `t = 0..p`.
fn sweep(data: &impl RiccatiData, terminal: &SymTuple, min_rcond: f64) -> Result<Vec<SymTuple>, RiccatiError> {
    let p = data.period();
    let mut out = vec![SymTuple::zeros(0, 0); p];
    let mut next = terminal.clone();
    for t in (0..p).rev() {
        next = riccati_step(data, t, &next, min_rcond)?.x;
        out[t] = next.clone();
    }
    Ok(out)
}

const DIVERGENCE_NORM: f64 = 1e15;

fn diverged(x: &[SymTuple]) -> bool {
    x.iter().any(|s| !s.is_finite() || s.max_norm() > DIVERGENCE_NORM)
}

/// Iterates whole-period backward sweeps from zero until the values one
/// period apart agree, then verifies the limit.
pub fn stabilizing_solve(
    data: &impl RiccatiData,
    tol: &ToleranceConfig,
    opts: &SolveOptions,
) -> Result<StabilizingSolution, RiccatiError> {
    let zero = SymTuple::zeros(data.modes(), data.state_dim());
    let mut prev = sweep(data, &zero, tol.min_rcond)?;
    let mut sweeps = 1;
    let mut next_check = match opts.schedule {
        HorizonSchedule::Arithmetic { every } => every.max(1),
        HorizonSchedule::Geometric { initial, .. } => initial.max(1),
    };
    let mut last_delta = f64::INFINITY;
    loop {
        if sweeps >= tol.max_sweeps {
            return Err(RiccatiError::NoConvergence { sweeps, last_delta, diverged: false });
        }
        let cur = sweep(data, &prev[0], tol.min_rcond)?;
        sweeps += 1;
        if diverged(&cur) {
            return Err(RiccatiError::NoConvergence { sweeps, last_delta, diverged: true });
        }
        if sweeps > next_check {
            last_delta = relative_change(&cur, &prev);
            if last_delta < tol.convergence {
                return finalize(data, cur, sweeps, last_delta, tol, opts);
            }
            next_check = match opts.schedule {
                HorizonSchedule::Arithmetic { every } => next_check + every.max(1),
                HorizonSchedule::Geometric { factor, .. } => next_check * factor.max(2),
            };
        }
        prev = cur;
    }
}

/// Builds the full solution record from a candidate periodic `X̃` and runs
/// the stabilizing, sign and positivity checks.
pub fn finalize(
    data: &impl RiccatiData,
    x: Vec<SymTuple>,
    sweeps: usize,
    last_delta: f64,
    tol: &ToleranceConfig,
    opts: &SolveOptions,
) -> Result<StabilizingSolution, RiccatiError> {
    let solution = assemble(data, x, sweeps, last_delta, tol)?;
    if let Some(phase) = solution.sign.iter().position(|s| !s.class.is_admissible()) {
        let class = solution.sign[phase].class;
        return Err(RiccatiError::NotAdmissible { phase, class, solution: Some(Box::new(solution)) });
    }
    if solution.rho_closed >= 1.0 - tol.stability_margin {
        return Err(RiccatiError::NotStabilizing { solution: Box::new(solution) });
    }
    let scale = solution.x.iter().map(SymTuple::max_norm).fold(1.0, f64::max);
    if opts.require_psd && solution.min_eig < -tol.convergence * scale {
        let min_eig = solution.min_eig;
        return Err(RiccatiError::NotPositive { min_eig, solution: Box::new(solution) });
    }
    Ok(solution)
}

/// Gains, `ℛ`, sign margins, residual and closed-loop radius at a candidate `X̃`.
pub fn assemble(
    data: &impl RiccatiData,
    x: Vec<SymTuple>,
    sweeps: usize,
    last_delta: f64,
    tol: &ToleranceConfig,
) -> Result<StabilizingSolution, RiccatiError> {
    let p = x.len();
    let m1 = data.maximizer_dim();
    let mut gains = Vec::with_capacity(p);
    let mut rcal = Vec::with_capacity(p);
    let mut sign = Vec::with_capacity(p);
    let mut residual: f64 = 0.0;
    for t in 0..p {
        let step = riccati_step(data, t, &x[(t + 1) % p], tol.min_rcond)?;
        for i in 0..data.modes() {
            residual = residual.max((&x[t][i] - &step.x[i]).norm());
        }
        let it = iterate_from_step(t, step, m1, tol.sign_margin);
        gains.push(it.gains);
        rcal.push(it.rcal);
        sign.push(it.sign);
    }
    let gains = GainSchedule::new(gains);
    let rho_closed = LyapunovOperator::closed_loop(data, &gains).spectral_radius()?.rho;
    let margins = SignReport::combine(&sign, tol.sign_margin);
    let min_eig = x.iter().map(SymTuple::min_eig).fold(f64::INFINITY, f64::min);
    Ok(StabilizingSolution { m1, x, gains, rcal, sign, margins, sweeps, last_delta, residual, rho_closed, min_eig })
}

/// Smallest eigenvalue of `X²(t) − X¹(t)` over the horizon.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub min_gap: f64,
    pub per_time: Vec<f64>,
}

/// Runs both finite-horizon recursions and reports the ordering gap. Both
/// specs must share the dynamics and chain, and `Q²(t,i) ⪰ Q¹(t,i)`.
pub fn compare_solutions(
    spec1: &ProblemSpec,
    spec2: &ProblemSpec,
    tau: usize,
) -> Result<ComparisonReport, RiccatiError> {
    if spec1.dims != spec2.dims || spec1.system != spec2.system || spec1.markov != spec2.markov {
        return Err(RiccatiError::PreconditionFailed("specs differ in dimensions, dynamics or chain".into()));
    }
    for t in 0..spec1.dims.period {
        for i in 0..spec1.dims.modes {
            let diff = spec2.weight_q(t, i) - spec1.weight_q(t, i);
            let lam = linalg::min_eig(&diff);
            if lam < -spec1.tol.symmetrization * spec1.weight_q(t, i).norm().max(1.0) {
                return Err(RiccatiError::PreconditionFailed(format!(
                    "Q2 - Q1 is not positive semidefinite at t={t}, mode {i} (min eigenvalue {lam})"
                )));
            }
        }
    }
    let it1 = finite_horizon_solve(spec1, tau, &spec1.tol)?;
    let it2 = finite_horizon_solve(spec2, tau, &spec2.tol)?;
    for it in &it2 {
        if !it.sign.class.is_admissible() {
            return Err(RiccatiError::PreconditionFailed(format!("second spec not admissible at t={}", it.t)));
        }
    }
    for it in &it1 {
        if it.sign.delta2 <= 0.0 {
            return Err(RiccatiError::PreconditionFailed(format!("first spec has R22 not positive at t={}", it.t)));
        }
    }
    let per_time: Vec<f64> = it1.iter().zip(&it2).map(|(a, b)| (&b.x - &a.x).min_eig()).collect();
    let min_gap = per_time.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(ComparisonReport { min_gap, per_time })
}

/// `ℒ*_Γ[X] + [I; Γ]ᵀ Q [I; Γ] − (Γ − F)ᵀ ℛ (Γ − F)`, which equals the
/// Riccati step for every `Γ`.
pub fn reparametrized_rhs(
    data: &impl RiccatiData,
    t: usize,
    xnext: &SymTuple,
    gamma: &[DMatrix<f64>],
    min_rcond: f64,
) -> Result<SymTuple, RiccatiError> {
    let step = riccati_step(data, t, xnext, min_rcond)?;
    let e = operators::xi(data, t, xnext);
    let n = data.state_dim();
    let mut out = Vec::with_capacity(data.modes());
    for i in 0..data.modes() {
        let g = &gamma[i];
        let mut acc = DMatrix::zeros(n, n);
        for k in 0..=data.noise_channels() {
            let ak = data.a(t, i, k) + data.b(t, i, k) * g;
            acc += ak.transpose() * &e[i] * &ak;
        }
        let ig = linalg::vstack(&DMatrix::identity(n, n), g);
        acc += ig.transpose() * data.weight_q(t, i) * &ig;
        let d = g - &step.gains[i];
        acc -= d.transpose() * &step.rcal[i] * &d;
        out.push(acc);
    }
    Ok(SymTuple::new(out))
}
