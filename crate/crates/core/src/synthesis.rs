//! Closed-loop constructions around the Riccati solver: gain splitting,
//! the `(K, W)`-closed loop, membership of a gain pair in the stabilizing
//! class, the full-information gains and detectability of the auxiliary
//! system.

use nalgebra::DMatrix;
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::linalg;
use crate::model::{time_index, GainSchedule, ProblemSpec, RiccatiData, SymTuple, ToleranceConfig};
use crate::operators::{lcm, LyapunovOperator, OperatorError};
use crate::riccati::{
    classify_sign, riccati_step, stabilizing_solve, v_factorize, RiccatiError, SignClass, SignReport,
    SolveOptions, StabilizingSolution, VFactorization,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("gain pair does not stabilize the closed loop (spectral radius {rho})")]
    NotStabilizingGain { rho: f64 },
    #[error("closed-loop Riccati equation has no stabilizing solution: {reason}")]
    NoStabilizingClosedLoopSolution { reason: String },
    #[error("solution is not admissible at phase {phase}, mode {mode} (class {class})")]
    NotAdmissible { phase: usize, mode: usize, class: SignClass },
    #[error("detectability synthesis failed: {0}; the auxiliary system is not certified")]
    SynthesisFailed(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Splits `F` into its first `m1` rows and the rest.
pub fn split_gain(f: &DMatrix<f64>, m1: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    (linalg::rows(f, 0, m1), linalg::rows(f, m1, f.nrows() - m1))
}

pub fn stack_gain(f1: &DMatrix<f64>, f2: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::vstack(f1, f2)
}

/// Responder gains: `u₂ = K x + W u₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct GainPair {
    pub k: GainSchedule,
    pub w: GainSchedule,
}

impl GainPair {
    pub fn to_json(&self) -> Value {
        json!({ "K": self.k.to_json(), "W": self.w.to_json() })
    }
}

/// The problem seen by player 1 once `u₂ = K x + W u₁` is substituted.
///
/// The result is again a Riccati problem, with a single input block of size
/// `m1` that plays the maximizing role. [`ClosedLoopSpec::negated`] flips the
/// sign of every weight, which turns it into a minimization.
#[derive(Clone, Debug)]
pub struct ClosedLoopSpec {
    n: usize,
    m1: usize,
    modes: usize,
    r: usize,
    maximizing: bool,
    transitions: Vec<DMatrix<f64>>,
    /// `[phase][mode][channel]`
    a: Vec<Vec<Vec<DMatrix<f64>>>>,
    b: Vec<Vec<Vec<DMatrix<f64>>>>,
    m: Vec<Vec<DMatrix<f64>>>,
    l: Vec<Vec<DMatrix<f64>>>,
    r_w: Vec<Vec<DMatrix<f64>>>,
}

impl ClosedLoopSpec {
    pub fn a_k(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64> {
        &self.a[self.phase(t)][i][k]
    }

    pub fn negated(&self) -> ClosedLoopSpec {
        let neg = |tab: &Vec<Vec<DMatrix<f64>>>| -> Vec<Vec<DMatrix<f64>>> {
            tab.iter().map(|row| row.iter().map(|x| -x).collect()).collect()
        };
        ClosedLoopSpec {
            maximizing: !self.maximizing,
            m: neg(&self.m),
            l: neg(&self.l),
            r_w: neg(&self.r_w),
            ..self.clone()
        }
    }

    /// Zero-input dynamics `Aₖ + Bₖ₂K`.
    pub fn state_operator(&self) -> LyapunovOperator {
        LyapunovOperator::from_matrices(self.transitions.clone(), self.a.clone())
    }
}

impl RiccatiData for ClosedLoopSpec {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m1
    }
    fn maximizer_dim(&self) -> usize {
        if self.maximizing {
            self.m1
        } else {
            0
        }
    }
    fn noise_channels(&self) -> usize {
        self.r
    }
    fn modes(&self) -> usize {
        self.modes
    }
    fn period(&self) -> usize {
        self.a.len()
    }
    fn transition(&self, t: usize) -> &DMatrix<f64> {
        &self.transitions[self.phase(t)]
    }
    fn a(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64> {
        &self.a[self.phase(t)][i][k]
    }
    fn b(&self, t: usize, i: usize, k: usize) -> &DMatrix<f64> {
        &self.b[self.phase(t)][i][k]
    }
    fn weight_m(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.m[self.phase(t)][i]
    }
    fn weight_l(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.l[self.phase(t)][i]
    }
    fn weight_r(&self, t: usize, i: usize) -> &DMatrix<f64> {
        &self.r_w[self.phase(t)][i]
    }
}

/// Substitutes `u₂ = K x + W u₁`:
/// `A_K = A + B₂K`, `B_W = B₁ + B₂W`, `M_K = M + L₂K + KᵀL₂ᵀ + KᵀR₂₂K`,
/// `L_KW = L₁ + KᵀR₁₂ᵀ + (L₂ + KᵀR₂₂)W`, `R_W = [I; W]ᵀ R [I; W]`.
pub fn close_loop(spec: &ProblemSpec, gains: &GainPair) -> ClosedLoopSpec {
    let d = spec.dims;
    let p = lcm(lcm(d.period, gains.k.period()), gains.w.period());
    let mut a = Vec::with_capacity(p);
    let mut b = Vec::with_capacity(p);
    let mut wm = Vec::with_capacity(p);
    let mut wl = Vec::with_capacity(p);
    let mut wr = Vec::with_capacity(p);
    for t in 0..p {
        let (mut ar, mut br, mut mr, mut lr, mut rr) = (vec![], vec![], vec![], vec![], vec![]);
        for i in 0..d.modes {
            let k = gains.k.at(t, i);
            let w = gains.w.at(t, i);
            ar.push((0..=d.r).map(|c| spec.a(t, i, c) + spec.b2(t, i, c) * k).collect::<Vec<_>>());
            br.push((0..=d.r).map(|c| spec.b1(t, i, c) + spec.b2(t, i, c) * w).collect::<Vec<_>>());
            let (_, r12, r22) = spec.r_blocks(t, i);
            let l1 = spec.l1(t, i);
            let l2 = spec.l2(t, i);
            let l2k = &l2 * k;
            mr.push(linalg::symmetrize(
                &(spec.weight_m(t, i) + &l2k + l2k.transpose() + k.transpose() * &r22 * k),
            ));
            lr.push(&l1 + k.transpose() * r12.transpose() + (&l2 + k.transpose() * &r22) * w);
            let iw = linalg::vstack(&DMatrix::identity(d.m1, d.m1), w);
            rr.push(linalg::symmetrize(&(iw.transpose() * spec.weight_r(t, i) * &iw)));
        }
        a.push(ar);
        b.push(br);
        wm.push(mr);
        wl.push(lr);
        wr.push(rr);
    }
    ClosedLoopSpec {
        n: d.n,
        m1: d.m1,
        modes: d.modes,
        r: d.r,
        maximizing: true,
        transitions: (0..p).map(|t| spec.transition(t).clone()).collect(),
        a,
        b,
        m: wm,
        l: wl,
        r_w: wr,
    }
}

#[derive(Clone, Debug)]
pub struct MembershipReport {
    /// Spectral radius of the zero-input closed loop `Aₖ + Bₖ₂K`.
    pub rho_state: f64,
    /// Spectral radius of the closed loop under the stabilizing solution.
    pub rho_solution: f64,
    /// `ξ = −λ_max(R_W + Π_W[X̃_KW])` over phases and modes.
    pub xi: f64,
    /// `X̃_KW` per phase.
    pub x: Vec<SymTuple>,
    pub min_eig: f64,
    /// Sign margins of the original problem evaluated at `X̃_KW`.
    pub sign: SignReport,
    pub sweeps: usize,
}

impl MembershipReport {
    pub fn to_json(&self) -> Value {
        json!({
            "rho_state": canonical::num(self.rho_state),
            "rho_solution": canonical::num(self.rho_solution),
            "xi": canonical::num(self.xi),
            "min_eig": canonical::num(self.min_eig),
            "sign": self.sign.to_json(),
            "sweeps": self.sweeps,
            "X": Value::Array(self.x.iter().map(SymTuple::to_json).collect()),
        })
    }
}

/// Tests whether `(K, W)` stabilizes the state and the closed-loop Riccati
/// equation has a stabilizing solution with `R_W + Π_W[X̃_KW] ⪯ −ξ I`.
///
/// The closed-loop equation is solved through `Y = −X`, which turns it
/// into a definite-sign recursion.
pub fn a_sigma_membership(spec: &ProblemSpec, gains: &GainPair) -> Result<MembershipReport, SynthesisError> {
    let tol = &spec.tol;
    let cl = close_loop(spec, gains);
    let rho_state = cl.state_operator().spectral_radius()?.rho;
    if rho_state >= 1.0 - tol.stability_margin {
        return Err(SynthesisError::NotStabilizingGain { rho: rho_state });
    }
    let flipped = cl.negated();
    let opts = SolveOptions { require_psd: false, ..SolveOptions::default() };
    let ysol = stabilizing_solve(&flipped, tol, &opts).map_err(|e| {
        SynthesisError::NoStabilizingClosedLoopSolution { reason: format!("sign-flipped recursion: {e}") }
    })?;
    let x: Vec<SymTuple> = ysol.x.iter().map(|y| y.scale(-1.0)).collect();
    // ℛ of the flipped problem is −(R_W + Π_W[X]); its minimum eigenvalue is ξ
    let xi = ysol.margins.delta2;
    if !(xi > tol.sign_margin) {
        return Err(SynthesisError::NoStabilizingClosedLoopSolution {
            reason: format!("R_W + Π_W[X] is not negative definite (ξ = {xi})"),
        });
    }
    let min_eig = x.iter().map(SymTuple::min_eig).fold(f64::INFINITY, f64::min);
    let scale = x.iter().map(SymTuple::max_norm).fold(1.0, f64::max);
    if min_eig < -tol.convergence * scale {
        return Err(SynthesisError::NoStabilizingClosedLoopSolution {
            reason: format!("closed-loop solution is not positive semidefinite (min eigenvalue {min_eig})"),
        });
    }
    let p = x.len();
    let mut reports = Vec::new();
    for t in 0..p {
        let step = riccati_step(spec, t, &x[(t + 1) % p], tol.min_rcond)?;
        for r in &step.rcal {
            reports.push(classify_sign(r, spec.dims.m1, tol.sign_margin));
        }
    }
    let sign = SignReport::combine(&reports, tol.sign_margin);
    if !sign.class.is_admissible() {
        return Err(SynthesisError::NoStabilizingClosedLoopSolution {
            reason: format!("closed-loop solution violates the sign conditions (class {})", sign.class),
        });
    }
    Ok(MembershipReport { rho_state, rho_solution: ysol.rho_closed, xi, x, min_eig, sign, sweeps: ysol.sweeps })
}

/// `K̃`, `W̃` and the factor blocks they come from.
#[derive(Clone, Debug)]
pub struct FullInfoGains {
    pub pair: GainPair,
    /// `[phase][mode]`
    pub factors: Vec<Vec<VFactorization>>,
}

/// `K̃ = V₂₂⁻¹(V₂₁F̃₁ + V₂₂F̃₂)`, `W̃ = −V₂₂⁻¹V₂₁`, from the factorization of
/// `ℛ(t, X̃(t+1))`.
pub fn full_information_gains(sol: &StabilizingSolution, tol: &ToleranceConfig) -> Result<FullInfoGains, SynthesisError> {
    let m1 = sol.m1;
    let mut k = Vec::new();
    let mut w = Vec::new();
    let mut factors = Vec::new();
    for (t, row) in sol.rcal.iter().enumerate() {
        let (mut kr, mut wr, mut fr) = (vec![], vec![], vec![]);
        for (i, r) in row.iter().enumerate() {
            let v = v_factorize(r, m1, tol.sign_margin)
                .map_err(|class| SynthesisError::NotAdmissible { phase: t, mode: i, class })?;
            let (f1, f2) = split_gain(sol.gains.at(t, i), m1);
            let (v22_inv, _) = linalg::sym_inverse(&v.v22);
            kr.push(&v22_inv * (&v.v21 * &f1 + &v.v22 * &f2));
            wr.push(-(&v22_inv * &v.v21));
            fr.push(v);
        }
        k.push(kr);
        w.push(wr);
        factors.push(fr);
    }
    Ok(FullInfoGains { pair: GainPair { k: GainSchedule::new(k), w: GainSchedule::new(w) }, factors })
}

/// The auxiliary system and its injection certificate.
#[derive(Clone, Debug)]
pub struct DetectabilityResult {
    pub detectable: bool,
    /// `H(t,i)`, `n×p(t,i)`.
    pub injection: Option<GainSchedule>,
    pub rho_injected: f64,
    /// Smallest probability of any mode over one period for the given `π₀`.
    pub min_mode_probability: f64,
    /// Output dimension `p(t,i)` of `Č(t,i)`.
    pub ranks: Vec<Vec<usize>>,
}

impl DetectabilityResult {
    pub fn to_json(&self) -> Value {
        json!({
            "detectable": self.detectable,
            "H": self.injection.as_ref().map(GainSchedule::to_json),
            "rho_injected": canonical::num(self.rho_injected),
            "min_mode_probability": canonical::num(self.min_mode_probability),
            "ranks": self.ranks,
        })
    }
}

/// `Ǎₖ(t,i)` and `Č(t,i)` per phase and mode.
pub struct AuxiliarySystem {
    pub a: Vec<Vec<Vec<DMatrix<f64>>>>,
    pub c: Vec<Vec<DMatrix<f64>>>,
}

/// `Ǎₖ = Aₖ − Bₖ₂R₂₂⁻¹L₂ᵀ`, and `Č` with `ČᵀČ = M − L₂R₂₂⁻¹L₂ᵀ`.
pub fn auxiliary_system(spec: &ProblemSpec) -> AuxiliarySystem {
    let d = spec.dims;
    let mut a = Vec::new();
    let mut c = Vec::new();
    for t in 0..d.period {
        let (mut ar, mut cr) = (vec![], vec![]);
        for i in 0..d.modes {
            let (_, _, r22) = spec.r_blocks(t, i);
            let (r22_inv, _) = linalg::sym_inverse(&r22);
            let l2 = spec.l2(t, i);
            let corr = &r22_inv * l2.transpose();
            ar.push((0..=d.r).map(|k| spec.a(t, i, k) - spec.b2(t, i, k) * &corr).collect::<Vec<_>>());
            let resid = linalg::symmetrize(&(spec.weight_m(t, i) - &l2 * &corr));
            cr.push(linalg::psd_factor(&resid, 1e-12));
        }
        a.push(ar);
        c.push(cr);
    }
    AuxiliarySystem { a, c }
}

fn injected_operator(spec: &ProblemSpec, aux: &AuxiliarySystem, h: &GainSchedule) -> LyapunovOperator {
    let p = lcm(spec.dims.period, h.period());
    let mats = (0..p)
        .map(|t| {
            let ph = time_index(spec.dims.period, t);
            (0..spec.dims.modes)
                .map(|i| {
                    let mut chans = aux.a[ph][i].clone();
                    chans[0] = &chans[0] + h.at(t, i) * &aux.c[ph][i];
                    chans
                })
                .collect()
        })
        .collect();
    LyapunovOperator::from_matrices((0..p).map(|t| spec.transition(t).clone()).collect(), mats)
}

/// Certifies stochastic detectability of the auxiliary system, either with
/// a supplied injection `H` or with one synthesized from the forward
/// filtering Riccati recursion. The certificate is the spectral radius of
/// the injected system, computed independently of how `H` was found.
pub fn auxiliary_detectability(
    spec: &ProblemSpec,
    injection: Option<&GainSchedule>,
) -> Result<DetectabilityResult, SynthesisError> {
    let tol = &spec.tol;
    let aux = auxiliary_system(spec);
    let ranks = aux.c.iter().map(|row| row.iter().map(|c| c.nrows()).collect()).collect();
    let h = match injection {
        Some(h) => h.clone(),
        None => synthesize_injection(spec, &aux)?,
    };
    let rho = injected_operator(spec, &aux, &h).spectral_radius()?.rho;
    let p = spec.dims.period;
    let min_mode_probability =
        (0..p).flat_map(|t| spec.markov.distribution_at(t).iter().copied().collect::<Vec<_>>()).fold(f64::INFINITY, f64::min);
    let detectable = rho < 1.0 - tol.stability_margin;
    if injection.is_none() && !detectable {
        return Err(SynthesisError::SynthesisFailed(format!("synthesized injection leaves spectral radius {rho}")));
    }
    Ok(DetectabilityResult { detectable, injection: Some(h), rho_injected: rho, min_mode_probability, ranks })
}

/// Forward recursion
/// `Y(t+1,i) = Σⱼ p(j,i) [Ǎ₀YǍ₀ᵀ − Ǎ₀YČᵀ(I + ČYČᵀ)⁻¹ČYǍ₀ᵀ + Σₖ≥1 ǍₖYǍₖᵀ + I](t,j)`
/// iterated to its periodic limit, with `H = −Ǎ₀YČᵀ(I + ČYČᵀ)⁻¹`.
fn synthesize_injection(spec: &ProblemSpec, aux: &AuxiliarySystem) -> Result<GainSchedule, SynthesisError> {
    let tol = &spec.tol;
    let d = spec.dims;
    let p = d.period;
    let mut y = vec![SymTuple::identity(d.modes, d.n); p];
    let gain_at = |yt: &DMatrix<f64>, ph: usize, j: usize| -> (DMatrix<f64>, DMatrix<f64>) {
        let a0 = &aux.a[ph][j][0];
        let c = &aux.c[ph][j];
        let q = c.nrows();
        let s = DMatrix::identity(q, q) + c * yt * c.transpose();
        let (s_inv, _) = linalg::sym_inverse(&s);
        let h = -(a0 * yt * c.transpose() * s_inv);
        (h, s)
    };
    for sweep in 0..tol.max_sweeps {
        let mut next = y.clone();
        let mut cur = y[0].clone();
        for t in 0..p {
            let mut moved = Vec::with_capacity(d.modes);
            for j in 0..d.modes {
                let yj = &cur[j];
                let (h, _) = gain_at(yj, t, j);
                let a0 = &aux.a[t][j][0];
                let acl = a0 + &h * &aux.c[t][j];
                // Joseph form keeps the iterate positive definite
                let mut acc = &acl * yj * acl.transpose() + &h * h.transpose() + DMatrix::identity(d.n, d.n);
                for k in 1..=d.r {
                    let ak = &aux.a[t][j][k];
                    acc += ak * yj * ak.transpose();
                }
                moved.push(acc);
            }
            let pt = spec.transition(t);
            let entries = (0..d.modes)
                .map(|i| {
                    let mut acc = DMatrix::zeros(d.n, d.n);
                    for (j, mj) in moved.iter().enumerate() {
                        acc += mj * pt[(j, i)];
                    }
                    acc
                })
                .collect();
            cur = SymTuple::new(entries);
            next[(t + 1) % p] = cur.clone();
        }
        if next.iter().any(|s| !s.is_finite() || s.max_norm() > 1e15) {
            return Err(SynthesisError::SynthesisFailed(format!("filtering recursion diverged after {sweep} sweeps")));
        }
        let delta = next
            .iter()
            .zip(&y)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| (p - q).norm() / (1.0 + p.norm())).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        y = next;
        if delta < tol.convergence {
            let gains = (0..p).map(|t| (0..d.modes).map(|j| gain_at(&y[t][j], t, j).0).collect()).collect();
            return Ok(GainSchedule::new(gains));
        }
    }
    Err(SynthesisError::SynthesisFailed("filtering recursion did not converge".into()))
}
