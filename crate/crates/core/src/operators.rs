//! Linear operators on tuples of symmetric matrices: the conditional
//! expectation, the quadratic-form operators of the Riccati map, and the
//! Lyapunov operators whose spectral radius decides mean-square stability.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::{time_index, GainSchedule, RiccatiData, SymTuple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("spectral radius did not converge (power iteration residual {power_residual:.3e}, eigen solver failed)")]
    NonConvergence { power_residual: f64 },
    #[error("operator is not exponentially stable (spectral radius {rho})")]
    NotStable { rho: f64 },
    #[error("periodic Lyapunov system is singular or inaccurate (residual {residual:.3e})")]
    FixedPoint { residual: f64 },
}

/// `Ξ[X](i) = Σⱼ p(i,j) X(j)` for a single transition matrix.
pub fn xi_with(p: &DMatrix<f64>, x: &SymTuple) -> SymTuple {
    let nm = x.modes();
    let n = x.dim();
    SymTuple::new(
        (0..nm)
            .map(|i| {
                let mut acc = DMatrix::zeros(n, n);
                for j in 0..nm {
                    let pij = p[(i, j)];
                    if pij != 0.0 {
                        acc += &x[j] * pij;
                    }
                }
                acc
            })
            .collect(),
    )
}

/// Conditional expectation at time `t`.
pub fn xi(data: &impl RiccatiData, t: usize, x: &SymTuple) -> SymTuple {
    xi_with(data.transition(t), x)
}

/// `Π₁`, `Π₂`, `Π₃` evaluated at one tuple, per mode.
#[derive(Clone, Debug)]
pub struct PiTerms {
    pub pi1: Vec<DMatrix<f64>>,
    pub pi2: Vec<DMatrix<f64>>,
    pub pi3: Vec<DMatrix<f64>>,
}

impl PiTerms {
    /// `(Π₂₁, Π₂₂)` column blocks at mode `i`.
    pub fn pi2_blocks(&self, i: usize, m1: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = &self.pi2[i];
        (linalg::cols(p, 0, m1), linalg::cols(p, m1, p.ncols() - m1))
    }

    /// `(Π₃₁₁, Π₃₁₂, Π₃₂₂)` at mode `i`.
    pub fn pi3_blocks(&self, i: usize, m1: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        crate::model::split_blocks(&self.pi3[i], m1)
    }
}

/// `Π₁ = Σₖ Aₖᵀ Ξ Aₖ`, `Π₂ = Σₖ Aₖᵀ Ξ Bₖ`, `Π₃ = Σₖ Bₖᵀ Ξ Bₖ` over channels `0..=r`.
pub fn pi_ops(data: &impl RiccatiData, t: usize, x: &SymTuple) -> PiTerms {
    let e = xi(data, t, x);
    let (n, m) = (data.state_dim(), data.input_dim());
    let mut out = PiTerms { pi1: Vec::new(), pi2: Vec::new(), pi3: Vec::new() };
    for i in 0..data.modes() {
        let mut p1 = DMatrix::zeros(n, n);
        let mut p2 = DMatrix::zeros(n, m);
        let mut p3 = DMatrix::zeros(m, m);
        for k in 0..=data.noise_channels() {
            let a = data.a(t, i, k);
            let b = data.b(t, i, k);
            let ea = &e[i] * a;
            let eb = &e[i] * b;
            p1 += a.transpose() * &ea;
            p2 += a.transpose() * &eb;
            p3 += b.transpose() * &eb;
        }
        out.pi1.push(linalg::symmetrize(&p1));
        out.pi2.push(p2);
        out.pi3.push(linalg::symmetrize(&p3));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Adjoint,
}

/// `Y ↦ Σₖ Σⱼ p(j,i) Ãₖ(j) Y(j) Ãₖᵀ(j)` and its adjoint, with periodic
/// coefficients `Ãₖ(t,i)`.
#[derive(Clone, Debug)]
pub struct LyapunovOperator {
    n: usize,
    modes: usize,
    transitions: Vec<DMatrix<f64>>,
    /// `[phase][mode][channel]`
    matrices: Vec<Vec<Vec<DMatrix<f64>>>>,
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl LyapunovOperator {
    /// Builds the operator from per-phase transitions and `Ãₖ(t,i)`; both
    /// lists must have the same length, which becomes the period.
    pub fn from_matrices(transitions: Vec<DMatrix<f64>>, matrices: Vec<Vec<Vec<DMatrix<f64>>>>) -> Self {
        assert_eq!(transitions.len(), matrices.len());
        assert!(!matrices.is_empty());
        let modes = matrices[0].len();
        let n = matrices[0][0][0].nrows();
        LyapunovOperator { n, modes, transitions, matrices }
    }

    /// Uses the raw `Aₖ`.
    pub fn open_loop(data: &impl RiccatiData) -> Self {
        let p = data.period();
        let channels = data.noise_channels() + 1;
        Self::from_matrices(
            (0..p).map(|t| data.transition(t).clone()).collect(),
            (0..p)
                .map(|t| {
                    (0..data.modes()).map(|i| (0..channels).map(|k| data.a(t, i, k).clone()).collect()).collect()
                })
                .collect(),
        )
    }

    /// Uses `Aₖ + Bₖ F`; the period is the lcm of the data and gain periods.
    pub fn closed_loop(data: &impl RiccatiData, gains: &GainSchedule) -> Self {
        let p = lcm(data.period(), gains.period());
        let channels = data.noise_channels() + 1;
        Self::from_matrices(
            (0..p).map(|t| data.transition(t).clone()).collect(),
            (0..p)
                .map(|t| {
                    (0..data.modes())
                        .map(|i| {
                            let f = gains.at(t, i);
                            (0..channels).map(|k| data.a(t, i, k) + data.b(t, i, k) * f).collect()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    pub fn period(&self) -> usize {
        self.matrices.len()
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `N·n(n+1)/2`.
    pub fn coord_dim(&self) -> usize {
        self.modes * self.n * (self.n + 1) / 2
    }

    pub fn coefficients(&self, t: usize, i: usize) -> &[DMatrix<f64>] {
        &self.matrices[time_index(self.period(), t)][i]
    }

    pub fn apply(&self, t: usize, x: &SymTuple) -> SymTuple {
        let ph = time_index(self.period(), t);
        let p = &self.transitions[ph];
        let moved: Vec<DMatrix<f64>> = (0..self.modes)
            .map(|j| {
                let mut acc = DMatrix::zeros(self.n, self.n);
                for a in &self.matrices[ph][j] {
                    acc += a * &x[j] * a.transpose();
                }
                acc
            })
            .collect();
        SymTuple::new(
            (0..self.modes)
                .map(|i| {
                    let mut acc = DMatrix::zeros(self.n, self.n);
                    for (j, mj) in moved.iter().enumerate() {
                        let pji = p[(j, i)];
                        if pji != 0.0 {
                            acc += mj * pji;
                        }
                    }
                    acc
                })
                .collect(),
        )
    }

    pub fn apply_adjoint(&self, t: usize, x: &SymTuple) -> SymTuple {
        let ph = time_index(self.period(), t);
        let e = xi_with(&self.transitions[ph], x);
        SymTuple::new(
            (0..self.modes)
                .map(|i| {
                    let mut acc = DMatrix::zeros(self.n, self.n);
                    for a in &self.matrices[ph][i] {
                        acc += a.transpose() * &e[i] * a;
                    }
                    acc
                })
                .collect(),
        )
    }

    pub fn apply_dir(&self, dir: Direction, t: usize, x: &SymTuple) -> SymTuple {
        match dir {
            Direction::Forward => self.apply(t, x),
            Direction::Adjoint => self.apply_adjoint(t, x),
        }
    }

    /// Dense matrix of the operator at time `t` in the scaled-vech basis.
    pub fn matrix(&self, t: usize, dir: Direction) -> DMatrix<f64> {
        let d = self.coord_dim();
        let mut out = DMatrix::zeros(d, d);
        for col in 0..d {
            let e = basis_element(self.modes, self.n, col);
            let image = to_coords(&self.apply_dir(dir, t, &e));
            out.set_column(col, &image);
        }
        out
    }

    /// `Φ = M(p−1)···M(0)` for the forward operator.
    pub fn monodromy(&self) -> DMatrix<f64> {
        let d = self.coord_dim();
        let mut phi = DMatrix::identity(d, d);
        for t in 0..self.period() {
            phi = self.matrix(t, Direction::Forward) * phi;
        }
        phi
    }

    pub fn spectral_radius(&self) -> Result<SpectralRadius, OperatorError> {
        let phi = self.monodromy();
        let seed = to_coords(&SymTuple::identity(self.modes, self.n));
        spectral_radius_of(&phi, seed)
    }

    /// `ρ < 1 − margin`.
    pub fn is_stable(&self, margin: f64) -> Result<(bool, f64), OperatorError> {
        let rho = self.spectral_radius()?.rho;
        Ok((rho < 1.0 - margin, rho))
    }

    /// Periodic solution of `Z(t) = ℒ*(t)[Z(t+1)] + H(t)`, with `free[t]` the
    /// free term at phase `t`. Returns `Z` for phases `0..period`.
    pub fn periodic_adjoint_solution(&self, free: &[SymTuple]) -> Result<Vec<SymTuple>, OperatorError> {
        let p = self.period();
        assert_eq!(free.len(), p, "one free term per phase");
        let mats: Vec<DMatrix<f64>> = (0..p).map(|t| self.matrix(t, Direction::Adjoint)).collect();
        let h: Vec<DVector<f64>> = free.iter().map(to_coords).collect();
        let d = self.coord_dim();
        // Z(0) = Φᵀ Z(0) + g
        let mut phi_t = DMatrix::identity(d, d);
        let mut g = DVector::zeros(d);
        for t in (0..p).rev() {
            phi_t = &mats[t] * phi_t;
            g = &mats[t] * g + &h[t];
        }
        let system = DMatrix::identity(d, d) - phi_t;
        let z0 = system.lu().solve(&g).ok_or(OperatorError::FixedPoint { residual: f64::INFINITY })?;
        let mut out = vec![DVector::zeros(d); p];
        let mut next = z0.clone();
        for t in (0..p).rev() {
            let z = if t == 0 { z0.clone() } else { &mats[t] * &next + &h[t] };
            out[t] = z.clone();
            next = z;
        }
        let zs: Vec<SymTuple> = out.iter().map(|c| from_coords(self.modes, self.n, c)).collect();
        let mut residual: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for t in 0..p {
            let rhs = &self.apply_adjoint(t, &zs[(t + 1) % p]) + &free[t];
            residual = residual.max((&zs[t] - &rhs).max_norm());
            scale = scale.max(zs[t].max_norm());
        }
        if !(residual <= 1e-9 * scale) {
            return Err(OperatorError::FixedPoint { residual });
        }
        Ok(zs)
    }
}

/// Result of the monodromy spectral-radius computation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralRadius {
    pub rho: f64,
    pub iterations: usize,
    /// `true` when the dense eigen solver replaced power iteration.
    pub used_fallback: bool,
}

/// Spectral radius of a positive operator matrix: power iteration from a
/// point of the cone, falling back to a dense eigen solver when the
/// iteration stagnates or its eigen-residual is poor.
pub fn spectral_radius_of(phi: &DMatrix<f64>, seed: DVector<f64>) -> Result<SpectralRadius, OperatorError> {
    const MAX_ITER: usize = 10_000;
    let scale = phi.norm();
    if scale == 0.0 || phi.nrows() == 0 {
        return Ok(SpectralRadius { rho: 0.0, iterations: 0, used_fallback: false });
    }
    let mut v = &seed / seed.norm();
    let mut lambda = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_ITER {
        let w = phi * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return Ok(SpectralRadius { rho: 0.0, iterations: it, used_fallback: false });
        }
        let prev = lambda;
        lambda = nw;
        v = w / nw;
        if (lambda - prev).abs() < 1e-12 * lambda {
            let av = phi * &v;
            residual = (&av - &v * av.dot(&v)).norm() / scale;
            if residual <= 1e-9 {
                return Ok(SpectralRadius { rho: lambda, iterations: it, used_fallback: false });
            }
            break;
        }
    }
    match nalgebra::linalg::Schur::try_new(phi.clone(), 1e-15, 100_000) {
        Some(schur) => {
            let rho = schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            Ok(SpectralRadius { rho, iterations: MAX_ITER, used_fallback: true })
        }
        None => Err(OperatorError::NonConvergence { power_residual: residual }),
    }
}

/// Periodic solution of `Y(t) = ℒ*(t)[Y(t+1)] + I`; exists iff the operator
/// is exponentially stable.
#[derive(Clone, Debug)]
pub struct StabilityCertificate {
    pub y: Vec<SymTuple>,
    /// Smallest eigenvalue over all phases and modes.
    pub lower: f64,
    /// Largest eigenvalue over all phases and modes.
    pub upper: f64,
    pub rho: f64,
}

pub fn stability_certificate(op: &LyapunovOperator, margin: f64) -> Result<StabilityCertificate, OperatorError> {
    let rho = op.spectral_radius()?.rho;
    if rho >= 1.0 - margin {
        return Err(OperatorError::NotStable { rho });
    }
    let ident = SymTuple::identity(op.modes(), op.dim());
    let y = op.periodic_adjoint_solution(&vec![ident; op.period()])?;
    let lower = y.iter().map(SymTuple::min_eig).fold(f64::INFINITY, f64::min);
    let upper = y.iter().map(SymTuple::max_eig).fold(f64::NEG_INFINITY, f64::max);
    Ok(StabilityCertificate { y, lower, upper, rho })
}

/// Coordinates of a tuple in the orthonormal scaled-vech basis.
pub fn to_coords(x: &SymTuple) -> DVector<f64> {
    let n = x.dim();
    let mut out = Vec::with_capacity(x.modes() * n * (n + 1) / 2);
    for m in x.iter() {
        for r in 0..n {
            out.push(m[(r, r)]);
            for c in r + 1..n {
                out.push(std::f64::consts::SQRT_2 * 0.5 * (m[(r, c)] + m[(c, r)]));
            }
        }
    }
    DVector::from_vec(out)
}

pub fn from_coords(modes: usize, n: usize, v: &DVector<f64>) -> SymTuple {
    let per = n * (n + 1) / 2;
    assert_eq!(v.len(), modes * per);
    let mut entries = Vec::with_capacity(modes);
    for i in 0..modes {
        let mut m = DMatrix::zeros(n, n);
        let mut idx = i * per;
        for r in 0..n {
            m[(r, r)] = v[idx];
            idx += 1;
            for c in r + 1..n {
                let val = v[idx] * std::f64::consts::FRAC_1_SQRT_2;
                m[(r, c)] = val;
                m[(c, r)] = val;
                idx += 1;
            }
        }
        entries.push(m);
    }
    SymTuple::new(entries)
}

fn basis_element(modes: usize, n: usize, index: usize) -> SymTuple {
    let mut v = DVector::zeros(modes * n * (n + 1) / 2);
    v[index] = 1.0;
    from_coords(modes, n, &v)
}
