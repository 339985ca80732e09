//! Exact costs of linear strategy pairs and the two saddle-point checks.
//!
//! For a linear state-feedback pair the infinite-horizon cost is
//! `x₀ᵀ Z(t₀, θ) x₀` where `Z` is the periodic solution of
//! `Z(t) = ℒ*_F(t)[Z(t+1)] + [I; F]ᵀ Q [I; F]`. Deviations from the
//! equilibrium cost `(u − F̃x)ᵀ ℛ (u − F̃x)` per step, which is evaluated by a
//! second Lyapunov solve with that free term.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::linalg;
use crate::model::{GainSchedule, ProblemSpec, RiccatiData, SymTuple};
use crate::operators::{lcm, LyapunovOperator, OperatorError};
use crate::riccati::{SignClass, StabilizingSolution};
use crate::synthesis::{stack_gain, FullInfoGains, GainPair};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("strategy pair is not stabilizing (spectral radius {rho}); the cost is undefined")]
    UnstablePair { rho: f64 },
    #[error("saddle inequality violated by a player-{player} deviation #{index} (gap {gap:.3e})")]
    SaddleViolation { player: u8, index: usize, gap: f64 },
    #[error("state-feedback saddle check needs the strong sign condition, solution is {0}")]
    NotStrong(SignClass),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Linear strategies. In the full-information form player 2 answers
/// `u₂ = K x + W u₁`.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategyPair {
    StateFeedback { f1: GainSchedule, f2: GainSchedule },
    FullInformation { f1: GainSchedule, responder: GainPair },
}

impl StrategyPair {
    pub fn player1(&self) -> &GainSchedule {
        match self {
            StrategyPair::StateFeedback { f1, .. } | StrategyPair::FullInformation { f1, .. } => f1,
        }
    }

    /// The equivalent state-feedback gain of player 2.
    pub fn player2(&self) -> GainSchedule {
        match self {
            StrategyPair::StateFeedback { f2, .. } => f2.clone(),
            StrategyPair::FullInformation { f1, responder } => {
                let period = lcm(lcm(f1.period(), responder.k.period()), responder.w.period());
                let modes = f1.modes();
                GainSchedule::new(
                    (0..period)
                        .map(|t| (0..modes).map(|i| responder.k.at(t, i) + responder.w.at(t, i) * f1.at(t, i)).collect())
                        .collect(),
                )
            }
        }
    }

    /// Stacked `[F₁; F₂]`.
    pub fn stacked(&self) -> GainSchedule {
        self.player1().zip_map(&self.player2(), stack_gain)
    }

    /// Controls at `(t, θ_t, x(t))`.
    pub fn controls(&self, t: usize, mode: usize, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let u1 = self.player1().at(t, mode) * x;
        let u2 = match self {
            StrategyPair::StateFeedback { f2, .. } => f2.at(t, mode) * x,
            StrategyPair::FullInformation { responder, .. } => {
                responder.k.at(t, mode) * x + responder.w.at(t, mode) * &u1
            }
        };
        (u1, u2)
    }
}

/// Equilibrium pair `(F̃₁, F̃₂)` of a solution.
pub fn equilibrium_pair(sol: &StabilizingSolution) -> StrategyPair {
    StrategyPair::StateFeedback { f1: sol.gains1(), f2: sol.gains2() }
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub value_per_mode: Vec<f64>,
    pub expected_value: f64,
    pub stable: bool,
    pub rho: f64,
    /// Cost tuple `Z(t)` per phase.
    pub z: Vec<SymTuple>,
}

impl CostReport {
    pub fn to_json(&self) -> Value {
        json!({
            "value_per_mode": self.value_per_mode.iter().map(|&v| canonical::num(v)).collect::<Vec<_>>(),
            "expected_value": canonical::num(self.expected_value),
            "stable": self.stable,
            "rho": canonical::num(self.rho),
        })
    }
}

fn evaluate(z: &[SymTuple], pi: &DVector<f64>, x0: &DVector<f64>, t0: usize) -> (Vec<f64>, f64) {
    let zt = &z[t0 % z.len()];
    let per_mode: Vec<f64> = zt.iter().map(|m| linalg::quad(m, x0)).collect();
    let expected = per_mode.iter().zip(pi.iter()).map(|(v, p)| v * p).sum();
    (per_mode, expected)
}

/// Periodic solution of `Z = ℒ*_F[Z] + free(t,i)` for stacked gains `F`.
pub fn closed_loop_lyapunov(
    spec: &ProblemSpec,
    gains: &GainSchedule,
    free: impl Fn(usize, usize, &DMatrix<f64>) -> DMatrix<f64>,
) -> Result<(Vec<SymTuple>, f64), GameError> {
    let op = LyapunovOperator::closed_loop(spec, gains);
    let rho = op.spectral_radius()?.rho;
    if rho >= 1.0 - spec.tol.stability_margin {
        return Err(GameError::UnstablePair { rho });
    }
    let terms: Vec<SymTuple> = (0..op.period())
        .map(|t| SymTuple::new((0..spec.dims.modes).map(|i| free(t, i, gains.at(t, i))).collect()))
        .collect();
    Ok((op.periodic_adjoint_solution(&terms)?, rho))
}

/// Infinite-horizon cost of a linear pair.
pub fn exact_cost(spec: &ProblemSpec, pair: &StrategyPair, x0: &DVector<f64>, t0: usize) -> Result<CostReport, GameError> {
    let gains = pair.stacked();
    let n = spec.dims.n;
    let (z, rho) = closed_loop_lyapunov(spec, &gains, |t, i, f| {
        let iff = linalg::vstack(&DMatrix::identity(n, n), f);
        iff.transpose() * spec.weight_q(t, i) * iff
    })?;
    let pi = spec.markov.distribution_at(t0);
    let (value_per_mode, expected_value) = evaluate(&z, &pi, x0, t0);
    Ok(CostReport { value_per_mode, expected_value, stable: true, rho, z })
}

/// `Σᵢ π(i) x₀ᵀ X̃(t₀, i) x₀`.
pub fn game_value(sol: &StabilizingSolution, x0: &DVector<f64>, t0: usize, pi: &DVector<f64>) -> f64 {
    sol.at(t0).iter().zip(pi.iter()).map(|(x, p)| p * linalg::quad(x, x0)).sum()
}

/// Cost of `gains` minus the equilibrium value, computed as the Lyapunov
/// evaluation of `(F − F̃)ᵀ ℛ (F − F̃)` along the loop closed by `gains`.
pub fn deviation_penalty(
    spec: &ProblemSpec,
    sol: &StabilizingSolution,
    gains: &GainSchedule,
    weight: impl Fn(usize, usize, &DMatrix<f64>) -> DMatrix<f64>,
    x0: &DVector<f64>,
    t0: usize,
) -> Result<f64, GameError> {
    let (z, _) = closed_loop_lyapunov(spec, gains, |t, i, f| {
        let d = f - sol.gains.at(t, i);
        weight(t, i, &d)
    })?;
    let pi = spec.markov.distribution_at(t0);
    Ok(evaluate(&z, &pi, x0, t0).1)
}

/// A gain deviation of one player.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub player: u8,
    pub delta: GainSchedule,
}

#[derive(Clone, Debug)]
pub struct SaddleRow {
    pub player: u8,
    pub index: usize,
    pub stable: bool,
    pub rho: f64,
    pub cost: f64,
    /// `cost − equilibrium`.
    pub gap: f64,
    /// Independent Lyapunov evaluation of the gap.
    pub penalty: f64,
    pub ordering_ok: bool,
    pub decomposition_ok: bool,
}

#[derive(Clone, Debug)]
pub struct SaddleReport {
    pub equilibrium: f64,
    pub rows: Vec<SaddleRow>,
    pub skipped: usize,
}

impl SaddleReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| !r.stable || (r.ordering_ok && r.decomposition_ok))
    }

    pub fn first_violation(&self) -> Option<&SaddleRow> {
        self.rows.iter().find(|r| r.stable && !(r.ordering_ok && r.decomposition_ok))
    }

    pub fn to_json(&self) -> Value {
        json!({
            "equilibrium": canonical::num(self.equilibrium),
            "skipped_unstable": self.skipped,
            "passed": self.passed(),
            "rows": self.rows.iter().map(|r| json!({
                "player": r.player,
                "index": r.index,
                "stable": r.stable,
                "rho": canonical::num(r.rho),
                "cost": canonical::num(r.cost),
                "gap": canonical::num(r.gap),
                "penalty": canonical::num(r.penalty),
                "ordering_ok": r.ordering_ok,
                "decomposition_ok": r.decomposition_ok,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Relative tolerance of the saddle inequalities and gap identities.
pub const SADDLE_RTOL: f64 = 1e-8;

/// Checks `J(F₁, F̃₂) ≤ J(F̃₁, F̃₂) ≤ J(F̃₁, F₂)` for each deviation and that
/// every gap equals its Lyapunov-evaluated penalty.
pub fn verify_saddle_point(
    spec: &ProblemSpec,
    sol: &StabilizingSolution,
    perturbations: &[Perturbation],
    x0: &DVector<f64>,
    t0: usize,
) -> Result<SaddleReport, GameError> {
    if sol.margins.class != SignClass::Strong {
        return Err(GameError::NotStrong(sol.margins.class));
    }
    let pi = spec.markov.distribution_at(t0);
    let equilibrium = game_value(sol, x0, t0, &pi);
    let (f1, f2) = (sol.gains1(), sol.gains2());
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (index, p) in perturbations.iter().enumerate() {
        let pair = if p.player == 1 {
            StrategyPair::StateFeedback { f1: f1.zip_map(&p.delta, |a, b| a + b), f2: f2.clone() }
        } else {
            StrategyPair::StateFeedback { f1: f1.clone(), f2: f2.zip_map(&p.delta, |a, b| a + b) }
        };
        let cost = match exact_cost(spec, &pair, x0, t0) {
            Ok(c) => c,
            Err(GameError::UnstablePair { rho }) => {
                skipped += 1;
                rows.push(SaddleRow {
                    player: p.player,
                    index,
                    stable: false,
                    rho,
                    cost: f64::NAN,
                    gap: f64::NAN,
                    penalty: f64::NAN,
                    ordering_ok: true,
                    decomposition_ok: true,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let gains = pair.stacked();
        let penalty = deviation_penalty(
            spec,
            sol,
            &gains,
            |t, i, d| d.transpose() * &sol.rcal[t % sol.period()][i] * d,
            x0,
            t0,
        )?;
        let gap = cost.expected_value - equilibrium;
        let scale = equilibrium.abs().max(cost.expected_value.abs()).max(f64::MIN_POSITIVE);
        let slack = SADDLE_RTOL * scale;
        let ordering_ok = if p.player == 1 { gap <= slack } else { gap >= -slack };
        let decomposition_ok = (gap - penalty).abs() <= slack;
        rows.push(SaddleRow {
            player: p.player,
            index,
            stable: true,
            rho: cost.rho,
            cost: cost.expected_value,
            gap,
            penalty,
            ordering_ok,
            decomposition_ok,
        });
    }
    Ok(SaddleReport { equilibrium, rows, skipped })
}

/// Draws `count` deviations per player with standard normal entries scaled
/// by `scale`, halving each until the perturbed pair is stabilizing.
pub fn random_perturbations(
    spec: &ProblemSpec,
    sol: &StabilizingSolution,
    count: usize,
    scale: f64,
    seed: u64,
) -> Vec<Perturbation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.dims;
    let mut out = Vec::with_capacity(2 * count);
    for player in [1u8, 2u8] {
        let rows = if player == 1 { d.m1 } else { d.m2 };
        for _ in 0..count {
            let raw = GainSchedule::new(
                (0..sol.period())
                    .map(|_| {
                        (0..d.modes)
                            .map(|_| DMatrix::from_fn(rows, d.n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                            .collect()
                    })
                    .collect(),
            );
            let mut s = scale;
            let mut chosen = raw.map(|_, _, g| g * s);
            for _ in 0..30 {
                let delta = raw.map(|_, _, g| g * s);
                let stacked = if player == 1 {
                    sol.gains1().zip_map(&delta, |a, b| a + b).zip_map(&sol.gains2(), stack_gain)
                } else {
                    sol.gains1().zip_map(&sol.gains2().zip_map(&delta, |a, b| a + b), stack_gain)
                };
                chosen = delta;
                let stable = LyapunovOperator::closed_loop(spec, &stacked)
                    .is_stable(spec.tol.stability_margin)
                    .map(|(ok, _)| ok)
                    .unwrap_or(false);
                if stable {
                    break;
                }
                s *= 0.5;
            }
            out.push(Perturbation { player, delta: chosen });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct FullInfoReport {
    pub equilibrium: f64,
    /// Cost of `u₁ = (F̃₁ + δ)x` against the responder, by direct evaluation.
    pub direct: f64,
    /// `equilibrium − penalty`.
    pub via_penalty: f64,
    pub penalty: f64,
    pub agree: bool,
    pub below_equilibrium: bool,
}

impl FullInfoReport {
    pub fn to_json(&self) -> Value {
        json!({
            "equilibrium": canonical::num(self.equilibrium),
            "direct": canonical::num(self.direct),
            "via_penalty": canonical::num(self.via_penalty),
            "penalty": canonical::num(self.penalty),
            "agree": self.agree,
            "below_equilibrium": self.below_equilibrium,
        })
    }
}

/// Plays `u₁ = (F̃₁ + δ)x` against `u₂ = K̃x + W̃u₁` and checks that the cost
/// equals the equilibrium value minus the `V₁₁`-weighted penalty.
pub fn full_information_value_identity(
    spec: &ProblemSpec,
    sol: &StabilizingSolution,
    fi: &FullInfoGains,
    delta: &GainSchedule,
    x0: &DVector<f64>,
    t0: usize,
) -> Result<FullInfoReport, GameError> {
    let f1 = sol.gains1().zip_map(delta, |a, b| a + b);
    let pair = StrategyPair::FullInformation { f1, responder: fi.pair.clone() };
    let direct = exact_cost(spec, &pair, x0, t0)?.expected_value;
    let pi = spec.markov.distribution_at(t0);
    let equilibrium = game_value(sol, x0, t0, &pi);
    let m1 = sol.m1;
    let penalty = deviation_penalty(
        spec,
        sol,
        &pair.stacked(),
        |t, i, d| {
            let v11 = &fi.factors[t % fi.factors.len()][i].v11;
            let d1 = linalg::rows(d, 0, m1);
            let w = v11 * d1;
            w.transpose() * w
        },
        x0,
        t0,
    )?;
    let via_penalty = equilibrium - penalty;
    let scale = equilibrium.abs().max(direct.abs()).max(f64::MIN_POSITIVE);
    Ok(FullInfoReport {
        equilibrium,
        direct,
        via_penalty,
        penalty,
        agree: (direct - via_penalty).abs() <= SADDLE_RTOL * scale,
        below_equilibrium: direct <= equilibrium + SADDLE_RTOL * scale,
    })
}

/// `J = J̃ + E Σ|V₂₁δ₁ + V₂₂δ₂|² − E Σ|V₁₁δ₁|²` with each term from its own
/// Lyapunov solve; returns `(direct, equilibrium, plus, minus)`.
pub fn cost_decomposition(
    spec: &ProblemSpec,
    sol: &StabilizingSolution,
    fi: &FullInfoGains,
    pair: &StrategyPair,
    x0: &DVector<f64>,
    t0: usize,
) -> Result<(f64, f64, f64, f64), GameError> {
    let direct = exact_cost(spec, pair, x0, t0)?.expected_value;
    let pi = spec.markov.distribution_at(t0);
    let equilibrium = game_value(sol, x0, t0, &pi);
    let gains = pair.stacked();
    let m1 = sol.m1;
    let factor = |t: usize, i: usize| &fi.factors[t % fi.factors.len()][i];
    let plus = deviation_penalty(
        spec,
        sol,
        &gains,
        |t, i, d| {
            let v = factor(t, i);
            let w = &v.v21 * linalg::rows(d, 0, m1) + &v.v22 * linalg::rows(d, m1, d.nrows() - m1);
            w.transpose() * w
        },
        x0,
        t0,
    )?;
    let minus = deviation_penalty(
        spec,
        sol,
        &gains,
        |t, i, d| {
            let w = &factor(t, i).v11 * linalg::rows(d, 0, m1);
            w.transpose() * w
        },
        x0,
        t0,
    )?;
    Ok((direct, equilibrium, plus, minus))
}
