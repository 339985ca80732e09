//! Monte Carlo simulation of the jump system under linear strategies.
//!
//! Every trajectory owns an RNG stream keyed by `(seed, index)`, so a batch
//! is bit-identical whatever the thread count. Sums over trajectories use a
//! fixed pairwise tree.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::linalg;
use crate::model::{MarkovSpec, ProblemSpec, RiccatiData};
use crate::game::StrategyPair;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("state second moment falls below the noise floor before the end of the window")]
    InsufficientDecay,
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Trajectories whose state norm exceeds this are flagged and stopped.
pub const OVERFLOW_NORM: f64 = 1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseLaw {
    Gaussian,
    Rademacher,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
    pub noise_law: NoiseLaw,
    /// Pairs trajectories `2k`, `2k+1` on the same stream with opposite noise.
    pub antithetic: bool,
    pub t0: usize,
}

impl SimConfig {
    pub fn new(trajectories: usize, horizon: usize, seed: u64) -> Self {
        SimConfig { trajectories, horizon, seed, noise_law: NoiseLaw::Gaussian, antithetic: false, t0: 0 }
    }

    fn check(&self) -> Result<(), SimError> {
        if self.trajectories == 0 || self.horizon == 0 {
            return Err(SimError::Config("trajectories and horizon must be >= 1".into()));
        }
        if self.antithetic && self.trajectories % 2 == 1 {
            return Err(SimError::Config("antithetic sampling needs an even trajectory count".into()));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_index(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        if p > 0.0 {
            last = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last
}

/// Mode paths `θ_{t₀}, …, θ_{t₀+T}`, one per trajectory.
pub fn sample_chain(markov: &MarkovSpec, t0: usize, horizon: usize, trajectories: usize, seed: u64) -> Vec<Vec<usize>> {
    let pi = markov.distribution_at(t0);
    (0..trajectories)
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let mut path = Vec::with_capacity(horizon + 1);
            let mut mode = sample_index(&mut rng, pi.iter().copied());
            path.push(mode);
            for s in 0..horizon {
                let p = markov.transition(t0 + s);
                mode = sample_index(&mut rng, p.row(mode).iter().copied());
                path.push(mode);
            }
            path
        })
        .collect()
}

/// States, modes and costs of a batch; flat arrays, trajectory-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub n: usize,
    pub horizon: usize,
    pub trajectories: usize,
    pub antithetic: bool,
    /// `states[(k·(T+1) + s)·n + j]`
    pub states: Vec<f64>,
    /// `modes[k·(T+1) + s]`
    pub modes: Vec<usize>,
    /// Cost accumulated over `[t₀, t₀+T)`; `NaN` for flagged trajectories.
    pub costs: Vec<f64>,
    pub overflowed: Vec<bool>,
}

impl TrajectoryBatch {
    pub fn state(&self, k: usize, s: usize) -> &[f64] {
        let base = (k * (self.horizon + 1) + s) * self.n;
        &self.states[base..base + self.n]
    }

    pub fn mode(&self, k: usize, s: usize) -> usize {
        self.modes[k * (self.horizon + 1) + s]
    }

    pub fn overflow_count(&self) -> usize {
        self.overflowed.iter().filter(|&&o| o).count()
    }

    /// Independent samples of the cost: single trajectories, or pair means
    /// under antithetic sampling. Flagged trajectories are dropped.
    fn cost_samples(&self) -> Vec<f64> {
        if self.antithetic {
            self.costs
                .chunks(2)
                .zip(self.overflowed.chunks(2))
                .filter(|(_, o)| !o[0] && !o[1])
                .map(|(c, _)| 0.5 * (c[0] + c[1]))
                .collect()
        } else {
            self.costs.iter().zip(&self.overflowed).filter(|(_, o)| !**o).map(|(c, _)| *c).collect()
        }
    }

    pub fn cost_summary(&self) -> CostSummary {
        let samples = self.cost_samples();
        let count = samples.len();
        let mean = pairwise_sum(&samples) / count as f64;
        let dev: Vec<f64> = samples.iter().map(|c| (c - mean) * (c - mean)).collect();
        let var = if count > 1 { pairwise_sum(&dev) / (count - 1) as f64 } else { 0.0 };
        CostSummary { mean, std_error: (var / count as f64).sqrt(), samples: count, overflowed: self.overflow_count() }
    }

    /// `E|x(s)|²` per step, overall and conditioned on the initial mode.
    pub fn second_moments(&self, modes: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let kept: Vec<usize> = (0..self.trajectories).filter(|&k| !self.overflowed[k]).collect();
        let mut overall = Vec::with_capacity(self.horizon + 1);
        let mut per_mode = vec![Vec::with_capacity(self.horizon + 1); modes];
        for s in 0..=self.horizon {
            let sq: Vec<f64> = kept.iter().map(|&k| self.state(k, s).iter().map(|v| v * v).sum()).collect();
            overall.push(pairwise_sum(&sq) / kept.len().max(1) as f64);
            for (i, out) in per_mode.iter_mut().enumerate() {
                let sel: Vec<f64> = kept.iter().zip(&sq).filter(|(&k, _)| self.mode(k, 0) == i).map(|(_, v)| *v).collect();
                out.push(if sel.is_empty() { f64::NAN } else { pairwise_sum(&sel) / sel.len() as f64 });
            }
        }
        (overall, per_mode)
    }

    /// Per-step `E|x|²` for each initial mode, as CSV.
    pub fn moments_csv(&self, modes: usize) -> String {
        let (overall, per_mode) = self.second_moments(modes);
        let mut out = String::from("step,all");
        for i in 0..modes {
            out.push_str(&format!(",mode{i}"));
        }
        out.push('\n');
        for s in 0..=self.horizon {
            out.push_str(&format!("{s},{}", canonical::format_f64(overall[s])));
            for row in &per_mode {
                out.push_str(&format!(",{}", canonical::format_f64(row[s])));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostSummary {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub overflowed: usize,
}

impl CostSummary {
    pub fn to_json(&self) -> Value {
        json!({
            "mean": canonical::num(self.mean),
            "std_error": canonical::num(self.std_error),
            "samples": self.samples,
            "overflowed": self.overflowed,
        })
    }
}

/// Sum in a fixed binary tree order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        len if len <= 8 => v.iter().sum(),
        len => {
            let mid = len / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

struct Trajectory {
    states: Vec<f64>,
    modes: Vec<usize>,
    cost: f64,
    overflowed: bool,
}

fn draw(rng: &mut ChaCha8Rng, law: NoiseLaw) -> f64 {
    match law {
        NoiseLaw::Gaussian => rng.sample(StandardNormal),
        NoiseLaw::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    }
}

fn run_one(spec: &ProblemSpec, pair: &StrategyPair, x0: &DVector<f64>, cfg: &SimConfig, pi: &DVector<f64>, k: usize) -> Trajectory {
    let d = spec.dims;
    let (stream, sign) = if cfg.antithetic { ((k / 2) as u64, if k % 2 == 0 { 1.0 } else { -1.0 }) } else { (k as u64, 1.0) };
    let mut rng = stream_rng(cfg.seed, stream);
    let len = cfg.horizon + 1;
    let mut states = vec![f64::NAN; len * d.n];
    let mut modes = vec![usize::MAX; len];
    let mut x = x0.clone();
    let mut mode = sample_index(&mut rng, pi.iter().copied());
    let mut cost = 0.0;
    states[..d.n].copy_from_slice(x.as_slice());
    modes[0] = mode;
    let mut w = vec![0.0; d.r];
    for s in 0..cfg.horizon {
        let t = cfg.t0 + s;
        let (u1, u2) = pair.controls(t, mode, &x);
        let mut u = DVector::zeros(d.m());
        u.rows_mut(0, d.m1).copy_from(&u1);
        u.rows_mut(d.m1, d.m2).copy_from(&u2);
        let mut xu = DVector::zeros(d.n + d.m());
        xu.rows_mut(0, d.n).copy_from(&x);
        xu.rows_mut(d.n, d.m()).copy_from(&u);
        cost += linalg::quad(&spec.weight_q(t, mode), &xu);
        for wk in w.iter_mut() {
            *wk = sign * draw(&mut rng, cfg.noise_law);
        }
        let mut next = spec.a(t, mode, 0) * &x + spec.b(t, mode, 0) * &u;
        for (k, wk) in w.iter().enumerate() {
            next += (spec.a(t, mode, k + 1) * &x + spec.b(t, mode, k + 1) * &u) * *wk;
        }
        mode = sample_index(&mut rng, spec.transition(t).row(mode).iter().copied());
        x = next;
        if !(x.norm() <= OVERFLOW_NORM) {
            return Trajectory { states, modes, cost: f64::NAN, overflowed: true };
        }
        states[(s + 1) * d.n..(s + 2) * d.n].copy_from_slice(x.as_slice());
        modes[s + 1] = mode;
    }
    Trajectory { states, modes, cost, overflowed: false }
}

/// Simulates `cfg.trajectories` paths of the closed loop from `x₀` at `t₀`.
/// Controls see only `(t, θ_t, x(t))` and, for the responder, `u₁(t)`.
pub fn simulate(spec: &ProblemSpec, pair: &StrategyPair, x0: &DVector<f64>, cfg: &SimConfig) -> Result<TrajectoryBatch, SimError> {
    cfg.check()?;
    if x0.len() != spec.dims.n {
        return Err(SimError::Config(format!("x0 has length {}, expected {}", x0.len(), spec.dims.n)));
    }
    let pi = spec.markov.distribution_at(cfg.t0);
    let runs: Vec<Trajectory> = (0..cfg.trajectories).into_par_iter().map(|k| run_one(spec, pair, x0, cfg, &pi, k)).collect();
    let mut batch = TrajectoryBatch {
        n: spec.dims.n,
        horizon: cfg.horizon,
        trajectories: cfg.trajectories,
        antithetic: cfg.antithetic,
        states: Vec::with_capacity(cfg.trajectories * (cfg.horizon + 1) * spec.dims.n),
        modes: Vec::with_capacity(cfg.trajectories * (cfg.horizon + 1)),
        costs: Vec::with_capacity(cfg.trajectories),
        overflowed: Vec::with_capacity(cfg.trajectories),
    };
    for r in runs {
        batch.states.extend_from_slice(&r.states);
        batch.modes.extend_from_slice(&r.modes);
        batch.costs.push(r.cost);
        batch.overflowed.push(r.overflowed);
    }
    Ok(batch)
}

/// Least-squares slopes of `log E|x(s)|²` over `window`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayEstimate {
    pub slope: f64,
    /// Slope conditioned on the initial mode; `None` if that mode never starts.
    pub per_mode: Vec<Option<f64>>,
}

fn ls_slope(ys: &[(f64, f64)]) -> f64 {
    let k = ys.len() as f64;
    let mx = ys.iter().map(|p| p.0).sum::<f64>() / k;
    let my = ys.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = ys.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = ys.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Slope per step of `log E|x|²` over steps `window.0..=window.1`.
pub fn empirical_decay(batch: &TrajectoryBatch, modes: usize, window: (usize, usize)) -> Result<DecayEstimate, SimError> {
    let (lo, hi) = window;
    if hi > batch.horizon || hi <= lo {
        return Err(SimError::Config(format!("bad decay window {lo}..={hi}")));
    }
    let (overall, per_mode) = batch.second_moments(modes);
    let fit = |series: &[f64]| -> Result<f64, SimError> {
        let pts: Vec<(f64, f64)> = (lo..=hi).map(|s| (s as f64, series[s])).collect();
        if pts.iter().any(|(_, v)| !(v.is_finite() && *v > 1e-290)) {
            return Err(SimError::InsufficientDecay);
        }
        Ok(ls_slope(&pts.iter().map(|(s, v)| (*s, v.ln())).collect::<Vec<_>>()))
    };
    let slope = fit(&overall)?;
    let per_mode = per_mode.iter().map(|s| if s[0].is_nan() { None } else { fit(s).ok() }).collect();
    Ok(DecayEstimate { slope, per_mode })
}

/// Caps rayon's pool at `GDTRE_THREADS` when set. Safe to call repeatedly.
pub fn configure_threads() {
    if let Some(n) = std::env::var("GDTRE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn chain_examples() {
        let ident = MarkovSpec { transitions: vec![DMatrix::identity(2, 2)], initial: DVector::from_vec(vec![0.5, 0.5]) };
        for path in sample_chain(&ident, 0, 10, 20, 1) {
            assert!(path.iter().all(|&m| m == path[0]));
        }
        let swap = MarkovSpec {
            transitions: vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])],
            initial: DVector::from_vec(vec![0.5, 0.5]),
        };
        for path in sample_chain(&swap, 0, 10, 20, 1) {
            assert!(path.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
    }
}
