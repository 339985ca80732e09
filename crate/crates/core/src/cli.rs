//! Command-line driver. Each subcommand prints one JSON report whose
//! `deterministic` section depends only on the inputs and the seed; wall
//! times live in a separate `timings` section.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::canonical;
use crate::game::{self, equilibrium_pair, StrategyPair};
use crate::model::{validate, GainSchedule, ModelError, ProblemSpec};
use crate::operators::LyapunovOperator;
use crate::riccati::{self, RiccatiError, SignClass, SolveOptions, StabilizingSolution};
use crate::sim::{self, NoiseLaw, SimConfig};
use crate::synthesis::{self, GainPair, SynthesisError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATIONS: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_NO_CONVERGENCE: i32 = 4;
pub const EXIT_NOT_STABILIZING: i32 = 5;
pub const EXIT_CHECK_FAILED: i32 = 6;

/// Largest accepted residual of a loaded solution, relative to `max(1, ‖X‖)`.
pub const LOADED_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Parser, Debug)]
#[command(name = "gdtre", version, about = "Stabilizing solutions of game-theoretic Riccati equations for Markov jump systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Noise {
    Gaussian,
    Rademacher,
}

#[derive(clap::Args, Debug, Clone)]
pub struct SolveArgs {
    /// Relative change between iterates one period apart that stops the iteration.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Maximum number of backward sweeps over one period.
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct SimArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub trajectories: usize,
    /// Simulation horizon; chosen from the closed-loop spectral radius when absent.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Initial state as comma-separated values; all ones when absent.
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long, value_enum, default_value_t = Noise::Gaussian)]
    pub noise: Noise,
    #[arg(long)]
    pub antithetic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check the structural assumptions on the chain and the weights.
    Validate { path: PathBuf },
    /// Compute the stabilizing solution and the equilibrium gains.
    Solve {
        path: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Test whether a responder pair (K, W) belongs to the stabilizing class.
    Membership {
        path: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        /// JSON file with "K" and "W" tables; the full-information gains of the solution when absent.
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long)]
        solution: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify detectability of the auxiliary system.
    Detect {
        path: PathBuf,
        /// JSON file with an "H" table; synthesized when absent.
        #[arg(long)]
        injection: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the saddle inequalities exactly and cross-check the value by Monte Carlo.
    Verify {
        path: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        /// Solution report from `solve`; recomputed when absent.
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Random deviations per player.
        #[arg(long, default_value_t = 20)]
        perturbations: usize,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the equilibrium loop and summarize costs and second moments.
    Simulate {
        path: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        #[arg(long)]
        solution: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

/// What a command produced: exit code, deterministic payload and optional
/// alternative text output.
pub struct Outcome {
    pub code: i32,
    pub result: Value,
    pub text: Option<String>,
}

impl Outcome {
    fn new(code: i32, result: Value) -> Self {
        Outcome { code, result, text: None }
    }
}

pub fn spec_digest(spec: &ProblemSpec) -> String {
    hex::encode(Sha256::digest(spec.to_canonical_string().as_bytes()))
}

fn load_spec(path: &Path, solve: Option<&SolveArgs>) -> Result<(ProblemSpec, String), Outcome> {
    let mut spec = ProblemSpec::from_path(path).map_err(|e| {
        Outcome::new(EXIT_PARSE, json!({ "status": "parse-error", "error": e.to_string() }))
    })?;
    let digest = spec_digest(&spec);
    if let Some(args) = solve {
        if let Some(t) = args.tol {
            spec.tol.convergence = t;
        }
        if let Some(s) = args.max_sweeps {
            spec.tol.max_sweeps = s;
        }
    }
    Ok((spec, digest))
}

fn gate(spec: &ProblemSpec) -> Result<(), Outcome> {
    let report = validate(spec);
    if report.is_empty() {
        Ok(())
    } else {
        Err(Outcome::new(EXIT_VIOLATIONS, json!({ "status": "invalid", "violations": report.to_json() })))
    }
}

fn riccati_failure(e: RiccatiError) -> Outcome {
    let (code, status, extra) = match &e {
        RiccatiError::NoConvergence { .. } | RiccatiError::SingularRcal { .. } => (EXIT_NO_CONVERGENCE, "no-convergence", Value::Null),
        RiccatiError::NotStabilizing { solution } | RiccatiError::NotPositive { solution, .. } => {
            (EXIT_NOT_STABILIZING, "not-stabilizing", solution.to_json())
        }
        RiccatiError::NotAdmissible { solution, .. } => {
            (EXIT_NOT_STABILIZING, "not-admissible", solution.as_ref().map_or(Value::Null, |s| s.to_json()))
        }
        RiccatiError::Model(_) => (EXIT_PARSE, "parse-error", Value::Null),
        _ => (EXIT_NOT_STABILIZING, "failed", Value::Null),
    };
    Outcome::new(code, json!({ "status": status, "error": e.to_string(), "limit": extra }))
}

fn read_json(path: &Path) -> Result<Value, Outcome> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Outcome::new(EXIT_PARSE, json!({ "status": "parse-error", "error": format!("cannot read {}: {e}", path.display()) }))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Outcome::new(EXIT_PARSE, json!({ "status": "parse-error", "error": format!("{}: {e}", path.display()) })))
}

/// Loads a solution report and recomputes everything from its `X` tables;
/// solves from scratch when no file is given.
fn obtain_solution(spec: &ProblemSpec, path: Option<&Path>) -> Result<StabilizingSolution, Outcome> {
    let Some(path) = path else {
        return riccati::stabilizing_solve(spec, &spec.tol, &SolveOptions::default()).map_err(riccati_failure);
    };
    let doc = read_json(path)?;
    let node = doc
        .pointer("/deterministic/result/solution")
        .or_else(|| doc.pointer("/result/solution"))
        .unwrap_or(&doc);
    let x = riccati::solution_values_from_json(node, spec)
        .map_err(|e| Outcome::new(EXIT_PARSE, json!({ "status": "parse-error", "error": e.to_string() })))?;
    let residual = riccati::riccati_residual(spec, &x, spec.tol.min_rcond).map_err(riccati_failure)?;
    let scale = x.iter().map(|s| s.max_norm()).fold(1.0, f64::max);
    if !(residual <= LOADED_RESIDUAL_TOL * scale) {
        return Err(Outcome::new(
            EXIT_NOT_STABILIZING,
            json!({ "status": "residual-check-failed", "residual": canonical::num(residual) }),
        ));
    }
    riccati::finalize(spec, x, 0, 0.0, &spec.tol, &SolveOptions::default()).map_err(riccati_failure)
}

fn parse_x0(text: Option<&str>, n: usize) -> Result<DVector<f64>, Outcome> {
    let Some(text) = text else {
        return Ok(DVector::from_element(n, 1.0));
    };
    let vals: Result<Vec<f64>, _> = text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let bad = |msg: String| Outcome::new(EXIT_PARSE, json!({ "status": "parse-error", "error": msg }));
    let mut vals = vals.map_err(|e| bad(format!("--x0: {e}")))?;
    if vals.len() == 1 && n > 1 {
        vals = vec![vals[0]; n];
    }
    if vals.len() != n {
        return Err(bad(format!("--x0 has {} entries, expected {n}", vals.len())));
    }
    Ok(DVector::from_vec(vals))
}

/// Horizon with `ρ^{T/p} < 10⁻⁶`.
pub fn default_horizon(rho: f64, period: usize) -> usize {
    if rho <= 1e-12 {
        return period.max(1) * 2;
    }
    let periods = ((1e-6f64).ln() / rho.ln()).ceil().max(1.0) as usize;
    periods * period
}

fn solution_report(spec: &ProblemSpec, sol: &StabilizingSolution) -> Value {
    let mut out = json!({ "solution": sol.to_json() });
    if sol.margins.class == SignClass::Strong {
        out["mu1"] = canonical::num(sol.margins.delta3);
    }
    match synthesis::full_information_gains(sol, &spec.tol) {
        Ok(fi) => out["full_information"] = fi.pair.to_json(),
        Err(e) => out["full_information"] = json!({ "error": e.to_string() }),
    }
    out
}

fn solution_csv(sol: &StabilizingSolution) -> String {
    let mut out = String::from("phase,mode,row,col,value\n");
    for (t, tup) in sol.x.iter().enumerate() {
        for (i, m) in tup.iter().enumerate() {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push_str(&format!("{t},{i},{r},{c},{}\n", canonical::format_f64(m[(r, c)])));
                }
            }
        }
    }
    out
}

fn cmd_validate(path: &Path) -> Outcome {
    let (spec, _) = match load_spec(path, None) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let report = validate(&spec);
    let code = if report.is_empty() { EXIT_OK } else { EXIT_VIOLATIONS };
    Outcome::new(code, json!({ "status": if report.is_empty() { "valid" } else { "invalid" }, "violations": report.to_json() }))
}

fn cmd_solve(spec: &ProblemSpec, format: Format) -> Outcome {
    if let Err(o) = gate(spec) {
        return o;
    }
    match riccati::stabilizing_solve(spec, &spec.tol, &SolveOptions::default()) {
        Ok(sol) => {
            let mut report = solution_report(spec, &sol);
            report["status"] = json!("ok");
            let mut o = Outcome::new(EXIT_OK, report);
            if format == Format::Csv {
                o.text = Some(solution_csv(&sol));
            }
            o
        }
        Err(e) => riccati_failure(e),
    }
}

fn synthesis_failure(e: SynthesisError) -> Outcome {
    let status = match &e {
        SynthesisError::NotStabilizingGain { .. } => "not-stabilizing-gain",
        SynthesisError::NoStabilizingClosedLoopSolution { .. } => "no-closed-loop-solution",
        SynthesisError::SynthesisFailed(_) => "not-certified",
        _ => "failed",
    };
    Outcome::new(EXIT_NOT_STABILIZING, json!({ "status": status, "error": e.to_string() }))
}

fn cmd_membership(spec: &ProblemSpec, gains: Option<&Path>, solution: Option<&Path>) -> Outcome {
    if let Err(o) = gate(spec) {
        return o;
    }
    let pair = match gains {
        Some(p) => {
            let doc = match read_json(p) {
                Ok(d) => d,
                Err(o) => return o,
            };
            let d = spec.dims;
            let parsed = (|| -> Result<GainPair, ModelError> {
                let k = doc.get("K").ok_or_else(|| ModelError::Dims("gains file needs \"K\"".into()))?;
                let w = doc.get("W").ok_or_else(|| ModelError::Dims("gains file needs \"W\"".into()))?;
                Ok(GainPair { k: GainSchedule::from_json(k, d.m2, d.n, d.modes)?, w: GainSchedule::from_json(w, d.m2, d.m1, d.modes)? })
            })();
            match parsed {
                Ok(pair) => pair,
                Err(e) => return Outcome::new(EXIT_PARSE, json!({ "status": "parse-error", "error": e.to_string() })),
            }
        }
        None => {
            let sol = match obtain_solution(spec, solution) {
                Ok(s) => s,
                Err(o) => return o,
            };
            match synthesis::full_information_gains(&sol, &spec.tol) {
                Ok(fi) => fi.pair,
                Err(e) => return synthesis_failure(e),
            }
        }
    };
    match synthesis::a_sigma_membership(spec, &pair) {
        Ok(report) => Outcome::new(EXIT_OK, json!({ "status": "member", "gains": pair.to_json(), "membership": report.to_json() })),
        Err(e) => synthesis_failure(e),
    }
}

fn cmd_detect(spec: &ProblemSpec, injection: Option<&Path>) -> Outcome {
    if let Err(o) = gate(spec) {
        return o;
    }
    let h = match injection {
        Some(p) => {
            let doc = match read_json(p) {
                Ok(d) => d,
                Err(o) => return o,
            };
            let aux = synthesis::auxiliary_system(spec);
            let raw: Result<Vec<Vec<Vec<Vec<f64>>>>, _> =
                serde_json::from_value(doc.get("H").cloned().unwrap_or(Value::Null));
            match raw {
                Ok(raw) if raw.len() == spec.dims.period && raw.iter().all(|r| r.len() == spec.dims.modes) => {
                    let mut phases = Vec::new();
                    for (t, row) in raw.iter().enumerate() {
                        let mut mats = Vec::new();
                        for (i, m) in row.iter().enumerate() {
                            let cols = aux.c[t][i].nrows();
                            if m.len() != spec.dims.n || m.iter().any(|r| r.len() != cols) {
                                return Outcome::new(
                                    EXIT_PARSE,
                                    json!({ "status": "parse-error", "error": format!("H[{t}][{i}] must be {}x{cols}", spec.dims.n) }),
                                );
                            }
                            mats.push(crate::linalg::from_rows(m));
                        }
                        phases.push(mats);
                    }
                    Some(GainSchedule::new(phases))
                }
                _ => {
                    return Outcome::new(
                        EXIT_PARSE,
                        json!({ "status": "parse-error", "error": "injection file needs an \"H\" table [period][N]" }),
                    )
                }
            }
        }
        None => None,
    };
    match synthesis::auxiliary_detectability(spec, h.as_ref()) {
        Ok(res) => {
            let code = if res.detectable { EXIT_OK } else { EXIT_NOT_STABILIZING };
            Outcome::new(code, json!({ "status": if res.detectable { "detectable" } else { "not-certified" }, "detectability": res.to_json() }))
        }
        Err(e) => synthesis_failure(e),
    }
}

/// Monte Carlo cost of the equilibrium loop against the exact value. The
/// tolerance is three standard errors plus the exact truncation tail.
fn mc_check(spec: &ProblemSpec, sol: &StabilizingSolution, x0: &DVector<f64>, args: &SimArgs) -> Result<(bool, Value), Outcome> {
    let pair = equilibrium_pair(sol);
    let horizon = args.horizon.unwrap_or_else(|| default_horizon(sol.rho_closed, sol.period()));
    let cfg = sim_config(args, horizon);
    let batch = sim::simulate(spec, &pair, x0, &cfg)
        .map_err(|e| Outcome::new(EXIT_PARSE, json!({ "status": "bad-arguments", "error": e.to_string() })))?;
    let summary = batch.cost_summary();
    let pi = spec.markov.distribution_at(0);
    let value = game::game_value(sol, x0, 0, &pi);
    let truncated = finite_horizon_cost(spec, &pair, x0, horizon);
    let tail = (value - truncated).abs();
    let allowed = 3.0 * summary.std_error + tail + 1e-9 * value.abs().max(1e-300);
    let ok = summary.overflowed == 0 && (summary.mean - value).abs() <= allowed;
    Ok((
        ok,
        json!({
            "horizon": horizon,
            "trajectories": cfg.trajectories,
            "noise": format!("{:?}", cfg.noise_law).to_lowercase(),
            "summary": summary.to_json(),
            "game_value": canonical::num(value),
            "finite_horizon_value": canonical::num(truncated),
            "allowed_deviation": canonical::num(allowed),
            "passed": ok,
        }),
    ))
}

/// Exact expected cost over `[0, horizon)` of a linear pair.
pub fn finite_horizon_cost(spec: &ProblemSpec, pair: &StrategyPair, x0: &DVector<f64>, horizon: usize) -> f64 {
    use crate::model::{RiccatiData, SymTuple};
    let gains = pair.stacked();
    let op = LyapunovOperator::closed_loop(spec, &gains);
    let n = spec.dims.n;
    let mut z = SymTuple::zeros(spec.dims.modes, n);
    for t in (0..horizon).rev() {
        let free = SymTuple::new(
            (0..spec.dims.modes)
                .map(|i| {
                    let f = gains.at(t, i);
                    let iff = crate::linalg::vstack(&nalgebra::DMatrix::identity(n, n), f);
                    iff.transpose() * spec.weight_q(t, i) * iff
                })
                .collect(),
        );
        z = &op.apply_adjoint(t, &z) + &free;
    }
    let pi = spec.markov.distribution_at(0);
    z.iter().zip(pi.iter()).map(|(m, p)| p * crate::linalg::quad(m, x0)).sum()
}

fn sim_config(args: &SimArgs, horizon: usize) -> SimConfig {
    SimConfig {
        trajectories: args.trajectories,
        horizon,
        seed: args.seed,
        noise_law: match args.noise {
            Noise::Gaussian => NoiseLaw::Gaussian,
            Noise::Rademacher => NoiseLaw::Rademacher,
        },
        antithetic: args.antithetic,
        t0: 0,
    }
}

fn cmd_verify(spec: &ProblemSpec, solution: Option<&Path>, perturbations: usize, args: &SimArgs) -> Outcome {
    if let Err(o) = gate(spec) {
        return o;
    }
    let sol = match obtain_solution(spec, solution) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let x0 = match parse_x0(args.x0.as_deref(), spec.dims.n) {
        Ok(x) => x,
        Err(o) => return o,
    };
    let mut passed = true;
    let mut result = json!({ "residual": canonical::num(sol.residual), "sign": sol.margins.to_json() });

    if sol.margins.class == SignClass::Strong {
        let perts = game::random_perturbations(spec, &sol, perturbations, 0.1, args.seed);
        match game::verify_saddle_point(spec, &sol, &perts, &x0, 0) {
            Ok(rep) => {
                passed &= rep.passed();
                if let Some(row) = rep.first_violation() {
                    result["offending_perturbation"] = json!({ "player": row.player, "index": row.index, "gap": canonical::num(row.gap) });
                }
                result["saddle"] = rep.to_json();
            }
            Err(e) => {
                passed = false;
                result["saddle"] = json!({ "error": e.to_string() });
            }
        }
    } else {
        result["saddle"] = json!({ "skipped": format!("sign class is {}, not strong", sol.margins.class) });
    }

    match synthesis::full_information_gains(&sol, &spec.tol) {
        Ok(fi) => {
            let perts = game::random_perturbations(spec, &sol, perturbations, 0.1, args.seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut rows = Vec::new();
            for p in perts.iter().filter(|p| p.player == 1) {
                match game::full_information_value_identity(spec, &sol, &fi, &p.delta, &x0, 0) {
                    Ok(r) => {
                        passed &= r.agree && r.below_equilibrium;
                        rows.push(r.to_json());
                    }
                    Err(game::GameError::UnstablePair { rho }) => rows.push(json!({ "skipped_unstable": canonical::num(rho) })),
                    Err(e) => {
                        passed = false;
                        rows.push(json!({ "error": e.to_string() }));
                    }
                }
            }
            result["full_information"] = Value::Array(rows);
        }
        Err(e) => {
            passed = false;
            result["full_information"] = json!({ "error": e.to_string() });
        }
    }

    match mc_check(spec, &sol, &x0, args) {
        Ok((ok, table)) => {
            passed &= ok;
            result["monte_carlo"] = table;
        }
        Err(o) => return o,
    }
    result["status"] = json!(if passed { "passed" } else { "failed" });
    Outcome::new(if passed { EXIT_OK } else { EXIT_CHECK_FAILED }, result)
}

fn cmd_simulate(spec: &ProblemSpec, solution: Option<&Path>, args: &SimArgs, format: Format) -> Outcome {
    if let Err(o) = gate(spec) {
        return o;
    }
    let sol = match obtain_solution(spec, solution) {
        Ok(s) => s,
        Err(o) => return o,
    };
    let x0 = match parse_x0(args.x0.as_deref(), spec.dims.n) {
        Ok(x) => x,
        Err(o) => return o,
    };
    let horizon = args.horizon.unwrap_or_else(|| default_horizon(sol.rho_closed, sol.period()));
    let cfg = sim_config(args, horizon);
    let batch = match sim::simulate(spec, &equilibrium_pair(&sol), &x0, &cfg) {
        Ok(b) => b,
        Err(e) => return Outcome::new(EXIT_PARSE, json!({ "status": "bad-arguments", "error": e.to_string() })),
    };
    let (overall, _) = batch.second_moments(spec.dims.modes);
    let decay = sim::empirical_decay(&batch, spec.dims.modes, (1.min(horizon - 1), horizon));
    let mut o = Outcome::new(
        EXIT_OK,
        json!({
            "status": "ok",
            "horizon": horizon,
            "cost": batch.cost_summary().to_json(),
            "game_value": canonical::num(game::game_value(&sol, &x0, 0, &spec.markov.distribution_at(0))),
            "second_moment": overall.iter().map(|&v| canonical::num(v)).collect::<Vec<_>>(),
            "decay_slope": decay.as_ref().map_or(Value::Null, |d| canonical::num(d.slope)),
            "log_rho_per_step": canonical::num(sol.rho_closed.ln() / sol.period() as f64),
        }),
    );
    if format == Format::Csv {
        o.text = Some(batch.moments_csv(spec.dims.modes));
    }
    o
}

fn command_echo(cmd: &Command) -> Value {
    json!(format!("{cmd:?}"))
}

/// Runs one command; returns the exit code and the full report text.
pub fn execute(cli: &Cli) -> (i32, String) {
    let start = Instant::now();
    let (path, solve_args) = match &cli.command {
        Command::Validate { path } => (path, None),
        Command::Solve { path, solve, .. }
        | Command::Membership { path, solve, .. }
        | Command::Verify { path, solve, .. }
        | Command::Simulate { path, solve, .. } => (path, Some(solve)),
        Command::Detect { path, .. } => (path, None),
    };
    let (digest, outcome) = match load_spec(path, solve_args) {
        Err(o) => (Value::Null, o),
        Ok((spec, digest)) => {
            let outcome = match &cli.command {
                Command::Validate { path } => cmd_validate(path),
                Command::Solve { format, .. } => cmd_solve(&spec, *format),
                Command::Membership { gains, solution, .. } => cmd_membership(&spec, gains.as_deref(), solution.as_deref()),
                Command::Detect { injection, .. } => cmd_detect(&spec, injection.as_deref()),
                Command::Verify { solution, perturbations, sim, .. } => cmd_verify(&spec, solution.as_deref(), *perturbations, sim),
                Command::Simulate { solution, sim, format, .. } => cmd_simulate(&spec, solution.as_deref(), sim, *format),
            };
            (json!(digest), outcome)
        }
    };
    let report = json!({
        "deterministic": {
            "command": command_echo(&cli.command),
            "exit_code": outcome.code,
            "spec_digest": digest,
            "result": outcome.result,
            "version": env!("CARGO_PKG_VERSION"),
        },
        "timings": { "elapsed_seconds": canonical::num(start.elapsed().as_secs_f64()) },
    });
    let text = outcome.text.unwrap_or_else(|| canonical::to_string_pretty(&report));
    let out = match &cli.command {
        Command::Solve { out, .. }
        | Command::Membership { out, .. }
        | Command::Detect { out, .. }
        | Command::Verify { out, .. }
        | Command::Simulate { out, .. } => out.as_ref(),
        Command::Validate { .. } => None,
    };
    if let Some(out) = out {
        if let Err(e) = std::fs::write(out, canonical::to_string_pretty(&report)) {
            eprintln!("cannot write {}: {e}", out.display());
        }
    }
    (outcome.code, text)
}

pub fn run_from_env() -> i32 {
    sim::configure_threads();
    let cli = Cli::parse();
    let (code, text) = execute(&cli);
    print!("{text}");
    code
}
