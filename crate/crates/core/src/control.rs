//! Tracking cost over the admissible field class and a projected-descent
//! optimizer.
//!
//! The workflow has three stages. [`make_target`] runs the transport solver
//! under a chosen field and freezes the resulting end state as the target:
//! both the final marker ensemble (whose value multiset — and therefore every
//! discrete L^p norm — is exactly the initial datum's) and the end-state
//! density evaluated on the fixed sampling lattice. [`cost`] then measures a
//! candidate field by re-running the solver at the *same* discretization and
//! quadraturing the squared end-state mismatch over that shared lattice, plus
//! an optional derivative-energy penalty. [`optimize`] descends this cost
//! with projected finite-difference steps, never leaving the norm ball and
//! never assuming an adjoint solver exists.
//!
//! Everything here is deterministic: simulation, lattice evaluation,
//! perturbation directions (seeded), and trace serialization, so a repeated
//! run reproduces its trace CSV byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{
    dx_b_l2_sq, save_field, FieldError, FieldParams, NormEvaluator, QuadratureSpec,
};
use crate::phase_space::{InitialDatum, ParticleEnsemble};
use crate::vlasov::{eval_f, simulate, FileStamp, NumericsConfig, SolutionRecord, VlasovError};

/// Errors from target construction, cost evaluation, and optimization.
#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Vlasov(#[from] VlasovError),
    #[error("candidate run does not match the target: {0}")]
    MismatchedTarget(String),
    #[error("non-finite cost {value} while probing {probe}")]
    NonFiniteProbe { probe: String, value: f64 },
    #[error("invalid setting: {0}")]
    InvalidSetting(String),
    #[error("target file: {0}")]
    Io(#[from] std::io::Error),
    #[error("target encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Target construction
// ---------------------------------------------------------------------------

/// A manufactured target end state, pinned to one datum and discretization.
///
/// `values[i]` is the end-state density at lattice site `i` (the same sites
/// every candidate run starts its markers from), computed by backward
/// evaluation through the manufacturing run. `ensemble` is that run's final
/// marker state; its values are carried unchanged along trajectories, so its
/// discrete L^p norms equal the initial sampling's bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSnapshot {
    pub values: Vec<f64>,
    pub ensemble: ParticleEnsemble,
    pub datum: InitialDatum,
    pub numerics: NumericsConfig,
    pub t_final: f64,
}

/// End-state density of a finished run at each of its own lattice origins.
fn end_state_on_lattice(record: &SolutionRecord) -> Result<Vec<f64>, ControlError> {
    let mut out = Vec::with_capacity(record.ensemble.origins.len());
    for &z in &record.ensemble.origins {
        out.push(eval_f(record, record.t_final, z)?.value);
    }
    Ok(out)
}

/// Run the solver under `b_star` and freeze the end state as a tracking
/// target on the run's own sampling lattice.
pub fn make_target(
    b_star: &FieldParams,
    datum: &InitialDatum,
    numerics: &NumericsConfig,
    t_final: f64,
) -> Result<TargetSnapshot, ControlError> {
    if numerics.field_stride == 0 && !numerics.disable_self_field {
        return Err(ControlError::InvalidSetting(
            "target evaluation needs stored potentials (field_stride >= 1)".into(),
        ));
    }
    let record = simulate(datum, Some(b_star), numerics, t_final)?;
    let values = end_state_on_lattice(&record)?;
    Ok(TargetSnapshot {
        values,
        ensemble: record.ensemble,
        datum: *datum,
        numerics: *numerics,
        t_final,
    })
}

/// Write a target to a single JSON file (floats in shortest round-trip form).
pub fn save_target(target: &TargetSnapshot, path: &Path) -> Result<(), ControlError> {
    fs::write(path, serde_json::to_vec(target)?)?;
    Ok(())
}

/// Read a target previously written by [`save_target`].
pub fn load_target(path: &Path) -> Result<TargetSnapshot, ControlError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Cost
// ---------------------------------------------------------------------------

/// One cost evaluation, split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// `½ Σ_i (f_B(T, z_i) − f_d(z_i))² · w` over the shared lattice.
    pub tracking: f64,
    /// `(λ/2) · ∫₀ᵀ∫ |D_x B|² dx dt` under the class quadrature.
    pub regularization: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Tracking term of a candidate field against a target: simulate at the
/// target's exact discretization, evaluate the end state on the shared
/// lattice, and quadrature the squared mismatch.
fn tracking_term(params: &FieldParams, target: &TargetSnapshot) -> Result<f64, ControlError> {
    let record = simulate(&target.datum, Some(params), &target.numerics, target.t_final)?;
    if record.ensemble.origins.len() != target.values.len() {
        return Err(ControlError::MismatchedTarget(format!(
            "{} lattice sites vs {} target values",
            record.ensemble.origins.len(),
            target.values.len()
        )));
    }
    if record.ensemble.weight != target.ensemble.weight {
        return Err(ControlError::MismatchedTarget(format!(
            "lattice weight {} vs target weight {}",
            record.ensemble.weight, target.ensemble.weight
        )));
    }
    let candidate = end_state_on_lattice(&record)?;
    let mut acc = 0.0;
    for (a, b) in candidate.iter().zip(&target.values) {
        let d = a - b;
        acc += d * d;
    }
    Ok(0.5 * acc * record.ensemble.weight)
}

/// Evaluate the tracking cost of `params` against `target` with penalty
/// weight `lambda ≥ 0`. Deterministic; rejects lattice mismatches.
pub fn cost(
    params: &FieldParams,
    target: &TargetSnapshot,
    lambda: f64,
) -> Result<CostReport, ControlError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ControlError::InvalidSetting(format!(
            "penalty weight must be finite and nonnegative, got {lambda}"
        )));
    }
    let tracking = tracking_term(params, target)?;
    let regularization = if lambda == 0.0 {
        0.0
    } else {
        0.5 * lambda * dx_b_l2_sq(params, &QuadratureSpec::for_field(params))?
    };
    Ok(CostReport {
        tracking,
        regularization,
        total: tracking + regularization,
        lambda,
    })
}

// ---------------------------------------------------------------------------
// Gradient estimation
// ---------------------------------------------------------------------------

/// Finite-difference gradient scheme. Central differences cost `2·dim`
/// evaluations; the random-direction scheme costs `2·directions` and is the
/// budget-friendly choice when the coefficient vector is long.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScheme {
    CentralFd,
    /// Two-point probes along seeded random unit directions, orthonormalized
    /// in blocks of `dim`: every complete block reconstructs the central
    /// finite-difference gradient exactly (in exact arithmetic), and partial
    /// blocks contribute an unbiased-in-expectation subspace estimate scaled
    /// by `dim / directions`.
    SimultaneousPerturbation { directions: usize, seed: u64 },
}

impl GradScheme {
    /// Objective evaluations one gradient estimate costs.
    pub fn evals_per_gradient(&self, dim: usize) -> usize {
        match self {
            GradScheme::CentralFd => 2 * dim,
            GradScheme::SimultaneousPerturbation { directions, .. } => 2 * directions,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Seeded random unit directions, orthonormalized in blocks of `dim`.
fn random_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut block: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while out.len() < count {
        if block.len() == dim {
            block.clear();
        }
        // Redraw until the residual after orthogonalization against the
        // current block is numerically usable.
        let q = loop {
            let mut d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
            for q in &block {
                let c = dot(&d, q);
                for (dj, qj) in d.iter_mut().zip(q) {
                    *dj -= c * qj;
                }
            }
            let n = l2(&d);
            if n > 1e-9 {
                for x in &mut d {
                    *x /= n;
                }
                break d;
            }
        };
        block.push(q.clone());
        out.push(q);
    }
    out
}

fn require_finite(value: f64, probe: impl FnOnce() -> String) -> Result<f64, ControlError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ControlError::NonFiniteProbe {
            probe: probe(),
            value,
        })
    }
}

/// Finite-difference gradient of an arbitrary objective at `theta`.
///
/// The objective is a black box so the same machinery serves both the real
/// simulation-backed cost and analytic surrogates in tests.
pub fn grad_estimate_with<F>(
    mut objective: F,
    theta: &[f64],
    scheme: &GradScheme,
    step: f64,
) -> Result<Vec<f64>, ControlError>
where
    F: FnMut(&[f64]) -> Result<f64, ControlError>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(ControlError::InvalidSetting(format!(
            "probe step must be finite and positive, got {step}"
        )));
    }
    let dim = theta.len();
    let mut g = vec![0.0; dim];
    match scheme {
        GradScheme::CentralFd => {
            let mut probe = theta.to_vec();
            for j in 0..dim {
                probe[j] = theta[j] + step;
                let jp = require_finite(objective(&probe)?, || format!("coordinate {j} (+)"))?;
                probe[j] = theta[j] - step;
                let jm = require_finite(objective(&probe)?, || format!("coordinate {j} (-)"))?;
                probe[j] = theta[j];
                g[j] = (jp - jm) / (2.0 * step);
            }
        }
        GradScheme::SimultaneousPerturbation { directions, seed } => {
            if *directions == 0 {
                return Err(ControlError::InvalidSetting(
                    "need at least one perturbation direction".into(),
                ));
            }
            let dirs = random_directions(dim, *directions, *seed);
            let mut probe = vec![0.0; dim];
            for (k, d) in dirs.iter().enumerate() {
                for j in 0..dim {
                    probe[j] = theta[j] + step * d[j];
                }
                let jp = require_finite(objective(&probe)?, || format!("direction {k} (+)"))?;
                for j in 0..dim {
                    probe[j] = theta[j] - step * d[j];
                }
                let jm = require_finite(objective(&probe)?, || format!("direction {k} (-)"))?;
                let slope = (jp - jm) / (2.0 * step);
                for (gj, dj) in g.iter_mut().zip(d) {
                    *gj += slope * dj;
                }
            }
            let scale = dim as f64 / *directions as f64;
            for gj in &mut g {
                *gj *= scale;
            }
        }
    }
    Ok(g)
}

/// Finite-difference gradient of the tracking cost in the field coefficients.
pub fn grad_estimate(
    params: &FieldParams,
    target: &TargetSnapshot,
    lambda: f64,
    scheme: &GradScheme,
    step: f64,
) -> Result<Vec<f64>, ControlError> {
    let mut probe = params.clone();
    grad_estimate_with(
        |theta| {
            probe.theta.copy_from_slice(theta);
            Ok(cost(&probe, target, lambda)?.total)
        },
        &params.theta,
        scheme,
        step,
    )
}

// ---------------------------------------------------------------------------
// Projected descent
// ---------------------------------------------------------------------------

/// Optimizer settings. The line-search constants are the standard Armijo
/// choices and are echoed into the trace for reproducibility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    /// Penalty weight λ ≥ 0.
    pub lambda: f64,
    /// Cap on cost evaluations (probes and line-search trials included).
    /// The evaluation of the starting point is always performed.
    pub budget: usize,
    pub scheme: GradScheme,
    /// Finite-difference probe step.
    pub grad_step: f64,
    /// Stop once the estimated gradient norm falls to or below this.
    pub grad_tol: f64,
    /// Safety cap on descent iterations (the budget usually binds first).
    pub max_iters: usize,
    /// Line-search step for the first iteration.
    pub alpha0: f64,
    /// Line-search backtracking factor in (0, 1).
    pub shrink: f64,
    /// Later line searches start at the last accepted step times this
    /// factor (≥ 1; 1 restarts every search at the same step). Growth lets
    /// the step find the objective's own scale: a tracking cost can be orders
    /// of magnitude flatter than the unit step assumes, and pure
    /// backtracking from a fixed start would crawl.
    pub expand: f64,
    /// Armijo sufficient-decrease constant in (0, 1).
    pub armijo_c: f64,
    /// Give up on an iteration once the step falls below this.
    pub alpha_min: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            lambda: 1e-3,
            budget: 200,
            scheme: GradScheme::CentralFd,
            grad_step: 1e-3,
            grad_tol: 1e-9,
            max_iters: 10_000,
            alpha0: 1.0,
            shrink: 0.5,
            expand: 4.0,
            armijo_c: 1e-4,
            alpha_min: 1e-12,
        }
    }
}

/// Why the descent loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// The evaluation budget could not fund another gradient or trial.
    Budget,
    /// Estimated gradient norm at or below `grad_tol`.
    GradientSmall,
    /// Backtracking shrank the step below `alpha_min` without acceptance.
    StepUnderflow,
    /// `max_iters` descent iterations finished.
    MaxIters,
}

/// One evaluated iterate: the starting point (iteration 0) or a line-search
/// trial. Rejected trials stay in the trace with `accepted = false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub j: f64,
    pub tracking: f64,
    pub regularization: f64,
    pub v_norm: f64,
    pub alpha: f64,
    pub accepted: bool,
}

/// Full record of one descent run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub rows: Vec<TraceRow>,
    /// Cost evaluations actually spent.
    pub evaluations: usize,
    pub stop: StopReason,
    /// True when the run ended (budget or step underflow) without ever
    /// accepting a descent step.
    pub stalled: bool,
    /// Gradient-estimate metadata, echoed from the settings.
    pub scheme: GradScheme,
    pub grad_step: f64,
    pub alpha0: f64,
    pub shrink: f64,
    pub expand: f64,
    pub armijo_c: f64,
    /// Final accepted field (the starting point if nothing was accepted).
    pub final_params: FieldParams,
    pub final_cost: CostReport,
}

/// Internal counter-carrying cost evaluator sharing one norm evaluator.
struct CostEval<'a> {
    template: &'a FieldParams,
    target: &'a TargetSnapshot,
    norms: &'a NormEvaluator,
    lambda: f64,
    evals: usize,
}

impl CostEval<'_> {
    fn eval(&mut self, theta: &[f64]) -> Result<CostReport, ControlError> {
        let mut params = self.template.clone();
        params.theta.copy_from_slice(theta);
        let tracking = tracking_term(&params, self.target)?;
        let regularization = if self.lambda == 0.0 {
            0.0
        } else {
            0.5 * self.lambda * self.norms.dx_b_l2_sq(theta)
        };
        self.evals += 1;
        Ok(CostReport {
            tracking,
            regularization,
            total: tracking + regularization,
            lambda: self.lambda,
        })
    }
}

/// Projected descent on the tracking cost, starting from `start.theta`
/// (projected into the ball first). Each iteration estimates a gradient,
/// then backtracks `θ ← project(θ − α·g)` until the Armijo test
/// `J(trial) ≤ J(θ) − c·g·(θ − trial)` passes. Accepted costs are therefore
/// non-increasing, and every evaluated trial lies in the ball. The first
/// line search starts at `alpha0`; later ones at the last accepted step
/// times `expand`, so the step length adapts to the objective's scale.
///
/// Budget exhaustion and step underflow end the run normally (see
/// [`OptTrace::stalled`]); only invalid settings and simulation failures
/// are errors.
pub fn optimize(
    start: &FieldParams,
    target: &TargetSnapshot,
    config: &OptimizeConfig,
) -> Result<OptTrace, ControlError> {
    let dim = start.theta.len();
    if dim == 0 {
        return Err(ControlError::InvalidSetting(
            "field has no coefficients to optimize".into(),
        ));
    }
    if !(config.lambda.is_finite() && config.lambda >= 0.0) {
        return Err(ControlError::InvalidSetting(format!(
            "penalty weight must be finite and nonnegative, got {}",
            config.lambda
        )));
    }
    if !(config.grad_step.is_finite() && config.grad_step > 0.0) {
        return Err(ControlError::InvalidSetting(format!(
            "probe step must be finite and positive, got {}",
            config.grad_step
        )));
    }
    if !(config.alpha0.is_finite() && config.alpha0 > 0.0) {
        return Err(ControlError::InvalidSetting(format!(
            "initial step must be finite and positive, got {}",
            config.alpha0
        )));
    }
    if !(config.shrink > 0.0 && config.shrink < 1.0) {
        return Err(ControlError::InvalidSetting(format!(
            "backtracking factor must lie in (0, 1), got {}",
            config.shrink
        )));
    }
    if !(config.expand.is_finite() && config.expand >= 1.0) {
        return Err(ControlError::InvalidSetting(format!(
            "step growth factor must be at least 1, got {}",
            config.expand
        )));
    }
    if !(config.armijo_c > 0.0 && config.armijo_c < 1.0) {
        return Err(ControlError::InvalidSetting(format!(
            "sufficient-decrease constant must lie in (0, 1), got {}",
            config.armijo_c
        )));
    }
    if !(config.grad_tol.is_finite() && config.grad_tol >= 0.0) {
        return Err(ControlError::InvalidSetting(format!(
            "gradient threshold must be finite and nonnegative, got {}",
            config.grad_tol
        )));
    }

    let quad = QuadratureSpec::for_field(start);
    let norms = NormEvaluator::new(start, &quad)?;
    let mut ce = CostEval {
        template: start,
        target,
        norms: &norms,
        lambda: config.lambda,
        evals: 0,
    };

    let mut theta = norms.project(&start.theta);
    let mut current = ce.eval(&theta)?;
    let mut rows = vec![TraceRow {
        iter: 0,
        theta: theta.clone(),
        j: current.total,
        tracking: current.tracking,
        regularization: current.regularization,
        v_norm: norms.norms(&theta).v_norm,
        alpha: 0.0,
        accepted: true,
    }];

    let per_gradient = config.scheme.evals_per_gradient(dim);
    let stop;
    let mut iter = 0usize;
    let mut next_alpha = config.alpha0;
    'outer: loop {
        iter += 1;
        if iter > config.max_iters {
            stop = StopReason::MaxIters;
            break;
        }
        // A gradient estimate plus at least one trial must fit the budget.
        if ce.evals + per_gradient + 1 > config.budget {
            stop = StopReason::Budget;
            break;
        }
        let g = grad_estimate_with(
            |t| Ok(ce.eval(t)?.total),
            &theta,
            &config.scheme,
            config.grad_step,
        )?;
        let g_norm = l2(&g);
        if g_norm <= config.grad_tol {
            stop = StopReason::GradientSmall;
            break;
        }

        let mut alpha = next_alpha;
        let mut accepted = false;
        while alpha >= config.alpha_min {
            let raw: Vec<f64> = theta
                .iter()
                .zip(&g)
                .map(|(t, gj)| t - alpha * gj)
                .collect();
            let trial = norms.project(&raw);
            // Predicted decrease of the projected step; a degenerate or
            // ascent-directed trial is skipped without spending budget.
            let predicted = dot(&g, &theta) - dot(&g, &trial);
            let moved = trial.iter().zip(&theta).any(|(a, b)| a != b);
            if !moved || predicted <= 0.0 {
                alpha *= config.shrink;
                continue;
            }
            if ce.evals + 1 > config.budget {
                stop = StopReason::Budget;
                break 'outer;
            }
            let report = ce.eval(&trial)?;
            let ok = report.total <= current.total - config.armijo_c * predicted;
            rows.push(TraceRow {
                iter,
                theta: trial.clone(),
                j: report.total,
                tracking: report.tracking,
                regularization: report.regularization,
                v_norm: norms.norms(&trial).v_norm,
                alpha,
                accepted: ok,
            });
            if ok {
                theta = trial;
                current = report;
                accepted = true;
                next_alpha = alpha * config.expand;
                break;
            }
            alpha *= config.shrink;
        }
        if !accepted {
            stop = StopReason::StepUnderflow;
            break;
        }
    }

    let any_accepted = rows.iter().skip(1).any(|r| r.accepted);
    let stalled =
        !any_accepted && matches!(stop, StopReason::Budget | StopReason::StepUnderflow);
    let mut final_params = start.clone();
    final_params.theta = theta;
    Ok(OptTrace {
        rows,
        evaluations: ce.evals,
        stop,
        stalled,
        scheme: config.scheme,
        grad_step: config.grad_step,
        alpha0: config.alpha0,
        shrink: config.shrink,
        expand: config.expand,
        armijo_c: config.armijo_c,
        final_params,
        final_cost: current,
    })
}

// ---------------------------------------------------------------------------
// Trace export
// ---------------------------------------------------------------------------

/// Render the trace as CSV (deterministic shortest-round-trip floats).
pub fn trace_csv(trace: &OptTrace) -> String {
    let mut out = String::from("iter,J,tracking,regularization,v_norm,alpha,accepted\n");
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter, r.j, r.tracking, r.regularization, r.v_norm, r.alpha, r.accepted
        );
    }
    out
}

/// Manifest describing one exported optimizer run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceManifest {
    pub lambda: f64,
    pub evaluations: usize,
    pub stop: StopReason,
    pub stalled: bool,
    pub scheme: GradScheme,
    pub grad_step: f64,
    pub alpha0: f64,
    pub shrink: f64,
    pub expand: f64,
    pub armijo_c: f64,
    pub final_cost: CostReport,
    pub files: BTreeMap<String, FileStamp>,
    pub error: Option<String>,
}

/// Write `trace.csv`, the starting and best fields in the field description
/// format, and a checksummed `manifest.json` into `dir`.
pub fn export_trace(trace: &OptTrace, dir: &Path) -> Result<TraceManifest, ControlError> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), ControlError> {
        fs::write(dir.join(name), bytes)?;
        files.insert(
            name.to_string(),
            FileStamp {
                bytes: bytes.len(),
                fnv1a64: crate::math::fnv1a64_hex(bytes),
            },
        );
        Ok(())
    };
    put("trace.csv", trace_csv(trace).as_bytes())?;
    let mut start = trace.final_params.clone();
    start.theta = trace.rows[0].theta.clone();
    save_field(&start, &dir.join("field_start.toml"))?;
    save_field(&trace.final_params, &dir.join("field_best.toml"))?;
    for name in ["field_start.toml", "field_best.toml"] {
        let bytes = fs::read(dir.join(name))?;
        files.insert(
            name.to_string(),
            FileStamp {
                bytes: bytes.len(),
                fnv1a64: crate::math::fnv1a64_hex(&bytes),
            },
        );
    }
    let manifest = TraceManifest {
        lambda: trace.final_cost.lambda,
        evaluations: trace.evaluations,
        stop: trace.stop,
        stalled: trace.stalled,
        scheme: trace.scheme,
        grad_step: trace.grad_step,
        alpha0: trace.alpha0,
        shrink: trace.shrink,
        expand: trace.expand,
        armijo_c: trace.armijo_c,
        final_cost: trace.final_cost,
        files,
        error: None,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Mode;
    use crate::phase_space::{lp_norm, sample_ensemble};

    fn bump() -> InitialDatum {
        InitialDatum::new(1.0, 1.0, 1.0).unwrap()
    }

    /// Coarse but fully self-consistent settings: 361 markers, 10 steps.
    fn tiny_numerics() -> NumericsConfig {
        NumericsConfig {
            h: 0.6,
            dt: 0.1,
            grid_n: 12,
            ..NumericsConfig::default()
        }
    }

    /// Single-mode field with three time knots (three coefficients).
    fn single_mode(theta: [f64; 3]) -> FieldParams {
        FieldParams::new(
            vec![Mode {
                wave: [0.9, 0.0, 0.0],
                direction: [0.0, 0.0, 1.0],
            }],
            theta.to_vec(),
            3,
            1.0,
            2.0,
            6.0,
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn target_keeps_norms_and_matches_uncontrolled_run_for_zero_field() {
        let datum = bump();
        let numerics = tiny_numerics();
        let zero = single_mode([0.0; 3]);
        let target = make_target(&zero, &datum, &numerics, 1.0).unwrap();

        let initial = sample_ensemble(&datum, numerics.h).unwrap();
        for p in [1.0, 2.0, f64::INFINITY] {
            assert_eq!(
                lp_norm(&target.ensemble, p).unwrap().to_bits(),
                lp_norm(&initial, p).unwrap().to_bits()
            );
        }

        let uncontrolled = simulate(&datum, None, &numerics, 1.0).unwrap();
        let reference = end_state_on_lattice(&uncontrolled).unwrap();
        assert_eq!(target.values.len(), reference.len());
        for (a, b) in target.values.iter().zip(&reference) {
            assert_eq!(a, b, "zero field must reproduce the uncontrolled run");
        }

        let again = make_target(&zero, &datum, &numerics, 1.0).unwrap();
        for (a, b) in target.values.iter().zip(&again.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn self_target_cost_vanishes_and_reacts_to_perturbation() {
        let datum = bump();
        let numerics = tiny_numerics();
        let star = single_mode([0.32, 0.64, 0.16]);
        let target = make_target(&star, &datum, &numerics, 1.0).unwrap();

        // Bit-identical re-simulation: the tracking term is exactly zero.
        let self_cost = cost(&star, &target, 0.0).unwrap();
        assert_eq!(self_cost.tracking, 0.0);
        assert_eq!(self_cost.total, 0.0);

        let mut scaled = star.clone();
        for c in &mut scaled.theta {
            *c *= 1.0 + 1e-6;
        }
        let perturbed = cost(&scaled, &target, 0.0).unwrap();
        assert!(perturbed.total > 0.0, "perturbed cost {}", perturbed.total);

        // Zero field: the penalty term vanishes, leaving pure tracking.
        let zero = single_mode([0.0; 3]);
        let plain = cost(&zero, &target, 0.1).unwrap();
        assert_eq!(plain.regularization, 0.0);
        assert_eq!(plain.total, plain.tracking);
        assert!(plain.tracking > 0.0);

        // Penalty at the manufacturing field itself: tracking still zero.
        let penalized = cost(&star, &target, 0.1).unwrap();
        assert_eq!(penalized.tracking, 0.0);
        assert!(penalized.regularization > 0.0);
        assert_eq!(penalized.total, penalized.regularization);

        let mut truncated = target.clone();
        truncated.values.pop();
        assert!(matches!(
            cost(&star, &truncated, 0.0),
            Err(ControlError::MismatchedTarget(_))
        ));
    }

    #[test]
    fn gradient_schemes_recover_quadratic_surrogate() {
        let theta = [0.3, -1.2, 0.7, 0.05, -0.4];
        let quadratic =
            |t: &[f64]| -> Result<f64, ControlError> { Ok(t.iter().map(|x| x * x).sum()) };

        let fd = grad_estimate_with(quadratic, &theta, &GradScheme::CentralFd, 1e-3).unwrap();
        for (g, t) in fd.iter().zip(&theta) {
            assert!((g - 2.0 * t).abs() < 1e-9, "central {g} vs {}", 2.0 * t);
        }

        let sp = grad_estimate_with(
            quadratic,
            &theta,
            &GradScheme::SimultaneousPerturbation {
                directions: 10,
                seed: 11,
            },
            1e-3,
        )
        .unwrap();
        for (g, t) in sp.iter().zip(&theta) {
            assert!((g - 2.0 * t).abs() < 1e-6, "sp {g} vs {}", 2.0 * t);
        }

        // A coordinate the objective ignores gets an exactly-zero entry.
        let partial =
            |t: &[f64]| -> Result<f64, ControlError> { Ok(t[0] * t[0] + t[1] * t[1]) };
        let frozen = grad_estimate_with(partial, &[0.5, -0.25, 3.0], &GradScheme::CentralFd, 1e-3)
            .unwrap();
        assert!(frozen[2].abs() < 1e-8);

        let bad = grad_estimate_with(
            |_t: &[f64]| Ok(f64::NAN),
            &theta,
            &GradScheme::CentralFd,
            1e-3,
        );
        assert!(matches!(bad, Err(ControlError::NonFiniteProbe { .. })));
        assert!(matches!(
            grad_estimate_with(quadratic, &theta, &GradScheme::CentralFd, 0.0),
            Err(ControlError::InvalidSetting(_))
        ));
        assert!(matches!(
            grad_estimate_with(
                quadratic,
                &theta,
                &GradScheme::SimultaneousPerturbation {
                    directions: 0,
                    seed: 1
                },
                1e-3
            ),
            Err(ControlError::InvalidSetting(_))
        ));
    }

    #[test]
    fn perturbation_gradient_tracks_central_differences_on_real_cost() {
        let datum = bump();
        let numerics = tiny_numerics();
        let star = single_mode([0.32, 0.64, 0.16]);
        let target = make_target(&star, &datum, &numerics, 1.0).unwrap();
        let probe_at = single_mode([0.12, 0.36, 0.04]);

        let fd = grad_estimate(&probe_at, &target, 0.0, &GradScheme::CentralFd, 1e-2).unwrap();
        let sp = grad_estimate(
            &probe_at,
            &target,
            0.0,
            &GradScheme::SimultaneousPerturbation {
                directions: 64,
                seed: 5,
            },
            1e-2,
        )
        .unwrap();

        let fd_norm = l2(&fd);
        assert!(fd_norm > 0.0);
        let diff: Vec<f64> = fd.iter().zip(&sp).map(|(a, b)| a - b).collect();
        assert!(
            l2(&diff) <= 0.15 * fd_norm,
            "schemes disagree: |fd - sp| = {}, |fd| = {}",
            l2(&diff),
            fd_norm
        );
    }

    #[test]
    fn descent_recovers_single_mode_target() {
        let datum = bump();
        let numerics = tiny_numerics();
        let star = single_mode([0.32, 0.64, 0.16]);
        let target = make_target(&star, &datum, &numerics, 1.0).unwrap();

        let start = single_mode([0.0; 3]);
        let config = OptimizeConfig {
            lambda: 0.0,
            budget: 30,
            ..OptimizeConfig::default()
        };
        let trace = optimize(&start, &target, &config).unwrap();

        assert!(trace.rows[0].tracking > 0.0);
        assert!(
            trace.final_cost.tracking < trace.rows[0].tracking,
            "tracking {} -> {}",
            trace.rows[0].tracking,
            trace.final_cost.tracking
        );
        assert!(!trace.stalled);
        assert!(trace.evaluations <= config.budget);

        // Accepted costs are non-increasing; every trial stays admissible
        // and is a fixed point of the projection.
        let quad = QuadratureSpec::for_field(&start);
        let norms = NormEvaluator::new(&start, &quad).unwrap();
        let mut last = f64::INFINITY;
        for row in &trace.rows {
            if row.accepted {
                assert!(row.j <= last, "accepted cost rose: {last} -> {}", row.j);
                last = row.j;
            }
            assert!(row.v_norm <= start.k_bound + 1e-6, "v_norm {}", row.v_norm);
            let reprojected = norms.project(&row.theta);
            for (a, b) in reprojected.iter().zip(&row.theta) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn stationary_start_stops_and_penalty_drives_derivative_energy_down() {
        let datum = bump();
        let numerics = tiny_numerics();
        let star = single_mode([0.32, 0.64, 0.16]);
        let target = make_target(&star, &datum, &numerics, 1.0).unwrap();

        // At the manufacturing field the cost has an exact global minimum,
        // so the finite-difference gradient is tiny and the run ends before
        // any step is tried.
        let config = OptimizeConfig {
            lambda: 0.0,
            budget: 40,
            grad_tol: 1e-3,
            ..OptimizeConfig::default()
        };
        let trace = optimize(&star, &target, &config).unwrap();
        assert_eq!(trace.stop, StopReason::GradientSmall);
        assert_eq!(trace.rows.len(), 1);
        assert!(!trace.stalled);
        assert_eq!(trace.final_cost.total, trace.rows[0].j);

        // With a heavy penalty the optimizer trades tracking for a smaller
        // derivative energy: the penalty term drops from its start value.
        let heavy = OptimizeConfig {
            lambda: 0.1,
            budget: 30,
            ..OptimizeConfig::default()
        };
        let heavy_trace = optimize(&star, &target, &heavy).unwrap();
        assert!(
            heavy_trace.final_cost.regularization < heavy_trace.rows[0].regularization,
            "penalty {} -> {}",
            heavy_trace.rows[0].regularization,
            heavy_trace.final_cost.regularization
        );
        assert!(heavy_trace.final_cost.total <= heavy_trace.rows[0].j);
    }

    #[test]
    fn exhausted_budget_without_steps_is_stalled_not_an_error() {
        let datum = bump();
        let numerics = tiny_numerics();
        let star = single_mode([0.32, 0.64, 0.16]);
        let target = make_target(&star, &datum, &numerics, 1.0).unwrap();

        let config = OptimizeConfig {
            lambda: 0.0,
            budget: 0,
            ..OptimizeConfig::default()
        };
        let trace = optimize(&single_mode([0.0; 3]), &target, &config).unwrap();
        assert_eq!(trace.rows.len(), 1, "only the initial evaluation");
        assert_eq!(trace.stop, StopReason::Budget);
        assert!(trace.stalled);
        assert_eq!(trace.evaluations, 1);

        let dir = std::env::temp_dir().join(format!("trace_export_{}", std::process::id()));
        let manifest = export_trace(&trace, &dir).unwrap();
        let csv_bytes = fs::read(dir.join("trace.csv")).unwrap();
        assert_eq!(
            manifest.files["trace.csv"].fnv1a64,
            crate::math::fnv1a64_hex(&csv_bytes)
        );
        assert_eq!(String::from_utf8(csv_bytes).unwrap(), trace_csv(&trace));
        let best = crate::fields::load_field(&dir.join("field_best.toml")).unwrap();
        assert_eq!(best.theta, trace.final_params.theta);
        let parsed: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(parsed["stalled"], serde_json::Value::Bool(true));
        assert!(parsed["error"].is_null());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn traces_and_targets_are_deterministic_and_round_trip() {
        let datum = bump();
        let numerics = tiny_numerics();
        let star = single_mode([0.32, 0.64, 0.16]);
        let target = make_target(&star, &datum, &numerics, 1.0).unwrap();

        let path = std::env::temp_dir().join(format!("target_{}.json", std::process::id()));
        save_target(&target, &path).unwrap();
        let loaded = load_target(&path).unwrap();
        assert_eq!(loaded, target);
        fs::remove_file(&path).unwrap();

        let config = OptimizeConfig {
            lambda: 1e-3,
            budget: 8,
            scheme: GradScheme::SimultaneousPerturbation {
                directions: 3,
                seed: 42,
            },
            ..OptimizeConfig::default()
        };
        let start = single_mode([0.0; 3]);
        let a = optimize(&start, &target, &config).unwrap();
        let b = optimize(&start, &target, &config).unwrap();
        assert_eq!(trace_csv(&a), trace_csv(&b));
    }
}
