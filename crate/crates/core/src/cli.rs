//! Batch front end: TOML run configurations and the `simulate`, `optimize`,
//! and `verify` subcommands behind the `vpctl` binary.
//!
//! A run configuration is a single TOML file; every numeric knob lives there
//! so a run is reproducible from one artifact plus the binary. Relative paths
//! inside the file (field descriptions, targets, the output directory)
//! resolve against the file's own directory. Each subcommand writes all of
//! its outputs — including a `manifest.json`, even on failure — under the
//! configured output directory, which is guarded against concurrent use by a
//! `.lock` file.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error,
//! 4 verification failure. Failures print a single JSON line to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::characteristics::{integrate_flow, ForceContext, ParamMagnetic, ZeroField};
use crate::control::{
    load_target, make_target, optimize, GradScheme, OptimizeConfig, TargetSnapshot,
};
use crate::fields::{load_field, FieldParams, Mode};
use crate::phase_space::{InitialDatum, PhasePoint};
use crate::poisson::{
    interpolate_scalar, solve_potential, GridSpec, PoissonMethod, ScalarGrid,
};
use crate::vlasov::{export_record, lipschitz_probe, simulate, NumericsConfig, ProbeConfig};

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration: unparsable file, invalid ranges, missing
    /// referenced paths, or inconsistent artifacts. Exit code 2.
    Config(String),
    /// Failure while executing a validated configuration. Exit code 3.
    Runtime(String),
    /// One or more verify suites failed. Exit code 4.
    Verification(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Verification(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
            CliError::Verification(_) => "verification",
        }
    }

    fn detail(&self) -> String {
        match self {
            CliError::Config(d) | CliError::Runtime(d) => d.clone(),
            CliError::Verification(failed) => format!("suites failed: {}", failed.join(", ")),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind(), self.detail())
    }
}

impl std::error::Error for CliError {}

fn cfg<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    datum: Option<RawDatum>,
    field: Option<RawField>,
    numerics: Option<RawNumerics>,
    cost: Option<RawCost>,
    output: Option<RawOutput>,
    optimize: Option<RawOptimize>,
    verify: Option<RawVerify>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDatum {
    amplitude: Option<f64>,
    r_x: Option<f64>,
    r_v: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    path: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNumerics {
    h: Option<f64>,
    dt: Option<f64>,
    grid_n: Option<usize>,
    snapshot_stride: Option<usize>,
    field_stride: Option<usize>,
    solver: Option<String>,
    disable_self_field: Option<bool>,
    velocity_headroom: Option<f64>,
    grid_half_extent: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    lambda: Option<f64>,
    k_bound: Option<f64>,
    beta: Option<f64>,
    t_final: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimize {
    budget: Option<usize>,
    scheme: Option<String>,
    directions: Option<usize>,
    seed: Option<u64>,
    grad_step: Option<f64>,
    start_field: String,
    target: Option<String>,
    target_field: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVerify {
    suites: Option<Vec<String>>,
    tolerances: Option<BTreeMap<String, f64>>,
}

/// Where the optimizer's target comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSource {
    /// A target file previously written by the target serializer.
    Snapshot(PathBuf),
    /// A field description; the target is manufactured by running it.
    Manufacture(PathBuf),
}

/// Optimizer settings resolved from the `[optimize]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeSection {
    pub budget: usize,
    pub scheme: GradScheme,
    pub grad_step: f64,
    pub start_field: PathBuf,
    pub target: TargetSource,
}

/// One property suite the `verify` subcommand can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Poisson,
    Speed,
    Flow,
    Conservation,
    Lipschitz,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Poisson,
        Suite::Speed,
        Suite::Flow,
        Suite::Conservation,
        Suite::Lipschitz,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Poisson => "poisson",
            Suite::Speed => "speed",
            Suite::Flow => "flow",
            Suite::Conservation => "conservation",
            Suite::Lipschitz => "lipschitz",
        }
    }

    fn parse(s: &str) -> Result<Suite, CliError> {
        match s {
            "poisson" => Ok(Suite::Poisson),
            "speed" => Ok(Suite::Speed),
            "flow" => Ok(Suite::Flow),
            "conservation" => Ok(Suite::Conservation),
            "lipschitz" => Ok(Suite::Lipschitz),
            other => Err(CliError::Config(format!(
                "unknown verify suite {other:?} (known: poisson, speed, flow, conservation, lipschitz)"
            ))),
        }
    }

    /// Default pass tolerance (the measured value must not exceed it).
    pub fn default_tolerance(&self) -> f64 {
        match self {
            // max relative potential error of the uniform-ball oracle
            Suite::Poisson => 1e-2,
            // max relative per-marker speed drift, pure magnetic transport
            Suite::Speed => 1e-12,
            // max relative round-trip defect of the characteristic flow
            Suite::Flow => 1e-4,
            // max relative energy drift (plus bit-identical norms, gated
            // unconditionally)
            Suite::Conservation => 1e-2,
            // |slope − 1| of the field-to-state continuity fit
            Suite::Lipschitz => 0.3,
        }
    }
}

/// Verify settings resolved from the `[verify]` section.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifySection {
    pub suites: Vec<Suite>,
    pub tolerances: BTreeMap<Suite, f64>,
}

impl VerifySection {
    pub fn tolerance(&self, suite: Suite) -> f64 {
        self.tolerances
            .get(&suite)
            .copied()
            .unwrap_or_else(|| suite.default_tolerance())
    }
}

/// A fully validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub datum: InitialDatum,
    pub field_path: Option<PathBuf>,
    pub numerics: NumericsConfig,
    pub lambda: f64,
    pub k_bound: f64,
    pub beta: f64,
    pub t_final: f64,
    pub out_dir: PathBuf,
    pub optimize: Option<OptimizeSection>,
    pub verify: VerifySection,
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

impl RunConfig {
    /// Parse and validate a configuration file. Numeric ranges are checked
    /// and every referenced path must already exist.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();

        let d = raw.datum.as_ref();
        let datum = InitialDatum::new(
            d.and_then(|d| d.amplitude).unwrap_or(1.0),
            d.and_then(|d| d.r_x).unwrap_or(1.0),
            d.and_then(|d| d.r_v).unwrap_or(1.0),
        )
        .map_err(cfg)?;

        let field_path = match &raw.field {
            Some(f) => {
                let p = resolve(&base, &f.path);
                require_exists(&p, "field file")?;
                Some(p)
            }
            None => None,
        };

        let defaults = NumericsConfig::default();
        let n = raw.numerics.as_ref();
        let grid_n = n.and_then(|n| n.grid_n).unwrap_or(defaults.grid_n);
        if grid_n < 8 {
            return Err(CliError::Config(format!(
                "grid_n must be at least 8, got {grid_n}"
            )));
        }
        let solver = match n.and_then(|n| n.solver.as_deref()) {
            None | Some("fourier") => PoissonMethod::Fourier,
            Some("direct") => PoissonMethod::Direct,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "unknown solver {other:?} (known: fourier, direct)"
                )))
            }
        };
        let grid_override = match n.and_then(|n| n.grid_half_extent) {
            Some(half) => {
                Some(GridSpec::new([0.0, 0.0, 0.0], half, grid_n).map_err(cfg)?)
            }
            None => None,
        };
        let numerics = NumericsConfig {
            h: n.and_then(|n| n.h).unwrap_or(defaults.h),
            dt: n.and_then(|n| n.dt).unwrap_or(defaults.dt),
            grid_n,
            snapshot_stride: n
                .and_then(|n| n.snapshot_stride)
                .unwrap_or(defaults.snapshot_stride),
            field_stride: n
                .and_then(|n| n.field_stride)
                .unwrap_or(defaults.field_stride),
            solver,
            disable_self_field: n
                .and_then(|n| n.disable_self_field)
                .unwrap_or(defaults.disable_self_field),
            velocity_headroom: n
                .and_then(|n| n.velocity_headroom)
                .unwrap_or(defaults.velocity_headroom),
            grid_override,
        };
        if !(numerics.h.is_finite() && numerics.h > 0.0) {
            return Err(CliError::Config(format!("h must be positive, got {}", numerics.h)));
        }
        if !(numerics.dt.is_finite() && numerics.dt > 0.0) {
            return Err(CliError::Config(format!("dt must be positive, got {}", numerics.dt)));
        }
        if numerics.snapshot_stride == 0 {
            return Err(CliError::Config("snapshot_stride must be at least 1".into()));
        }
        if !(numerics.velocity_headroom.is_finite() && numerics.velocity_headroom >= 0.0) {
            return Err(CliError::Config(format!(
                "velocity_headroom must be nonnegative, got {}",
                numerics.velocity_headroom
            )));
        }

        let c = raw.cost.as_ref();
        let lambda = c.and_then(|c| c.lambda).unwrap_or(1e-3);
        let k_bound = c.and_then(|c| c.k_bound).unwrap_or(5.0);
        let beta = c.and_then(|c| c.beta).unwrap_or(6.0);
        let t_final = c.and_then(|c| c.t_final).unwrap_or(1.0);
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(CliError::Config(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        if !(k_bound.is_finite() && k_bound > 0.0) {
            return Err(CliError::Config(format!("k_bound must be positive, got {k_bound}")));
        }
        if !(beta.is_finite() && beta > 3.0) {
            return Err(CliError::Config(format!("beta must exceed 3, got {beta}")));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(CliError::Config(format!("t_final must be positive, got {t_final}")));
        }

        let out_dir = resolve(
            &base,
            raw.output.as_ref().map(|o| o.dir.as_str()).unwrap_or("out"),
        );

        let optimize = match &raw.optimize {
            Some(o) => {
                let grad_step = o.grad_step.unwrap_or(1e-3);
                if !(grad_step.is_finite() && grad_step > 0.0) {
                    return Err(CliError::Config(format!(
                        "grad_step must be positive, got {grad_step}"
                    )));
                }
                let scheme = match o.scheme.as_deref() {
                    None | Some("central-fd") => GradScheme::CentralFd,
                    Some("simultaneous-perturbation") => {
                        let directions = o.directions.unwrap_or(8);
                        if directions == 0 {
                            return Err(CliError::Config(
                                "directions must be at least 1".into(),
                            ));
                        }
                        GradScheme::SimultaneousPerturbation {
                            directions,
                            seed: o.seed.unwrap_or(0),
                        }
                    }
                    Some(other) => {
                        return Err(CliError::Config(format!(
                            "unknown scheme {other:?} (known: central-fd, simultaneous-perturbation)"
                        )))
                    }
                };
                let start_field = resolve(&base, &o.start_field);
                require_exists(&start_field, "start field file")?;
                let target = match (&o.target, &o.target_field) {
                    (Some(t), None) => {
                        let p = resolve(&base, t);
                        require_exists(&p, "target file")?;
                        TargetSource::Snapshot(p)
                    }
                    (None, Some(t)) => {
                        let p = resolve(&base, t);
                        require_exists(&p, "target field file")?;
                        TargetSource::Manufacture(p)
                    }
                    (None, None) => {
                        return Err(CliError::Config(
                            "optimize needs either target or target_field".into(),
                        ))
                    }
                    (Some(_), Some(_)) => {
                        return Err(CliError::Config(
                            "optimize takes target or target_field, not both".into(),
                        ))
                    }
                };
                Some(OptimizeSection {
                    budget: o.budget.unwrap_or(200),
                    scheme,
                    grad_step,
                    start_field,
                    target,
                })
            }
            None => None,
        };

        let v = raw.verify.as_ref();
        let suites = match v.and_then(|v| v.suites.as_ref()) {
            Some(names) => {
                let mut suites = Vec::with_capacity(names.len());
                for name in names {
                    suites.push(Suite::parse(name)?);
                }
                suites
            }
            None => Suite::ALL.to_vec(),
        };
        let mut tolerances = BTreeMap::new();
        if let Some(map) = v.and_then(|v| v.tolerances.as_ref()) {
            for (name, tol) in map {
                if !(tol.is_finite() && *tol >= 0.0) {
                    return Err(CliError::Config(format!(
                        "tolerance for {name} must be finite and nonnegative, got {tol}"
                    )));
                }
                tolerances.insert(Suite::parse(name)?, *tol);
            }
        }

        Ok(RunConfig {
            datum,
            field_path,
            numerics,
            lambda,
            k_bound,
            beta,
            t_final,
            out_dir,
            optimize,
            verify: VerifySection { suites, tolerances },
        })
    }
}

// ---------------------------------------------------------------------------
// Output directory guard
// ---------------------------------------------------------------------------

/// Exclusive `.lock` file in the output directory, removed on drop. A held
/// lock means another invocation owns the directory; a stale one (after a
/// crash) must be removed by hand.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Runtime(format!(
                    "output directory {} is locked by another run ({} exists)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Runtime(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Minimal manifest written when a command fails after claiming its output
/// directory, so the directory always documents what happened.
fn write_failure_manifest(dir: &Path, command: &str, error: &CliError) {
    #[derive(Serialize)]
    struct FailureManifest<'a> {
        command: &'a str,
        error: String,
    }
    let manifest = FailureManifest {
        command,
        error: error.detail(),
    };
    if let Ok(text) = serde_json::to_string_pretty(&manifest) {
        let _ = fs::write(dir.join("manifest.json"), text);
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

/// Run one simulation per the configuration and export the record into
/// `out`: diagnostics CSV, final-state checkpoint, field description (when
/// present), and a checksummed manifest.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let _lock = DirLock::acquire(out)?;
    let result = (|| {
        let field = match &config.field_path {
            Some(p) => Some(load_field(p).map_err(cfg)?),
            None => None,
        };
        let record = simulate(&config.datum, field.as_ref(), &config.numerics, config.t_final)
            .map_err(run_err)?;
        export_record(&record, out).map_err(run_err)?;
        let first = record.diagnostics.first();
        let last = record.diagnostics.last();
        let drift = match (first, last) {
            (Some(a), Some(_)) if a.total_energy != 0.0 => record
                .diagnostics
                .iter()
                .map(|r| (r.total_energy - a.total_energy).abs() / a.total_energy.abs())
                .fold(0.0, f64::max),
            _ => 0.0,
        };
        println!(
            "simulate: {} markers, {} steps, energy drift {:.3e}, outputs in {}",
            record.ensemble.len(),
            record.n_steps,
            drift,
            out.display()
        );
        Ok(())
    })();
    if let Err(e) = &result {
        write_failure_manifest(out, "simulate", e);
    }
    result
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

fn check_class(
    what: &str,
    field: &FieldParams,
    config: &RunConfig,
) -> Result<(), CliError> {
    if field.k_bound != config.k_bound {
        return Err(CliError::Config(format!(
            "{what} has k_bound {} but the cost section says {}",
            field.k_bound, config.k_bound
        )));
    }
    if field.beta != config.beta {
        return Err(CliError::Config(format!(
            "{what} has beta {} but the cost section says {}",
            field.beta, config.beta
        )));
    }
    if field.t_final < config.t_final {
        return Err(CliError::Config(format!(
            "{what} is defined up to t = {} but the run lasts {}",
            field.t_final, config.t_final
        )));
    }
    Ok(())
}

/// Resolve the target, descend the tracking cost, and export the trace CSV,
/// start/best field descriptions, and manifest into `out`. A stalled trace
/// is still a success (exit 0); the manifest records the status.
pub fn cmd_optimize(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let _lock = DirLock::acquire(out)?;
    let result = (|| {
        let section = config
            .optimize
            .as_ref()
            .ok_or_else(|| CliError::Config("configuration has no optimize section".into()))?;
        let start = load_field(&section.start_field).map_err(cfg)?;
        check_class("start field", &start, config)?;

        let target: TargetSnapshot = match &section.target {
            TargetSource::Snapshot(path) => {
                let target = load_target(path).map_err(cfg)?;
                if target.numerics != config.numerics || target.t_final != config.t_final {
                    return Err(CliError::Config(format!(
                        "target {} was built with different numerics or horizon than the configuration",
                        path.display()
                    )));
                }
                target
            }
            TargetSource::Manufacture(path) => {
                let star = load_field(path).map_err(cfg)?;
                check_class("target field", &star, config)?;
                make_target(&star, &config.datum, &config.numerics, config.t_final)
                    .map_err(run_err)?
            }
        };

        let opt = OptimizeConfig {
            lambda: config.lambda,
            budget: section.budget,
            scheme: section.scheme,
            grad_step: section.grad_step,
            ..OptimizeConfig::default()
        };
        let trace = optimize(&start, &target, &opt).map_err(run_err)?;
        crate::control::export_trace(&trace, out).map_err(run_err)?;
        println!(
            "optimize: {} evaluations, stop {:?}, stalled {}, tracking {:.6e} -> {:.6e}, outputs in {}",
            trace.evaluations,
            trace.stop,
            trace.stalled,
            trace.rows[0].tracking,
            trace.final_cost.tracking,
            out.display()
        );
        Ok(())
    })();
    if let Err(e) = &result {
        write_failure_manifest(out, "optimize", e);
    }
    result
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// Outcome of one verify suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub note: String,
}

/// Mode dictionary shared by the randomized suites.
fn suite_modes() -> Vec<Mode> {
    vec![
        Mode {
            wave: [0.0, 0.0, 0.0],
            direction: [0.0, 0.0, 1.0],
        },
        Mode {
            wave: [0.8, 0.0, 0.0],
            direction: [0.0, 1.0, 0.0],
        },
    ]
}

fn suite_field(seed: u64, fraction: f64) -> Result<FieldParams, CliError> {
    FieldParams::random_in_ball(seed, fraction, suite_modes(), 3, 1.0, 2.0, 6.0, 5.0)
        .map_err(run_err)
}

/// Uniform-ball oracle: solve for the potential of a normalized unit ball
/// and compare against the closed form at the center and at twice the
/// radius. Measured value: the larger relative error of the two.
fn suite_poisson() -> Result<(f64, String), CliError> {
    let a = 1.0;
    let spec = GridSpec::new([0.0, 0.0, 0.0], 2.5 * a, 32).map_err(run_err)?;
    let mut rho = ScalarGrid::filled(spec, 0.0);
    let density = 3.0 / (4.0 * std::f64::consts::PI);
    for ix in 0..spec.n {
        for iy in 0..spec.n {
            for iz in 0..spec.n {
                let p = spec.node(ix, iy, iz);
                if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= a * a {
                    rho.set(ix, iy, iz, density);
                }
            }
        }
    }
    // Normalize the sampled charge so the total is exactly the ball's.
    let d3 = spec.delta().powi(3);
    let total: f64 = rho.data.iter().sum::<f64>() * d3;
    if total <= 0.0 {
        return Err(CliError::Runtime("ball sampling produced no charge".into()));
    }
    for v in &mut rho.data {
        *v /= total;
    }
    let psi = solve_potential(&rho, PoissonMethod::Fourier).map_err(run_err)?;
    let at_center = interpolate_scalar(&psi, [0.0, 0.0, 0.0]).map_err(run_err)?;
    let at_far = interpolate_scalar(&psi, [2.0 * a, 0.0, 0.0]).map_err(run_err)?;
    let exact_center = 1.5 / a;
    let exact_far = 0.5 / a;
    let e_center = (at_center - exact_center).abs() / exact_center;
    let e_far = (at_far - exact_far).abs() / exact_far;
    Ok((
        e_center.max(e_far),
        format!("center {e_center:.3e}, 2a {e_far:.3e}"),
    ))
}

/// Pure magnetic transport must leave every marker's speed unchanged.
/// Measured value: the worst relative speed drift over the run.
fn suite_speed() -> Result<(f64, String), CliError> {
    let datum = InitialDatum::new(1.0, 1.0, 1.0).map_err(run_err)?;
    let numerics = NumericsConfig {
        h: 0.6,
        dt: 0.05,
        grid_n: 12,
        disable_self_field: true,
        ..NumericsConfig::default()
    };
    let field = suite_field(3, 0.8)?;
    let record = simulate(&datum, Some(&field), &numerics, 1.0).map_err(run_err)?;
    let mut worst = 0.0f64;
    for (o, p) in record.ensemble.origins.iter().zip(&record.ensemble.positions) {
        let s0 = crate::math::norm3(o.v);
        let s1 = crate::math::norm3(p.v);
        let drift = if s0 > 0.0 { (s1 - s0).abs() / s0 } else { s1 };
        worst = worst.max(drift);
    }
    Ok((worst, format!("{} markers", record.ensemble.len())))
}

/// Round-trip defect of the characteristic flow through a smooth magnetic
/// field: forward to t = 0.5, back with half the step. Measured value: the
/// worst defect relative to the largest point norm.
fn suite_flow() -> Result<(f64, String), CliError> {
    use rand::{Rng, SeedableRng};
    let field = suite_field(4, 0.8)?;
    let forces = ForceContext {
        electric: &ZeroField,
        magnetic: &ParamMagnetic(&field),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for _ in 0..20 {
        let z = PhasePoint::new(
            [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)],
            [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2)],
        );
        scale = scale.max(z.phase_norm());
        let fwd = integrate_flow(z, 0.0, 0.5, 0.02, &forces).map_err(run_err)?;
        let back = integrate_flow(fwd, 0.5, 0.0, 0.01, &forces).map_err(run_err)?;
        let dx = crate::math::sub3(back.x, z.x);
        let dv = crate::math::sub3(back.v, z.v);
        let defect =
            (crate::math::dot3(dx, dx) + crate::math::dot3(dv, dv)).sqrt();
        worst = worst.max(defect);
    }
    Ok((worst / scale, format!("20 round trips, radius {scale:.2}")))
}

/// Energy conservation and exact norm transport on a coarse self-consistent
/// run. Measured value: the relative total-energy drift. Norm identity is
/// gated unconditionally (a mismatch fails the suite regardless of the
/// tolerance).
fn suite_conservation() -> Result<(f64, String, bool), CliError> {
    let datum = InitialDatum::new(1.0, 1.0, 1.0).map_err(run_err)?;
    let numerics = NumericsConfig {
        h: 0.5,
        dt: 0.02,
        grid_n: 16,
        ..NumericsConfig::default()
    };
    let record = simulate(&datum, None, &numerics, 1.0).map_err(run_err)?;
    let first = record.diagnostics.first().ok_or_else(|| {
        CliError::Runtime("run produced no diagnostics".into())
    })?;
    let mut drift = 0.0f64;
    let mut norms_identical = true;
    for row in &record.diagnostics {
        drift = drift.max((row.total_energy - first.total_energy).abs() / first.total_energy.abs());
        if row.l1.to_bits() != first.l1.to_bits()
            || row.l2.to_bits() != first.l2.to_bits()
            || row.linf.to_bits() != first.linf.to_bits()
        {
            norms_identical = false;
        }
    }
    let note = format!(
        "drift {drift:.3e}, norms bit-identical: {norms_identical}"
    );
    Ok((drift, note, norms_identical))
}

/// Field-to-state continuity: the fitted log-log slope of end-state
/// difference against field-difference norm over a shrinking family should
/// be near 1. Measured value: |slope − 1|.
fn suite_lipschitz() -> Result<(f64, String), CliError> {
    let datum = InitialDatum::new(1.0, 1.0, 1.0).map_err(run_err)?;
    let numerics = NumericsConfig {
        h: 0.5,
        dt: 0.02,
        grid_n: 16,
        ..NumericsConfig::default()
    };
    let base = suite_field(6, 0.5)?;
    let bump_dir = suite_field(7, 0.3)?;
    let mut pairs = Vec::new();
    for k in 0..4 {
        let eps = 0.5f64.powi(k);
        let mut shifted = base.clone();
        for (c, d) in shifted.theta.iter_mut().zip(&bump_dir.theta) {
            *c += eps * d;
        }
        pairs.push((shifted, base.clone()));
    }
    let report = lipschitz_probe(
        &datum,
        &pairs,
        &numerics,
        1.0,
        &ProbeConfig {
            fit_slopes: true,
            ..ProbeConfig::default()
        },
    )
    .map_err(run_err)?;
    let slope = report
        .f_slope
        .ok_or_else(|| CliError::Runtime("probe produced no usable slope".into()))?;
    Ok((
        (slope - 1.0).abs(),
        format!("slope {slope:.3}, max ratio {:.3e}", report.max_ratio),
    ))
}

/// Run the selected suites, print the pass/fail table, and write the report
/// and manifest into `out`. Fails (exit 4) iff any selected suite fails.
pub fn cmd_verify(
    config: &RunConfig,
    out: &Path,
    selected: &[Suite],
) -> Result<Vec<SuiteOutcome>, CliError> {
    let _lock = DirLock::acquire(out)?;
    let result = (|| {
        let mut outcomes = Vec::new();
        for &suite in selected {
            let tolerance = config.verify.tolerance(suite);
            let (measured, note, extra_gate) = match suite {
                Suite::Poisson => {
                    let (m, n) = suite_poisson()?;
                    (m, n, true)
                }
                Suite::Speed => {
                    let (m, n) = suite_speed()?;
                    (m, n, true)
                }
                Suite::Flow => {
                    let (m, n) = suite_flow()?;
                    (m, n, true)
                }
                Suite::Conservation => suite_conservation()?,
                Suite::Lipschitz => {
                    let (m, n) = suite_lipschitz()?;
                    (m, n, true)
                }
            };
            let pass = measured <= tolerance && extra_gate;
            println!(
                "{:<13} measured {:>12.4e}   tolerance {:>12.4e}   {}   ({})",
                suite.name(),
                measured,
                tolerance,
                if pass { "PASS" } else { "FAIL" },
                note
            );
            outcomes.push(SuiteOutcome {
                suite,
                measured,
                tolerance,
                pass,
                note,
            });
        }

        let mut report = String::new();
        for o in &outcomes {
            let _ = writeln!(
                report,
                "{} measured={} tolerance={} {} ({})",
                o.suite.name(),
                o.measured,
                o.tolerance,
                if o.pass { "PASS" } else { "FAIL" },
                o.note
            );
        }
        fs::write(out.join("verify_report.txt"), &report).map_err(run_err)?;

        let failed: Vec<String> = outcomes
            .iter()
            .filter(|o| !o.pass)
            .map(|o| o.suite.name().to_string())
            .collect();

        #[derive(Serialize)]
        struct VerifyManifest<'a> {
            command: &'a str,
            outcomes: &'a [SuiteOutcome],
            error: Option<String>,
        }
        let manifest = VerifyManifest {
            command: "verify",
            outcomes: &outcomes,
            error: if failed.is_empty() {
                None
            } else {
                Some(format!("suites failed: {}", failed.join(", ")))
            },
        };
        fs::write(
            out.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).map_err(run_err)?,
        )
        .map_err(run_err)?;

        println!(
            "verify: {}/{} suites passed",
            outcomes.iter().filter(|o| o.pass).count(),
            outcomes.len()
        );
        if failed.is_empty() {
            Ok(outcomes)
        } else {
            Err(CliError::Verification(failed))
        }
    })();
    if let Err(e) = &result {
        if matches!(e, CliError::Runtime(_) | CliError::Config(_)) {
            write_failure_manifest(out, "verify", e);
        }
    }
    result
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "vpctl",
    version,
    about = "Particle-mesh transport solver and magnetic-field optimizer"
)]
struct CliArgs {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Run one simulation and export diagnostics, checkpoint, and manifest
    Simulate(CommonArgs),
    /// Descend the tracking cost and export the trace and best field
    Optimize(CommonArgs),
    /// Run property suites and print a pass/fail table
    Verify(VerifyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run-configuration file (TOML)
    config: PathBuf,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run only the named suite (repeatable); default: configured suites
    #[arg(long = "suite")]
    suites: Vec<String>,
}

fn dispatch(args: CliArgs) -> Result<(), CliError> {
    match args.command {
        CliCommand::Simulate(common) => {
            let config = RunConfig::load(&common.config)?;
            let out = common.out.unwrap_or_else(|| config.out_dir.clone());
            cmd_simulate(&config, &out)
        }
        CliCommand::Optimize(common) => {
            let config = RunConfig::load(&common.config)?;
            let out = common.out.unwrap_or_else(|| config.out_dir.clone());
            cmd_optimize(&config, &out)
        }
        CliCommand::Verify(verify) => {
            let config = RunConfig::load(&verify.common.config)?;
            let out = verify.common.out.unwrap_or_else(|| config.out_dir.clone());
            let selected = if verify.suites.is_empty() {
                config.verify.suites.clone()
            } else {
                let mut suites = Vec::with_capacity(verify.suites.len());
                for name in &verify.suites {
                    suites.push(Suite::parse(name)?);
                }
                suites
            };
            cmd_verify(&config, &out, &selected).map(|_| ())
        }
    }
}

/// Full command-line entry point; returns the process exit code. Failures
/// print one JSON line (`{"error": kind, "detail": …}`) to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match CliArgs::try_parse_from(args) {
        Ok(p) => p,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(parsed) {
        Ok(()) => 0,
        Err(e) => {
            #[derive(Serialize)]
            struct ErrorLine<'a> {
                error: &'a str,
                detail: String,
            }
            let line = ErrorLine {
                error: e.kind(),
                detail: e.detail(),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&line)
                    .unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind()))
            );
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn config_defaults_and_overrides_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "run.toml",
            r#"
[datum]
amplitude = 0.5
r_x = 1.5

[numerics]
h = 0.4
dt = 0.02
grid_n = 16

[cost]
lambda = 0.0
t_final = 0.5

[output]
dir = "results"
"#,
        );
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.datum.amplitude, 0.5);
        assert_eq!(config.datum.r_x, 1.5);
        assert_eq!(config.datum.r_v, 1.0);
        assert_eq!(config.numerics.h, 0.4);
        assert_eq!(config.numerics.grid_n, 16);
        assert_eq!(config.numerics.snapshot_stride, 1);
        assert_eq!(config.lambda, 0.0);
        assert_eq!(config.t_final, 0.5);
        assert_eq!(config.k_bound, 5.0);
        assert_eq!(config.out_dir, dir.path().join("results"));
        assert!(config.optimize.is_none());
        assert_eq!(config.verify.suites, Suite::ALL.to_vec());
        assert_eq!(config.verify.tolerance(Suite::Poisson), 1e-2);
    }

    #[test]
    fn config_rejects_bad_ranges_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("[numerics]\ndt = 0.0", "dt"),
            ("[numerics]\ngrid_n = 4", "grid_n"),
            ("[numerics]\nh = -1.0", "h"),
            ("[cost]\nbeta = 3.0", "beta"),
            ("[cost]\nk_bound = 0.0", "k_bound"),
            ("[cost]\nlambda = -0.5", "lambda"),
            ("[cost]\nt_final = 0.0", "t_final"),
            ("[numerics]\nsolver = \"magic\"", "solver"),
            ("[numerics]\ntypo_key = 1", "typo_key"),
            ("[verify]\nsuites = [\"nope\"]", "nope"),
            ("[verify.tolerances]\nflow = -1.0", "flow"),
        ];
        for (i, (body, needle)) in cases.iter().enumerate() {
            let path = write_config(dir.path(), &format!("bad{i}.toml"), body);
            match RunConfig::load(&path) {
                Err(CliError::Config(msg)) => {
                    assert!(
                        msg.contains(needle),
                        "case {i}: message {msg:?} should mention {needle:?}"
                    );
                }
                other => panic!("case {i}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn config_requires_referenced_paths_to_exist() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "run.toml",
            "[field]\npath = \"missing_field.toml\"\n",
        );
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.detail().contains("missing_field.toml"));

        // Present file passes the existence check and resolves relative
        // to the configuration file.
        fs::write(dir.path().join("present.toml"), "x").unwrap();
        let path = write_config(
            dir.path(),
            "run2.toml",
            "[field]\npath = \"present.toml\"\n",
        );
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.field_path.unwrap(), dir.path().join("present.toml"));
    }

    #[test]
    fn optimize_section_needs_exactly_one_target_source() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("start.toml"), "x").unwrap();
        fs::write(dir.path().join("star.toml"), "x").unwrap();
        fs::write(dir.path().join("target.json"), "x").unwrap();

        let neither = write_config(
            dir.path(),
            "neither.toml",
            "[optimize]\nstart_field = \"start.toml\"\n",
        );
        assert!(matches!(
            RunConfig::load(&neither),
            Err(CliError::Config(_))
        ));

        let both = write_config(
            dir.path(),
            "both.toml",
            "[optimize]\nstart_field = \"start.toml\"\ntarget = \"target.json\"\ntarget_field = \"star.toml\"\n",
        );
        assert!(matches!(RunConfig::load(&both), Err(CliError::Config(_))));

        let ok = write_config(
            dir.path(),
            "ok.toml",
            "[optimize]\nstart_field = \"start.toml\"\ntarget_field = \"star.toml\"\nscheme = \"simultaneous-perturbation\"\ndirections = 4\nseed = 9\n",
        );
        let config = RunConfig::load(&ok).unwrap();
        let section = config.optimize.unwrap();
        assert_eq!(
            section.scheme,
            GradScheme::SimultaneousPerturbation {
                directions: 4,
                seed: 9
            }
        );
        assert_eq!(section.budget, 200);
        assert_eq!(
            section.target,
            TargetSource::Manufacture(dir.path().join("star.toml"))
        );
    }

    #[test]
    fn lock_file_guards_the_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let lock = DirLock::acquire(&out).unwrap();
        assert!(out.join(".lock").is_file());
        let second = DirLock::acquire(&out);
        assert!(matches!(second, Err(CliError::Runtime(_))));
        drop(lock);
        assert!(!out.join(".lock").exists());
        let third = DirLock::acquire(&out);
        assert!(third.is_ok());
    }
}
