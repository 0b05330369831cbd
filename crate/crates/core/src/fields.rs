//! The admissible magnetic-field class and its norms.
//!
//! A control field is a finite linear combination
//!
//! ```text
//!   B_θ(t, x) = Σ_j c_j(t) · Φ_j(x),
//!   Φ_j(x)    = exp(-|x|²/(2σ²)) · cos(k_j · x) · e_j,
//! ```
//!
//! where each mode has a wave vector `k_j`, a unit direction `e_j`, and a
//! piecewise-linear-in-time coefficient `c_j` determined by `θ` on uniform
//! time knots over `[0, T]`. Fields of this form are smooth, decay like a
//! Gaussian, and are dense enough in practice to steer the plasma state.
//!
//! The class norm is `‖B‖_V = ‖B‖_W + ‖B‖_H` with
//!
//! ```text
//!   ‖B‖_W² = ∫₀ᵀ ( Σ_{|α|≤2} ∫ |D^α B(t,x)|^β dx )^{2/β} dt     (β > 3),
//!   ‖B‖_H² = ∫₀ᵀ   Σ_{|α|≤1} ∫ |D^α B(t,x)|²  dx          dt,
//! ```
//!
//! approximated by a fixed cell-centered tensor quadrature on `[-6σ, 6σ]³`
//! and composite Simpson in time on each knot panel. For any *fixed*
//! quadrature these are genuine norms of `θ` (weighted ℓ-norms of linear
//! functions of `θ`), so absolute homogeneity and the triangle inequality
//! hold exactly, and radial projection onto the ball `‖B‖_V ≤ K` is exact.
//! Admissibility requires `β > 3`; the associated Hölder exponent is
//! `γ = 1 - 3/β`.

use crate::math::{dot3, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from field construction, evaluation, and quadrature.
#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field parameters: {0}")]
    InvalidParams(String),
    #[error("time {t} outside the field's interval [0, {t_final}]")]
    TimeOutOfRange { t: f64, t_final: f64 },
    #[error("quadrature spacing {spacing} too coarse for wave number {max_wave}: need spacing <= {required} (2 points per wavelength)")]
    QuadratureTooCoarse {
        spacing: f64,
        max_wave: f64,
        required: f64,
    },
    #[error("field file parse error: {0}")]
    Parse(String),
    #[error("field file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One spatial mode: wave vector and (unit) direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub wave: Vec3,
    pub direction: Vec3,
}

/// Parameters of a field in the admissible class. `theta` holds one
/// coefficient per (mode, time knot), grouped by mode:
/// `theta[j * n_time_knots + i]` is mode `j`'s coefficient at knot `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    pub modes: Vec<Mode>,
    pub theta: Vec<f64>,
    pub n_time_knots: usize,
    pub t_final: f64,
    pub sigma: f64,
    pub beta: f64,
    pub k_bound: f64,
}

/// The three norms of a field under the class quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub w_norm: f64,
    pub h_norm: f64,
    pub v_norm: f64,
}

/// Spatial derivatives of the field at a point: `db[a][b] = ∂B_a/∂x_b` and
/// `d2b[a][b][c] = ∂²B_a/∂x_b∂x_c` (symmetric in `b, c`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldJacobian {
    pub db: [[f64; 3]; 3],
    pub d2b: [[[f64; 3]; 3]; 3],
}

impl FieldParams {
    /// Validated constructor. Directions are normalized; rejects empty knot
    /// grids, non-finite entries, β ≤ 3, and mismatched θ length.
    pub fn new(
        modes: Vec<Mode>,
        theta: Vec<f64>,
        n_time_knots: usize,
        t_final: f64,
        sigma: f64,
        beta: f64,
        k_bound: f64,
    ) -> Result<Self, FieldError> {
        if n_time_knots < 2 {
            return Err(FieldError::InvalidParams(format!(
                "need at least 2 time knots, got {n_time_knots}"
            )));
        }
        if !(t_final.is_finite() && t_final > 0.0) {
            return Err(FieldError::InvalidParams(format!("t_final = {t_final}")));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(FieldError::InvalidParams(format!("sigma = {sigma}")));
        }
        if !(beta.is_finite() && beta > 3.0) {
            return Err(FieldError::InvalidParams(format!(
                "beta must exceed 3 (got {beta}); the class needs W^{{2,beta}} with beta > 3"
            )));
        }
        if !(k_bound.is_finite() && k_bound > 0.0) {
            return Err(FieldError::InvalidParams(format!("k_bound = {k_bound}")));
        }
        if theta.len() != modes.len() * n_time_knots {
            return Err(FieldError::InvalidParams(format!(
                "theta has {} entries, expected modes × knots = {}",
                theta.len(),
                modes.len() * n_time_knots
            )));
        }
        if theta.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::InvalidParams("non-finite theta entry".into()));
        }
        let mut normalized = Vec::with_capacity(modes.len());
        for m in &modes {
            if m.wave.iter().any(|c| !c.is_finite()) {
                return Err(FieldError::InvalidParams("non-finite wave vector".into()));
            }
            let n = crate::math::norm3(m.direction);
            if !(n.is_finite() && n > 0.0) {
                return Err(FieldError::InvalidParams(
                    "mode direction must be nonzero".into(),
                ));
            }
            normalized.push(Mode {
                wave: m.wave,
                direction: crate::math::scale3(m.direction, 1.0 / n),
            });
        }
        Ok(FieldParams {
            modes: normalized,
            theta,
            n_time_knots,
            t_final,
            sigma,
            beta,
            k_bound,
        })
    }

    /// The zero field with the given class parameters and mode dictionary.
    pub fn zero(
        modes: Vec<Mode>,
        n_time_knots: usize,
        t_final: f64,
        sigma: f64,
        beta: f64,
        k_bound: f64,
    ) -> Result<Self, FieldError> {
        let len = modes.len() * n_time_knots;
        FieldParams::new(modes, vec![0.0; len], n_time_knots, t_final, sigma, beta, k_bound)
    }

    /// Hölder exponent `γ = 1 - 3/β` associated with the class.
    pub fn hoelder_exponent(&self) -> f64 {
        1.0 - 3.0 / self.beta
    }

    /// Piecewise-linear coefficient of mode `j` at time `t ∈ [0, T]`.
    pub fn coefficient(&self, j: usize, t: f64) -> f64 {
        let knots = self.n_time_knots;
        let panel_width = self.t_final / (knots - 1) as f64;
        let raw = (t / panel_width).floor();
        let panel = (raw as isize).clamp(0, knots as isize - 2) as usize;
        let s = (t - panel as f64 * panel_width) / panel_width;
        let base = j * knots + panel;
        (1.0 - s) * self.theta[base] + s * self.theta[base + 1]
    }

    /// Largest Euclidean wave number over the modes (0 for none).
    pub fn max_wave(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| crate::math::norm3(m.wave))
            .fold(0.0, f64::max)
    }

    /// A zero-mean seeded random field projected into the admissible ball
    /// `‖B‖_V ≤ fraction · K`. Deterministic for a given seed. Shares the
    /// supplied mode dictionary so differences of generated fields remain in
    /// the class.
    pub fn random_in_ball(
        seed: u64,
        fraction: f64,
        modes: Vec<Mode>,
        n_time_knots: usize,
        t_final: f64,
        sigma: f64,
        beta: f64,
        k_bound: f64,
    ) -> Result<Self, FieldError> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = modes.len() * n_time_knots;
        let theta: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = FieldParams::new(modes, theta, n_time_knots, t_final, sigma, beta, k_bound)?;
        let quad = QuadratureSpec::for_field(&raw);
        let norms = vnorm(&raw, &quad)?;
        let target = fraction.clamp(0.0, 1.0) * raw.k_bound;
        if norms.v_norm <= target || norms.v_norm == 0.0 {
            return Ok(raw);
        }
        let mut scaled = raw;
        let s = target / norms.v_norm;
        for c in &mut scaled.theta {
            *c *= s;
        }
        Ok(scaled)
    }
}

/// Quadrature used for the class norms: cell-centered uniform tensor grid on
/// `[-box_sigmas·σ, box_sigmas·σ]³` and composite Simpson with
/// `2·time_subdiv` subintervals per knot panel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes_per_axis: usize,
    pub box_sigmas: f64,
    pub time_subdiv: usize,
}

impl QuadratureSpec {
    /// Default quadrature for a field: 48 nodes per axis on `[-6σ, 6σ]³`,
    /// 2 Simpson doublets per knot panel.
    pub fn for_field(_params: &FieldParams) -> Self {
        QuadratureSpec {
            nodes_per_axis: 48,
            box_sigmas: 6.0,
            time_subdiv: 2,
        }
    }

    fn validate(&self, params: &FieldParams) -> Result<(), FieldError> {
        if self.nodes_per_axis < 2 || self.time_subdiv == 0 || !(self.box_sigmas > 0.0) {
            return Err(FieldError::InvalidParams(format!(
                "degenerate quadrature spec {self:?}"
            )));
        }
        let spacing = 2.0 * self.box_sigmas * params.sigma / self.nodes_per_axis as f64;
        let max_wave = params.max_wave();
        if max_wave > 0.0 {
            let required = std::f64::consts::PI / max_wave;
            if spacing > required {
                return Err(FieldError::QuadratureTooCoarse {
                    spacing,
                    max_wave,
                    required,
                });
            }
        }
        Ok(())
    }

    /// Time nodes and weights: per knot panel, composite Simpson with
    /// `2·time_subdiv` subintervals (exact for the quadratic time dependence
    /// of the H-norm integrand).
    fn time_rule(&self, params: &FieldParams) -> Vec<(f64, f64)> {
        let panels = params.n_time_knots - 1;
        let panel_width = params.t_final / panels as f64;
        let m = 2 * self.time_subdiv; // subintervals per panel, even
        let hstep = panel_width / m as f64;
        let mut rule = Vec::with_capacity(panels * (m + 1));
        for p in 0..panels {
            let t0 = p as f64 * panel_width;
            for i in 0..=m {
                let coeff = if i == 0 || i == m {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                rule.push((t0 + i as f64 * hstep, coeff * hstep / 3.0));
            }
        }
        rule
    }
}

/// Evaluate the field at `(t, x)`. Rejects `t` outside `[0, T]`.
pub fn eval_field(params: &FieldParams, t: f64, x: Vec3) -> Result<Vec3, FieldError> {
    if !(0.0..=params.t_final).contains(&t) {
        return Err(FieldError::TimeOutOfRange {
            t,
            t_final: params.t_final,
        });
    }
    let envelope = (-dot3(x, x) / (2.0 * params.sigma * params.sigma)).exp();
    let mut b = [0.0; 3];
    for (j, mode) in params.modes.iter().enumerate() {
        let c = params.coefficient(j, t);
        if c == 0.0 {
            continue;
        }
        let u = envelope * dot3(mode.wave, x).cos();
        b = crate::math::add3(b, crate::math::scale3(mode.direction, c * u));
    }
    Ok(b)
}

/// Scalar mode profile u = g·cos(k·x) and its first/second derivatives.
/// Returns (u, ∇u, Hess u).
fn mode_derivatives(sigma: f64, wave: Vec3, x: Vec3, envelope: f64) -> (f64, Vec3, [[f64; 3]; 3]) {
    let s2 = sigma * sigma;
    let phase = dot3(wave, x);
    let (sin, cos) = phase.sin_cos();
    let u = envelope * cos;
    let mut grad = [0.0; 3];
    for b in 0..3 {
        grad[b] = envelope * (-(x[b] / s2) * cos - wave[b] * sin);
    }
    let mut hess = [[0.0; 3]; 3];
    for b in 0..3 {
        for c in b..3 {
            let delta = if b == c { 1.0 } else { 0.0 };
            let val = envelope
                * ((x[b] * x[c] / (s2 * s2) - delta / s2 - wave[b] * wave[c]) * cos
                    + (x[b] * wave[c] + x[c] * wave[b]) / s2 * sin);
            hess[b][c] = val;
            hess[c][b] = val;
        }
    }
    (u, grad, hess)
}

/// First and second spatial derivatives of the field at `(t, x)`, analytic.
pub fn eval_field_jacobian(
    params: &FieldParams,
    t: f64,
    x: Vec3,
) -> Result<FieldJacobian, FieldError> {
    if !(0.0..=params.t_final).contains(&t) {
        return Err(FieldError::TimeOutOfRange {
            t,
            t_final: params.t_final,
        });
    }
    let envelope = (-dot3(x, x) / (2.0 * params.sigma * params.sigma)).exp();
    let mut db = [[0.0; 3]; 3];
    let mut d2b = [[[0.0; 3]; 3]; 3];
    for (j, mode) in params.modes.iter().enumerate() {
        let c = params.coefficient(j, t);
        if c == 0.0 {
            continue;
        }
        let (_, grad, hess) = mode_derivatives(params.sigma, mode.wave, x, envelope);
        for a in 0..3 {
            let ca = c * mode.direction[a];
            for b in 0..3 {
                db[a][b] += ca * grad[b];
                for cc in 0..3 {
                    d2b[a][b][cc] += ca * hess[b][cc];
                }
            }
        }
    }
    Ok(FieldJacobian { db, d2b })
}

// ---------------------------------------------------------------------------
// Norm evaluation. The spatial profiles S_{j,α} = D^α u_j are θ-independent,
// so they are tabulated once per (mode set, quadrature) and reused across
// calls with different θ — the optimizer projects candidate fields every
// iteration and this makes that cheap.
// ---------------------------------------------------------------------------

/// Number of multi-indices |α| ≤ 2 in three variables (multi-index
/// convention: mixed partials counted once).
const N_ALPHA: usize = 10;
/// Multi-index table: value, three first, three pure second, three mixed.
/// Indices 0; 1..=3 (∂_1, ∂_2, ∂_3); 4..=6 (∂_1², ∂_2², ∂_3²); 7..=9
/// (∂_1∂_2, ∂_1∂_3, ∂_2∂_3).
const ALPHA_PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Tabulated mode profiles on the quadrature grid. Layout:
/// `values[(j * N_ALPHA + alpha) * n_nodes + node]`.
pub struct NormEvaluator {
    n_modes: usize,
    n_knots: usize,
    t_final: f64,
    beta: f64,
    k_bound: f64,
    directions: Vec<Vec3>,
    n_nodes: usize,
    cell_volume: f64,
    values: Vec<f64>,
    time_rule: Vec<(f64, f64)>,
    /// grid node coordinates (for the embedding probe)
    nodes: Vec<Vec3>,
}

impl NormEvaluator {
    /// Tabulate the spatial profiles for a field's mode set under `quad`.
    pub fn new(params: &FieldParams, quad: &QuadratureSpec) -> Result<Self, FieldError> {
        quad.validate(params)?;
        let n = quad.nodes_per_axis;
        let half = quad.box_sigmas * params.sigma;
        let spacing = 2.0 * half / n as f64;
        let n_nodes = n * n * n;
        let n_modes = params.modes.len();
        let mut values = vec![0.0; n_modes * N_ALPHA * n_nodes];
        let mut nodes = Vec::with_capacity(n_nodes);
        let coord = |i: usize| -half + (i as f64 + 0.5) * spacing;
        let mut node = 0usize;
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let x = [coord(ix), coord(iy), coord(iz)];
                    nodes.push(x);
                    let envelope =
                        (-dot3(x, x) / (2.0 * params.sigma * params.sigma)).exp();
                    for (j, mode) in params.modes.iter().enumerate() {
                        let (u, grad, hess) =
                            mode_derivatives(params.sigma, mode.wave, x, envelope);
                        let base = (j * N_ALPHA) * n_nodes + node;
                        values[base] = u;
                        for b in 0..3 {
                            values[base + (1 + b) * n_nodes] = grad[b];
                            values[base + (4 + b) * n_nodes] = hess[b][b];
                        }
                        for (slot, &(b, c)) in ALPHA_PAIRS.iter().enumerate() {
                            values[base + (7 + slot) * n_nodes] = hess[b][c];
                        }
                    }
                    node += 1;
                }
            }
        }
        Ok(NormEvaluator {
            n_modes,
            n_knots: params.n_time_knots,
            t_final: params.t_final,
            beta: params.beta,
            k_bound: params.k_bound,
            directions: params.modes.iter().map(|m| m.direction).collect(),
            n_nodes,
            cell_volume: spacing * spacing * spacing,
            values,
            time_rule: quad.time_rule(params),
            nodes,
        })
    }

    fn coefficient(&self, theta: &[f64], j: usize, t: f64) -> f64 {
        let panel_width = self.t_final / (self.n_knots - 1) as f64;
        let raw = (t / panel_width).floor();
        let panel = (raw as isize).clamp(0, self.n_knots as isize - 2) as usize;
        let s = (t - panel as f64 * panel_width) / panel_width;
        let base = j * self.n_knots + panel;
        (1.0 - s) * theta[base] + s * theta[base + 1]
    }

    /// Σ over grid of |Σ_j c_j S_{j,α} e_j|^p for one α; also returns the
    /// squared-magnitude sum (p = 2 component, reused by the H-norm).
    fn alpha_sums(&self, coeffs: &[f64], alpha: usize, half_beta_int: Option<i32>) -> (f64, f64) {
        let mut acc_beta = 0.0;
        let mut acc_two = 0.0;
        let n_nodes = self.n_nodes;
        for node in 0..n_nodes {
            let mut b = [0.0f64; 3];
            for j in 0..self.n_modes {
                let s = self.values[(j * N_ALPHA + alpha) * n_nodes + node];
                let c = coeffs[j];
                let e = self.directions[j];
                b[0] += c * s * e[0];
                b[1] += c * s * e[1];
                b[2] += c * s * e[2];
            }
            let m2 = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
            acc_two += m2;
            acc_beta += match half_beta_int {
                Some(p) => m2.powi(p),
                None => m2.powf(self.beta / 2.0),
            };
        }
        (acc_beta, acc_two)
    }

    /// W-, H- and V-norms of `B_θ` under the fixed quadrature.
    pub fn norms(&self, theta: &[f64]) -> NormReport {
        let half_beta = self.beta / 2.0;
        let half_beta_int = if half_beta.fract() == 0.0 && half_beta <= 16.0 {
            Some(half_beta as i32)
        } else {
            None
        };
        let mut w_sq = 0.0;
        let mut h_sq = 0.0;
        let mut coeffs = vec![0.0; self.n_modes];
        for &(t, wt) in &self.time_rule {
            for j in 0..self.n_modes {
                coeffs[j] = self.coefficient(theta, j, t);
            }
            let mut sob_beta = 0.0;
            let mut h1 = 0.0;
            for alpha in 0..N_ALPHA {
                let (a_beta, a_two) = self.alpha_sums(&coeffs, alpha, half_beta_int);
                sob_beta += a_beta * self.cell_volume;
                if alpha <= 3 {
                    h1 += a_two * self.cell_volume;
                }
            }
            w_sq += wt * sob_beta.powf(2.0 / self.beta);
            h_sq += wt * h1;
        }
        let w_norm = w_sq.max(0.0).sqrt();
        let h_norm = h_sq.max(0.0).sqrt();
        NormReport {
            w_norm,
            h_norm,
            v_norm: w_norm + h_norm,
        }
    }

    /// ∫₀ᵀ ∫ |D_x B|²_F dx dt — the squared L² norm of the spatial Jacobian
    /// (the regularization term's core), consistent with the H-norm
    /// components (same grid, same time rule).
    pub fn dx_b_l2_sq(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut coeffs = vec![0.0; self.n_modes];
        for &(t, wt) in &self.time_rule {
            for j in 0..self.n_modes {
                coeffs[j] = self.coefficient(theta, j, t);
            }
            let mut grad_sq = 0.0;
            for alpha in 1..=3 {
                let (_, a_two) = self.alpha_sums(&coeffs, alpha, Some(1));
                grad_sq += a_two * self.cell_volume;
            }
            acc += wt * grad_sq;
        }
        acc
    }

    /// Project θ radially onto the admissible ball `‖B_θ‖_V ≤ K`.
    /// Fields already inside are returned unchanged (exact idempotence).
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        let norms = self.norms(theta);
        if norms.v_norm <= self.k_bound || norms.v_norm == 0.0 {
            return theta.to_vec();
        }
        let s = self.k_bound / norms.v_norm;
        theta.iter().map(|c| c * s).collect()
    }

    /// Empirical embedding ratio `sup_t ‖B(t)‖_{C^{0,γ}} / ‖B(t)‖_{W^{1,β}}`
    /// sampled on the quadrature grid. The Hölder seminorm is estimated over
    /// a deterministic strided subsample of grid-point pairs; the result is
    /// a lower bound of the true ratio's numerator and is reported, not
    /// asserted against any analytic constant.
    pub fn embedding_ratio(&self, theta: &[f64], stride: usize) -> f64 {
        let gamma = 1.0 - 3.0 / self.beta;
        let mut coeffs = vec![0.0; self.n_modes];
        let mut worst: f64 = 0.0;
        let n_nodes = self.n_nodes;
        let subsample: Vec<usize> = (0..n_nodes).step_by(stride.max(1)).collect();
        for &(t, _) in &self.time_rule {
            for j in 0..self.n_modes {
                coeffs[j] = self.coefficient(theta, j, t);
            }
            // W^{1,β}(t) norm and sup |B(t)| on the grid.
            let half_beta = self.beta / 2.0;
            let half_beta_int = if half_beta.fract() == 0.0 && half_beta <= 16.0 {
                Some(half_beta as i32)
            } else {
                None
            };
            let mut w1 = 0.0;
            for alpha in 0..=3 {
                let (a_beta, _) = self.alpha_sums(&coeffs, alpha, half_beta_int);
                w1 += a_beta * self.cell_volume;
            }
            let w1 = w1.powf(1.0 / self.beta);
            if w1 == 0.0 {
                continue;
            }
            let b_at = |node: usize| -> Vec3 {
                let mut b = [0.0f64; 3];
                for j in 0..self.n_modes {
                    let s = self.values[(j * N_ALPHA) * n_nodes + node];
                    b = crate::math::add3(b, crate::math::scale3(self.directions[j], coeffs[j] * s));
                }
                b
            };
            let mut sup = 0.0f64;
            for node in 0..n_nodes {
                sup = sup.max(crate::math::norm3(b_at(node)));
            }
            let mut seminorm = 0.0f64;
            for (i, &a) in subsample.iter().enumerate() {
                let ba = b_at(a);
                for &b in subsample.iter().skip(i + 1) {
                    let d = crate::math::norm3(crate::math::sub3(self.nodes[a], self.nodes[b]));
                    if d > 0.0 {
                        let diff = crate::math::norm3(crate::math::sub3(ba, b_at(b)));
                        seminorm = seminorm.max(diff / d.powf(gamma));
                    }
                }
            }
            worst = worst.max((sup + seminorm) / w1);
        }
        worst
    }
}

/// W-, H-, V-norms of the field under `quad` (one-shot convenience; heavy
/// callers should hold a [`NormEvaluator`]).
pub fn vnorm(params: &FieldParams, quad: &QuadratureSpec) -> Result<NormReport, FieldError> {
    Ok(NormEvaluator::new(params, quad)?.norms(&params.theta))
}

/// Squared L²-in-time-and-space norm of the spatial Jacobian `D_x B`.
pub fn dx_b_l2_sq(params: &FieldParams, quad: &QuadratureSpec) -> Result<f64, FieldError> {
    Ok(NormEvaluator::new(params, quad)?.dx_b_l2_sq(&params.theta))
}

/// Radial projection onto the admissible ball `‖B‖_V ≤ K` with the field's
/// default quadrature. Fields already inside are returned unchanged.
pub fn project_to_ball(params: &FieldParams) -> Result<FieldParams, FieldError> {
    let quad = QuadratureSpec::for_field(params);
    let evaluator = NormEvaluator::new(params, &quad)?;
    let theta = evaluator.project(&params.theta);
    let mut out = params.clone();
    out.theta = theta;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Field description file (TOML). Round-trips bit-exactly: floats are written
// in shortest round-trip decimal form.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FieldFileMode {
    wave: [f64; 3],
    direction: [f64; 3],
    coefficients: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FieldFile {
    beta: f64,
    k_bound: f64,
    t_final: f64,
    sigma: f64,
    time_knots: usize,
    modes: Vec<FieldFileMode>,
}

/// Serialize a field to the TOML description format.
pub fn field_to_toml(params: &FieldParams) -> String {
    let file = FieldFile {
        beta: params.beta,
        k_bound: params.k_bound,
        t_final: params.t_final,
        sigma: params.sigma,
        time_knots: params.n_time_knots,
        modes: params
            .modes
            .iter()
            .enumerate()
            .map(|(j, m)| FieldFileMode {
                wave: m.wave,
                direction: m.direction,
                coefficients: params.theta
                    [j * params.n_time_knots..(j + 1) * params.n_time_knots]
                    .to_vec(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("field serialization cannot fail")
}

/// Parse a field from the TOML description format.
pub fn field_from_toml(text: &str) -> Result<FieldParams, FieldError> {
    let file: FieldFile = toml::from_str(text).map_err(|e| FieldError::Parse(e.to_string()))?;
    let mut modes = Vec::with_capacity(file.modes.len());
    let mut theta = Vec::with_capacity(file.modes.len() * file.time_knots);
    for m in &file.modes {
        if m.coefficients.len() != file.time_knots {
            return Err(FieldError::Parse(format!(
                "mode has {} coefficients, expected {} (one per time knot)",
                m.coefficients.len(),
                file.time_knots
            )));
        }
        modes.push(Mode {
            wave: m.wave,
            direction: m.direction,
        });
        theta.extend_from_slice(&m.coefficients);
    }
    FieldParams::new(
        modes,
        theta,
        file.time_knots,
        file.t_final,
        file.sigma,
        file.beta,
        file.k_bound,
    )
}

/// Write a field description file.
pub fn save_field(params: &FieldParams, path: &std::path::Path) -> Result<(), FieldError> {
    std::fs::write(path, field_to_toml(params))?;
    Ok(())
}

/// Read a field description file.
pub fn load_field(path: &std::path::Path) -> Result<FieldParams, FieldError> {
    let text = std::fs::read_to_string(path)?;
    field_from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Single k = 0 mode along z with σ, unit-ish coefficients.
    fn gaussian_mode(sigma: f64, beta: f64, coeff: f64) -> FieldParams {
        FieldParams::new(
            vec![Mode {
                wave: [0.0; 3],
                direction: [0.0, 0.0, 1.0],
            }],
            vec![coeff, coeff],
            2,
            1.0,
            sigma,
            beta,
            5.0,
        )
        .unwrap()
    }

    fn probe_modes() -> Vec<Mode> {
        vec![
            Mode {
                wave: [0.0; 3],
                direction: [0.0, 0.0, 1.0],
            },
            Mode {
                wave: [0.9, 0.0, 0.0],
                direction: [0.0, 1.0, 0.0],
            },
            Mode {
                wave: [0.0, 0.9, 0.0],
                direction: [0.0, 0.0, 1.0],
            },
            Mode {
                wave: [0.5, 0.5, 0.0],
                direction: [1.0, 0.0, 0.0],
            },
        ]
    }

    fn probe_field(seed: u64) -> FieldParams {
        FieldParams::random_in_ball(seed, 0.8, probe_modes(), 3, 1.0, 2.0, 6.0, 5.0).unwrap()
    }

    #[test]
    fn zero_theta_evaluates_to_zero() {
        let params = FieldParams::zero(probe_modes(), 3, 1.0, 2.0, 6.0, 5.0).unwrap();
        let b = eval_field(&params, 0.5, [0.3, -0.2, 0.9]).unwrap();
        assert_eq!(b, [0.0; 3]);
        let jac = eval_field_jacobian(&params, 0.5, [0.3, -0.2, 0.9]).unwrap();
        assert_eq!(jac.db, [[0.0; 3]; 3]);
    }

    #[test]
    fn single_gaussian_mode_matches_formula() {
        let b0 = 0.7;
        let params = gaussian_mode(2.0, 6.0, b0);
        let x = [1.0, -0.5, 0.25];
        let b = eval_field(&params, 0.3, x).unwrap();
        let expected = b0 * (-dot3(x, x) / 8.0).exp();
        assert_relative_eq!(b[2], expected, epsilon = 1e-15);
        assert_eq!(b[0], 0.0);
        assert_eq!(b[1], 0.0);
        // At |x| = 6σ the field is below e^{-18}·max.
        let far = eval_field(&params, 0.3, [12.0, 0.0, 0.0]).unwrap();
        assert!(far[2].abs() <= b0 * (-18.0f64).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn rejects_time_outside_interval() {
        let params = gaussian_mode(1.0, 6.0, 1.0);
        assert!(matches!(
            eval_field(&params, -0.1, [0.0; 3]),
            Err(FieldError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            eval_field_jacobian(&params, 1.1, [0.0; 3]),
            Err(FieldError::TimeOutOfRange { .. })
        ));
        assert!(eval_field(&params, 0.0, [0.0; 3]).is_ok());
        assert!(eval_field(&params, 1.0, [0.0; 3]).is_ok());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let params = probe_field(11);
        let t = 0.4;
        let x = [0.7, -0.3, 1.1];
        let jac = eval_field_jacobian(&params, t, x).unwrap();
        let delta = 1e-4;
        let mut max_err_1 = 0.0f64;
        let mut max_err_2 = 0.0f64;
        for b in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[b] += delta;
            xm[b] -= delta;
            let fp = eval_field(&params, t, xp).unwrap();
            let fm = eval_field(&params, t, xm).unwrap();
            let jp = eval_field_jacobian(&params, t, xp).unwrap();
            let jm = eval_field_jacobian(&params, t, xm).unwrap();
            for a in 0..3 {
                let fd = (fp[a] - fm[a]) / (2.0 * delta);
                max_err_1 = max_err_1.max((fd - jac.db[a][b]).abs());
                for c in 0..3 {
                    let fd2 = (jp.db[a][c] - jm.db[a][c]) / (2.0 * delta);
                    max_err_2 = max_err_2.max((fd2 - jac.d2b[a][c][b]).abs());
                }
            }
        }
        assert!(max_err_1 < 1e-6, "first-derivative FD error {max_err_1}");
        assert!(max_err_2 < 1e-6, "second-derivative FD error {max_err_2}");
    }

    #[test]
    fn gaussian_h_norm_matches_closed_form() {
        // For B = (0, 0, e^{-|x|²/2}) on [0, 1] with β = 2:
        // ‖B‖_H² = ∫|B|² + ∫|∇B|² = π^{3/2} + (3/2)π^{3/2}.
        let params = FieldParams::new(
            vec![Mode {
                wave: [0.0; 3],
                direction: [0.0, 0.0, 1.0],
            }],
            vec![1.0, 1.0],
            2,
            1.0,
            1.0,
            3.5, // β only affects the W part; H is always β = 2
            5.0,
        )
        .unwrap();
        let quad = QuadratureSpec::for_field(&params);
        let report = vnorm(&params, &quad).unwrap();
        let pi32 = std::f64::consts::PI.powf(1.5);
        let expected_h_sq = pi32 + 1.5 * pi32;
        assert_relative_eq!(
            report.h_norm * report.h_norm,
            expected_h_sq,
            max_relative = 1e-3
        );
        assert_eq!(report.v_norm, report.w_norm + report.h_norm);
    }

    #[test]
    fn dx_b_matches_closed_form_with_time_scaling() {
        // ∫₀¹∫ |∇(c(t)·e^{-|x|²/2})|² dx dt = (3/2)π^{3/2} ∫ c(t)² dt.
        // With c linear from 0 to 1, ∫c² = 1/3 (Simpson integrates exactly).
        let params = FieldParams::new(
            vec![Mode {
                wave: [0.0; 3],
                direction: [0.0, 0.0, 1.0],
            }],
            vec![0.0, 1.0],
            2,
            1.0,
            1.0,
            6.0,
            5.0,
        )
        .unwrap();
        let quad = QuadratureSpec::for_field(&params);
        let value = dx_b_l2_sq(&params, &quad).unwrap();
        let pi32 = std::f64::consts::PI.powf(1.5);
        assert_relative_eq!(value, 1.5 * pi32 / 3.0, max_relative = 1e-3);
        // Scaling θ by c multiplies the squared norm by c².
        let mut doubled = params.clone();
        for c in &mut doubled.theta {
            *c *= 2.0;
        }
        let value2 = dx_b_l2_sq(&doubled, &quad).unwrap();
        assert_relative_eq!(value2, 4.0 * value, max_relative = 1e-12);
        // Zero field: exactly zero.
        let zero = FieldParams::zero(probe_modes(), 3, 1.0, 2.0, 6.0, 5.0).unwrap();
        assert_eq!(dx_b_l2_sq(&zero, &QuadratureSpec::for_field(&zero)).unwrap(), 0.0);
    }

    #[test]
    fn vnorm_is_absolutely_homogeneous_and_subadditive() {
        let a = probe_field(3);
        let quad = QuadratureSpec::for_field(&a);
        let eval = NormEvaluator::new(&a, &quad).unwrap();
        let na = eval.norms(&a.theta);
        let doubled: Vec<f64> = a.theta.iter().map(|c| -2.0 * c).collect();
        let nd = eval.norms(&doubled);
        assert_relative_eq!(nd.v_norm, 2.0 * na.v_norm, max_relative = 1e-12);
        assert_relative_eq!(nd.w_norm, 2.0 * na.w_norm, max_relative = 1e-12);

        let b = probe_field(4);
        let nb = eval.norms(&b.theta);
        let sum: Vec<f64> = a
            .theta
            .iter()
            .zip(&b.theta)
            .map(|(x, y)| x + y)
            .collect();
        let ns = eval.norms(&sum);
        assert!(
            ns.v_norm <= na.v_norm + nb.v_norm + 1e-12,
            "triangle inequality violated: {} > {} + {}",
            ns.v_norm,
            na.v_norm,
            nb.v_norm
        );
        // Zero field has zero norm.
        let zero = vec![0.0; a.theta.len()];
        assert_eq!(eval.norms(&zero).v_norm, 0.0);
    }

    #[test]
    fn aliasing_guard_rejects_coarse_grids() {
        let mut params = probe_field(5);
        params.modes[1].wave = [40.0, 0.0, 0.0]; // wavelength ≈ 0.157
        let quad = QuadratureSpec::for_field(&params);
        assert!(matches!(
            vnorm(&params, &quad),
            Err(FieldError::QuadratureTooCoarse { .. })
        ));
    }

    #[test]
    fn projection_scales_onto_ball_and_is_idempotent() {
        let inside = probe_field(6); // built inside the ball
        let quad = QuadratureSpec::for_field(&inside);
        let norms = vnorm(&inside, &quad).unwrap();
        assert!(norms.v_norm <= inside.k_bound);
        let projected = project_to_ball(&inside).unwrap();
        assert_eq!(projected.theta, inside.theta); // unchanged bit-for-bit

        let mut outside = inside.clone();
        let blow_up = 4.0 * inside.k_bound / norms.v_norm.max(1e-12);
        for c in &mut outside.theta {
            *c *= blow_up;
        }
        let proj = project_to_ball(&outside).unwrap();
        let nproj = vnorm(&proj, &quad).unwrap();
        assert_relative_eq!(nproj.v_norm, inside.k_bound, max_relative = 1e-9);
        let proj2 = project_to_ball(&proj).unwrap();
        for (a, b) in proj2.theta.iter().zip(&proj.theta) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        // Zero field projects to itself.
        let zero = FieldParams::zero(probe_modes(), 3, 1.0, 2.0, 6.0, 5.0).unwrap();
        let pz = project_to_ball(&zero).unwrap();
        assert_eq!(pz.theta, zero.theta);
    }

    #[test]
    fn field_file_roundtrip_is_bit_exact() {
        let params = probe_field(7);
        let text = field_to_toml(&params);
        let back = field_from_toml(&text).unwrap();
        assert_eq!(back.n_time_knots, params.n_time_knots);
        assert_eq!(back.theta.len(), params.theta.len());
        for (a, b) in back.theta.iter().zip(&params.theta) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in back.modes.iter().zip(&params.modes) {
            for c in 0..3 {
                assert_eq!(a.wave[c].to_bits(), b.wave[c].to_bits());
                assert_eq!(a.direction[c].to_bits(), b.direction[c].to_bits());
            }
        }
        assert_eq!(back.beta.to_bits(), params.beta.to_bits());
        assert_eq!(back.sigma.to_bits(), params.sigma.to_bits());
        // And the serialization itself is stable (byte-identical re-dump).
        assert_eq!(field_to_toml(&back), text);
    }

    #[test]
    fn field_file_rejects_malformed_input() {
        assert!(matches!(
            field_from_toml("beta = \"six\""),
            Err(FieldError::Parse(_))
        ));
        // Wrong coefficient count.
        let text = r#"
beta = 6.0
k_bound = 5.0
t_final = 1.0
sigma = 2.0
time_knots = 3

[[modes]]
wave = [0.0, 0.0, 0.0]
direction = [0.0, 0.0, 1.0]
coefficients = [1.0]
"#;
        assert!(matches!(field_from_toml(text), Err(FieldError::Parse(_))));
    }

    #[test]
    fn class_rejects_invalid_parameters() {
        let modes = probe_modes();
        assert!(FieldParams::new(modes.clone(), vec![0.0; 12], 3, 1.0, 2.0, 3.0, 5.0).is_err()); // β ≤ 3
        assert!(FieldParams::new(modes.clone(), vec![0.0; 7], 3, 1.0, 2.0, 6.0, 5.0).is_err()); // θ length
        assert!(FieldParams::new(modes.clone(), vec![0.0; 12], 3, -1.0, 2.0, 6.0, 5.0).is_err()); // T
        assert!(FieldParams::new(modes, vec![0.0; 12], 3, 1.0, 2.0, 6.0, -5.0).is_err()); // K
    }

    #[test]
    fn embedding_ratio_is_finite_over_random_fields() {
        // Sanity probe of the Sobolev-to-Hölder embedding on the quadrature
        // grid: the empirical ratio stays finite and bounded across seeds.
        // The bound itself is reported (printed), not asserted against an
        // analytic constant.
        let quad = QuadratureSpec {
            nodes_per_axis: 24,
            box_sigmas: 6.0,
            time_subdiv: 1,
        };
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let f = probe_field(100 + seed);
            let eval = NormEvaluator::new(&f, &quad).unwrap();
            let r = eval.embedding_ratio(&f.theta, 97);
            assert!(r.is_finite());
            worst = worst.max(r);
        }
        println!("max empirical C^0,γ / W^1,β ratio over 20 random fields: {worst:.6}");
        assert!(worst.is_finite() && worst > 0.0);
    }
}
