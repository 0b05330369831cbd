//! Mesh side of the particle–mesh scheme: charge deposition, the free-space
//! Coulomb solve, and field interpolation.
//!
//! The potential solved here is the attractive-sign convention
//!
//! ```text
//!   ψ(x) = ∫ ρ(y) / |x - y| dy,        so that  -Δψ = 4πρ,  ψ → 0 at ∞,
//! ```
//!
//! discretized on a node-centered cubic grid as
//!
//! ```text
//!   ψ_i = Δ³ Σ_{j≠i} ρ_j / |x_i - x_j|  +  ρ_i Δ² · SELF_CELL_COULOMB,
//! ```
//!
//! where the self term is the exact Coulomb integral of a uniform unit cube
//! over its own center. Two evaluation paths produce the same numbers: a
//! direct double sum (authoritative, O(N²)) and a zero-padded FFT
//! convolution (O(N log N)); they agree to roundoff because they evaluate
//! the *same* discrete sum.
//!
//! Charge arrives on the grid by trilinear (cloud-in-cell) deposition, which
//! partitions each marker's charge across the 8 surrounding nodes; forces
//! return to the markers by the transpose trilinear interpolation. The force
//! is F = -∇ψ with second-order one-sided differences on the grid faces.

use crate::math::{fft3, Complex, Vec3};
use crate::phase_space::ParticleEnsemble;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coulomb integral of a unit-density unit cube over its own center:
/// mean of 1/|r| over [-1/2, 1/2]³, closed form 3·ln(2 + √3) - π/2.
/// Re-derived numerically by `scripts/self_cell_constant.py`.
pub const SELF_CELL_COULOMB: f64 = 2.380077363979553;

/// Errors from gridding, solving, and interpolation.
#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("grid needs at least 8 nodes per axis, got {0}")]
    GridTooSmall(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("marker {index} at ({position:?}) lies outside the charge grid")]
    MarkerOutsideGrid { index: usize, position: Vec3 },
    #[error("point ({position:?}) lies outside the field grid")]
    PointOutsideGrid { position: Vec3 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

/// Node-centered cubic grid: `n` nodes per axis spanning
/// `[center - half_extent, center + half_extent]` with spacing
/// `Δ = 2·half_extent/(n-1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: Vec3,
    pub half_extent: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(center: Vec3, half_extent: f64, n: usize) -> Result<Self, PoissonError> {
        if n < 8 {
            return Err(PoissonError::GridTooSmall(n));
        }
        if !(half_extent.is_finite() && half_extent > 0.0)
            || center.iter().any(|c| !c.is_finite())
        {
            return Err(PoissonError::InvalidGrid(format!(
                "center {center:?}, half_extent {half_extent}"
            )));
        }
        Ok(GridSpec {
            center,
            half_extent,
            n,
        })
    }

    /// Grid spacing.
    #[inline]
    pub fn delta(&self) -> f64 {
        2.0 * self.half_extent / (self.n - 1) as f64
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n * self.n * self.n
    }

    #[inline]
    pub fn min_corner(&self) -> Vec3 {
        [
            self.center[0] - self.half_extent,
            self.center[1] - self.half_extent,
            self.center[2] - self.half_extent,
        ]
    }

    /// Position of node `(ix, iy, iz)`.
    #[inline]
    pub fn node(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let d = self.delta();
        let c = self.min_corner();
        [
            c[0] + ix as f64 * d,
            c[1] + iy as f64 * d,
            c[2] + iz as f64 * d,
        ]
    }

    /// Indices of the node nearest to `x` (clamped into the grid).
    pub fn nearest_node(&self, x: Vec3) -> (usize, usize, usize) {
        let d = self.delta();
        let c = self.min_corner();
        let clamp = |v: f64| -> usize {
            let i = ((v + 0.5 * d) / d).floor();
            (i.max(0.0) as usize).min(self.n - 1)
        };
        (
            clamp(x[0] - c[0]),
            clamp(x[1] - c[1]),
            clamp(x[2] - c[2]),
        )
    }

    /// Whether `x` lies inside the closed grid box.
    pub fn contains(&self, x: Vec3) -> bool {
        (0..3).all(|a| (x[a] - self.center[a]).abs() <= self.half_extent)
    }
}

/// A field sampled on grid nodes, row-major with `z` contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<V: Copy> {
    pub spec: GridSpec,
    pub data: Vec<V>,
}

pub type ScalarGrid = GridField<f64>;
pub type VectorGrid = GridField<Vec3>;

impl<V: Copy> GridField<V> {
    pub fn filled(spec: GridSpec, value: V) -> Self {
        GridField {
            spec,
            data: vec![value; spec.n_nodes()],
        }
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.spec.n + iy) * self.spec.n + iz
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> V {
        self.data[self.idx(ix, iy, iz)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, value: V) {
        let i = self.idx(ix, iy, iz);
        self.data[i] = value;
    }
}

/// Deposit marker charge onto the grid by cloud-in-cell weighting, returning
/// a charge *density* (weights divided by the cell volume Δ³). Fails on the
/// first marker outside the grid box.
pub fn deposit_charge(
    ensemble: &ParticleEnsemble,
    spec: &GridSpec,
) -> Result<ScalarGrid, PoissonError> {
    let n = spec.n;
    let d = spec.delta();
    let corner = spec.min_corner();
    let inv_cell = 1.0 / (d * d * d);
    let mut rho = ScalarGrid::filled(*spec, 0.0);
    for (index, (point, &value)) in ensemble
        .positions
        .iter()
        .zip(&ensemble.values)
        .enumerate()
    {
        if value == 0.0 {
            continue;
        }
        let x = point.x;
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut outside = false;
        for a in 0..3 {
            let u = (x[a] - corner[a]) / d;
            if !(0.0..=(n - 1) as f64).contains(&u) {
                outside = true;
                break;
            }
            let i0 = (u.floor() as usize).min(n - 2);
            cell[a] = i0;
            frac[a] = u - i0 as f64;
        }
        if outside {
            return Err(PoissonError::MarkerOutsideGrid { index, position: x });
        }
        let charge = value * ensemble.weight * inv_cell;
        for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
            for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                for (dz, wz) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                    let i = rho.idx(cell[0] + dx, cell[1] + dy, cell[2] + dz);
                    rho.data[i] += charge * wx * wy * wz;
                }
            }
        }
    }
    Ok(rho)
}

/// Which evaluation path computes the discrete Coulomb sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoissonMethod {
    /// Direct O(N²) double sum. Authoritative; use for small grids.
    Direct,
    /// Zero-padded FFT convolution; identical values to roundoff.
    Fourier,
}

/// Reusable FFT Coulomb solver: caches the transformed kernel for one grid
/// shape (n, Δ). Grids sharing shape but differing in center reuse it.
pub struct FourierPoisson {
    n: usize,
    m: usize,
    delta: f64,
    kernel_hat: Vec<Complex>,
}

impl FourierPoisson {
    pub fn new(spec: &GridSpec) -> Result<Self, PoissonError> {
        let n = spec.n;
        if n < 8 {
            return Err(PoissonError::GridTooSmall(n));
        }
        let m = (2 * n - 1).next_power_of_two();
        let delta = spec.delta();
        let mut kernel = vec![Complex::ZERO; m * m * m];
        let wrap = |d: i64| -> usize { d.rem_euclid(m as i64) as usize };
        let range = -(n as i64 - 1)..=(n as i64 - 1);
        for dx in range.clone() {
            for dy in range.clone() {
                for dz in range.clone() {
                    let value = if dx == 0 && dy == 0 && dz == 0 {
                        SELF_CELL_COULOMB / delta
                    } else {
                        let r2 = (dx * dx + dy * dy + dz * dz) as f64;
                        1.0 / (delta * r2.sqrt())
                    };
                    kernel[(wrap(dx) * m + wrap(dy)) * m + wrap(dz)] =
                        Complex::new(value, 0.0);
                }
            }
        }
        fft3(&mut kernel, m, false);
        Ok(FourierPoisson {
            n,
            m,
            delta,
            kernel_hat: kernel,
        })
    }

    /// Solve for the potential of `rho`. The grid must match the shape the
    /// kernel was built for.
    pub fn solve(&self, rho: &ScalarGrid) -> Result<ScalarGrid, PoissonError> {
        let n = rho.spec.n;
        if n != self.n || (rho.spec.delta() - self.delta).abs() > 1e-12 * self.delta.abs() {
            return Err(PoissonError::GridMismatch(format!(
                "kernel built for n = {}, Δ = {}; got n = {}, Δ = {}",
                self.n,
                self.delta,
                n,
                rho.spec.delta()
            )));
        }
        let m = self.m;
        let mut work = vec![Complex::ZERO; m * m * m];
        for ix in 0..n {
            for iy in 0..n {
                let src = (ix * n + iy) * n;
                let dst = (ix * m + iy) * m;
                for iz in 0..n {
                    work[dst + iz] = Complex::new(rho.data[src + iz], 0.0);
                }
            }
        }
        fft3(&mut work, m, false);
        for (w, k) in work.iter_mut().zip(&self.kernel_hat) {
            *w = w.mul(*k);
        }
        fft3(&mut work, m, true);
        let cell_volume = self.delta * self.delta * self.delta;
        let scale = cell_volume / (m * m * m) as f64;
        let mut psi = ScalarGrid::filled(rho.spec, 0.0);
        for ix in 0..n {
            for iy in 0..n {
                let src = (ix * m + iy) * m;
                let dst = (ix * n + iy) * n;
                for iz in 0..n {
                    psi.data[dst + iz] = work[src + iz].re * scale;
                }
            }
        }
        Ok(psi)
    }
}

/// Solve the free-space Coulomb problem for a gridded charge density.
pub fn solve_potential(
    rho: &ScalarGrid,
    method: PoissonMethod,
) -> Result<ScalarGrid, PoissonError> {
    match method {
        PoissonMethod::Fourier => FourierPoisson::new(&rho.spec)?.solve(rho),
        PoissonMethod::Direct => {
            let spec = rho.spec;
            let n = spec.n;
            let delta = spec.delta();
            let cell_volume = delta * delta * delta;
            // Precompute node coordinates in units of Δ (integers) to keep
            // the inner distance computation exact.
            let mut psi = ScalarGrid::filled(spec, 0.0);
            let total = spec.n_nodes();
            for i in 0..total {
                let (ix, iy, iz) = (i / (n * n), (i / n) % n, i % n);
                let mut acc = rho.data[i] * SELF_CELL_COULOMB * delta * delta;
                for j in 0..total {
                    if j == i {
                        continue;
                    }
                    let (jx, jy, jz) = (j / (n * n), (j / n) % n, j % n);
                    let dx = ix as f64 - jx as f64;
                    let dy = iy as f64 - jy as f64;
                    let dz = iz as f64 - jz as f64;
                    let dist = delta * (dx * dx + dy * dy + dz * dz).sqrt();
                    acc += rho.data[j] * cell_volume / dist;
                }
                psi.data[i] = acc;
            }
            Ok(psi)
        }
    }
}

/// Force field F = -∇ψ by central differences (second-order one-sided
/// stencils on the grid faces).
pub fn electric_field(psi: &ScalarGrid) -> VectorGrid {
    let n = psi.spec.n;
    let inv_2d = 1.0 / (2.0 * psi.spec.delta());
    let mut field = VectorGrid::filled(psi.spec, [0.0; 3]);
    let stride = [n * n, n, 1usize];
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let i = (ix * n + iy) * n + iz;
                let pos = [ix, iy, iz];
                let mut f = [0.0; 3];
                for a in 0..3 {
                    let s = stride[a];
                    let derivative = if pos[a] == 0 {
                        (-3.0 * psi.data[i] + 4.0 * psi.data[i + s] - psi.data[i + 2 * s])
                            * inv_2d
                    } else if pos[a] == n - 1 {
                        (3.0 * psi.data[i] - 4.0 * psi.data[i - s] + psi.data[i - 2 * s])
                            * inv_2d
                    } else {
                        (psi.data[i + s] - psi.data[i - s]) * inv_2d
                    };
                    f[a] = -derivative;
                }
                field.data[i] = f;
            }
        }
    }
    field
}

/// Trilinear interpolation of a vector field at `x`. Errors outside the box.
pub fn interpolate_field(field: &VectorGrid, x: Vec3) -> Result<Vec3, PoissonError> {
    let spec = field.spec;
    let n = spec.n;
    let d = spec.delta();
    let corner = spec.min_corner();
    let mut cell = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = (x[a] - corner[a]) / d;
        if !(0.0..=(n - 1) as f64).contains(&u) {
            return Err(PoissonError::PointOutsideGrid { position: x });
        }
        let i0 = (u.floor() as usize).min(n - 2);
        cell[a] = i0;
        frac[a] = u - i0 as f64;
    }
    let mut out = [0.0; 3];
    for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (dz, wz) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                let v = field.get(cell[0] + dx, cell[1] + dy, cell[2] + dz);
                let w = wx * wy * wz;
                for a in 0..3 {
                    out[a] += w * v[a];
                }
            }
        }
    }
    Ok(out)
}

/// Force −∇ψ̃ of the *trilinearly interpolated* potential (the exact adjoint
/// of cloud-in-cell deposition). Using this sampler for the marker push makes
/// the discrete kinetic/field energy exchange consistent: the work done on
/// the markers equals the change of the interaction energy ½Δ³Σρψ up to time
/// discretization. Each force component is constant along its own axis within
/// a cell and bilinear in the other two, so the field is discontinuous across
/// cell faces — unlike [`interpolate_field`] applied to node forces, which is
/// continuous but not work-consistent.
pub fn interpolate_neg_gradient(psi: &ScalarGrid, x: Vec3) -> Result<Vec3, PoissonError> {
    let spec = psi.spec;
    let n = spec.n;
    let d = spec.delta();
    let corner = spec.min_corner();
    let mut cell = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = (x[a] - corner[a]) / d;
        if !(0.0..=(n - 1) as f64).contains(&u) {
            return Err(PoissonError::PointOutsideGrid { position: x });
        }
        let i0 = (u.floor() as usize).min(n - 2);
        cell[a] = i0;
        frac[a] = u - i0 as f64;
    }
    let p = |dx: usize, dy: usize, dz: usize| -> f64 {
        psi.get(cell[0] + dx, cell[1] + dy, cell[2] + dz)
    };
    let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    let mut out = [0.0; 3];
    // d/dx of the x-weights is ∓1/d; the remaining two axes keep their
    // linear weights.
    out[0] = -(1.0 / d)
        * ((p(1, 0, 0) - p(0, 0, 0)) * gy * gz
            + (p(1, 1, 0) - p(0, 1, 0)) * fy * gz
            + (p(1, 0, 1) - p(0, 0, 1)) * gy * fz
            + (p(1, 1, 1) - p(0, 1, 1)) * fy * fz);
    out[1] = -(1.0 / d)
        * ((p(0, 1, 0) - p(0, 0, 0)) * gx * gz
            + (p(1, 1, 0) - p(1, 0, 0)) * fx * gz
            + (p(0, 1, 1) - p(0, 0, 1)) * gx * fz
            + (p(1, 1, 1) - p(1, 0, 1)) * fx * fz);
    out[2] = -(1.0 / d)
        * ((p(0, 0, 1) - p(0, 0, 0)) * gx * gy
            + (p(1, 0, 1) - p(1, 0, 0)) * fx * gy
            + (p(0, 1, 1) - p(0, 1, 0)) * gx * fy
            + (p(1, 1, 1) - p(1, 1, 0)) * fx * fy);
    Ok(out)
}

/// Trilinear interpolation of a scalar grid at `x`.
pub fn interpolate_scalar(grid: &ScalarGrid, x: Vec3) -> Result<f64, PoissonError> {
    let spec = grid.spec;
    let n = spec.n;
    let d = spec.delta();
    let corner = spec.min_corner();
    let mut cell = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = (x[a] - corner[a]) / d;
        if !(0.0..=(n - 1) as f64).contains(&u) {
            return Err(PoissonError::PointOutsideGrid { position: x });
        }
        let i0 = (u.floor() as usize).min(n - 2);
        cell[a] = i0;
        frac[a] = u - i0 as f64;
    }
    let mut out = 0.0;
    for (dx, wx) in [(0, 1.0 - frac[0]), (1, frac[0])] {
        for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
            for (dz, wz) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                out += wx * wy * wz * grid.get(cell[0] + dx, cell[1] + dy, cell[2] + dz);
            }
        }
    }
    Ok(out)
}

/// Interaction energy ½ Δ³ Σ ρ ψ of a charge density with its potential.
/// For the free-space kernel this equals the full-space field energy
/// (1/8π)∫|∇ψ|² of the discrete charge system with no box truncation.
pub fn interaction_energy(rho: &ScalarGrid, psi: &ScalarGrid) -> Result<f64, PoissonError> {
    if rho.spec != psi.spec {
        return Err(PoissonError::GridMismatch(
            "charge and potential grids differ".into(),
        ));
    }
    let mut sum = 0.0;
    for (r, p) in rho.data.iter().zip(&psi.data) {
        sum += r * p;
    }
    Ok(0.5 * sum * rho.spec.delta().powi(3))
}
