//! Phase-space state: the compactly supported initial datum, marker ensembles
//! sampled on a regular 6D lattice, discrete L^p norms, and running support
//! radii.
//!
//! The initial datum is the quartic bump
//!
//! ```text
//!   f0(x, v) = A · (1 - |x|²/r_x²)₊⁴ · (1 - |v|²/r_v²)₊⁴
//! ```
//!
//! which is nonnegative, compactly supported in the product of two balls, and
//! smooth enough that second finite differences converge across the support
//! boundary. Markers sit at integer multiples of the lattice spacing `h` in
//! every coordinate (the origin is a lattice point), restricted to the open
//! support `{f0 > 0}`, and each carries the quadrature weight `h⁶`.
//!
//! Marker values are set once at sampling time and never mutated by
//! transport; discrete L^p norms therefore depend only on the values and the
//! weight, which makes their conservation along the flow exact by
//! construction (the continuous statement: transport along a
//! measure-preserving flow leaves every L^p norm invariant).

use crate::math::Vec3;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Errors from phase-space construction, norms, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum PhaseSpaceError {
    #[error("invalid datum: {0}")]
    InvalidDatum(String),
    #[error("lattice spacing h = {h} leaves fewer than 2 points per axis inside the support (min radius {r_min}); decrease h below {r_min}")]
    LatticeTooCoarse { h: f64, r_min: f64 },
    #[error("invalid lattice spacing h = {0}; h must be positive and finite")]
    InvalidSpacing(f64),
    #[error("invalid L^p exponent p = {0}; p must satisfy 1 <= p <= infinity")]
    InvalidExponent(f64),
    #[error("inconsistent ensemble: {0}")]
    BadEnsemble(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of the quartic-bump initial datum.
///
/// `amplitude` may be zero (vacuum: the sampled ensemble is empty and every
/// diagnostic vanishes); radii must be positive and finite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialDatum {
    pub amplitude: f64,
    pub r_x: f64,
    pub r_v: f64,
}

impl InitialDatum {
    pub fn new(amplitude: f64, r_x: f64, r_v: f64) -> Result<Self, PhaseSpaceError> {
        if !amplitude.is_finite() || amplitude < 0.0 {
            return Err(PhaseSpaceError::InvalidDatum(format!(
                "amplitude must be finite and nonnegative, got {amplitude}"
            )));
        }
        if !r_x.is_finite() || r_x <= 0.0 || !r_v.is_finite() || r_v <= 0.0 {
            return Err(PhaseSpaceError::InvalidDatum(format!(
                "support radii must be finite and positive, got r_x = {r_x}, r_v = {r_v}"
            )));
        }
        Ok(InitialDatum {
            amplitude,
            r_x,
            r_v,
        })
    }
}

/// A point of phase space: spatial position `x` and velocity `v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec3,
    pub v: Vec3,
}

impl PhasePoint {
    pub fn new(x: Vec3, v: Vec3) -> Self {
        PhasePoint { x, v }
    }

    /// Euclidean norm of the 6-vector (x, v).
    pub fn phase_norm(&self) -> f64 {
        (crate::math::dot3(self.x, self.x) + crate::math::dot3(self.v, self.v)).sqrt()
    }
}

/// Marker ensemble: immutable origins (the sampling lattice), current
/// positions (transported by the flow), immutable values `f0(origin)`, and
/// the shared lattice quadrature weight `h⁶`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub origins: Vec<PhasePoint>,
    pub positions: Vec<PhasePoint>,
    pub values: Vec<f64>,
    pub weight: f64,
}

impl ParticleEnsemble {
    /// Build an ensemble from explicit markers (positions start at the
    /// origins). Validates lengths, weight, and value nonnegativity.
    pub fn new(
        origins: Vec<PhasePoint>,
        values: Vec<f64>,
        weight: f64,
    ) -> Result<Self, PhaseSpaceError> {
        if origins.len() != values.len() {
            return Err(PhaseSpaceError::BadEnsemble(format!(
                "{} origins vs {} values",
                origins.len(),
                values.len()
            )));
        }
        if !weight.is_finite() || weight <= 0.0 {
            return Err(PhaseSpaceError::BadEnsemble(format!(
                "weight must be finite and positive, got {weight}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(PhaseSpaceError::BadEnsemble(format!(
                "marker values must be finite and nonnegative, got {bad}"
            )));
        }
        Ok(ParticleEnsemble {
            positions: origins.clone(),
            origins,
            values,
            weight,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Running support radii: maxima over the history of max |v|, max |x| and
/// max |(x, v)| over markers with positive value. All three are
/// non-decreasing along a run by construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportRadii {
    /// max |v| (speed bound of the transported support)
    pub speed: f64,
    /// max |x| (spatial radius of the transported support)
    pub radius: f64,
    /// max |(x, v)| (phase-space radius of the transported support)
    pub phase_radius: f64,
}

/// Evaluate the initial datum at a phase point. Total on all of phase space;
/// exactly zero on and outside the support boundary.
pub fn eval_initial_datum(datum: &InitialDatum, x: Vec3, v: Vec3) -> f64 {
    let fx = 1.0 - crate::math::dot3(x, x) / (datum.r_x * datum.r_x);
    let fv = 1.0 - crate::math::dot3(v, v) / (datum.r_v * datum.r_v);
    if fx <= 0.0 || fv <= 0.0 {
        return 0.0;
    }
    let fx2 = fx * fx;
    let fv2 = fv * fv;
    datum.amplitude * (fx2 * fx2) * (fv2 * fv2)
}

/// Lattice sites `k·h` with `|k·h| < r` per axis (k integer), i.e. the open
/// 1D section of the support. Returns the largest admissible |k|.
fn max_lattice_index(r: f64, h: f64) -> i64 {
    // Largest k with k·h < r; guard against k·h == r under exact division.
    let mut k = (r / h).ceil() as i64 - 1;
    while (k as f64) * h >= r {
        k -= 1;
    }
    while ((k + 1) as f64) * h < r {
        k += 1;
    }
    k.max(0)
}

/// Sample the marker ensemble for a datum on the integer lattice of spacing
/// `h`. Rejects nonpositive `h` and lattices so coarse that fewer than two
/// sites per axis fall strictly inside the support.
pub fn sample_ensemble(
    datum: &InitialDatum,
    h: f64,
) -> Result<ParticleEnsemble, PhaseSpaceError> {
    if !h.is_finite() || h <= 0.0 {
        return Err(PhaseSpaceError::InvalidSpacing(h));
    }
    let r_min = datum.r_x.min(datum.r_v);
    let kx = max_lattice_index(datum.r_x, h);
    let kv = max_lattice_index(datum.r_v, h);
    // Fewer than 2 sites per axis ⇔ only k = 0 lies strictly inside.
    if kx < 1 || kv < 1 {
        return Err(PhaseSpaceError::LatticeTooCoarse { h, r_min });
    }

    let ball_sites = |k_max: i64, r: f64| -> Vec<Vec3> {
        let mut sites = Vec::new();
        let r2 = r * r;
        for i in -k_max..=k_max {
            for j in -k_max..=k_max {
                for k in -k_max..=k_max {
                    let p = [i as f64 * h, j as f64 * h, k as f64 * h];
                    if crate::math::dot3(p, p) < r2 {
                        sites.push(p);
                    }
                }
            }
        }
        sites
    };
    let x_sites = ball_sites(kx, datum.r_x);
    let v_sites = ball_sites(kv, datum.r_v);

    let mut origins = Vec::new();
    let mut values = Vec::new();
    if datum.amplitude > 0.0 {
        origins.reserve(x_sites.len() * v_sites.len());
        values.reserve(x_sites.len() * v_sites.len());
        for &x in &x_sites {
            for &v in &v_sites {
                let value = eval_initial_datum(datum, x, v);
                if value > 0.0 {
                    origins.push(PhasePoint::new(x, v));
                    values.push(value);
                }
            }
        }
    }
    let weight = h.powi(6);
    Ok(ParticleEnsemble {
        positions: origins.clone(),
        origins,
        values,
        weight,
    })
}

/// Discrete L^p norm of the ensemble, `p ∈ [1, ∞]` (`f64::INFINITY` for the
/// sup norm). Depends only on marker values and the lattice weight, never on
/// positions, so it is exactly transport-invariant.
pub fn lp_norm(ensemble: &ParticleEnsemble, p: f64) -> Result<f64, PhaseSpaceError> {
    if p.is_nan() || p < 1.0 {
        return Err(PhaseSpaceError::InvalidExponent(p));
    }
    if ensemble.is_empty() {
        return Ok(0.0);
    }
    if p.is_infinite() {
        return Ok(ensemble.values.iter().cloned().fold(0.0, f64::max));
    }
    let mut sum = 0.0;
    if p == 1.0 {
        for &v in &ensemble.values {
            sum += v;
        }
    } else {
        for &v in &ensemble.values {
            sum += v.powf(p);
        }
    }
    Ok((sum * ensemble.weight).powf(1.0 / p))
}

/// Update running support radii from the current marker positions. Markers
/// with value zero are not part of the support and are ignored. The returned
/// radii dominate `history` componentwise (monotone by construction).
pub fn support_radii(ensemble: &ParticleEnsemble, history: &SupportRadii) -> SupportRadii {
    let mut out = *history;
    for (point, &value) in ensemble.positions.iter().zip(&ensemble.values) {
        if value <= 0.0 {
            continue;
        }
        let speed = crate::math::norm3(point.v);
        let radius = crate::math::norm3(point.x);
        if speed > out.speed {
            out.speed = speed;
        }
        if radius > out.radius {
            out.radius = radius;
        }
        let phase = point.phase_norm();
        if phase > out.phase_radius {
            out.phase_radius = phase;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoint format: plain text, one marker per row, full-precision floats
// (shortest round-trip decimal, so read(write(e)) == e bit-for-bit).
// ---------------------------------------------------------------------------

/// Metadata carried by an ensemble checkpoint file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub t: f64,
    pub h: f64,
    pub datum: InitialDatum,
}

/// Write an ensemble checkpoint. Columns: origin (x, v), current (x, v),
/// value. The header records the lattice spacing and datum parameters so the
/// file is self-contained.
pub fn write_checkpoint<W: Write>(
    out: &mut W,
    ensemble: &ParticleEnsemble,
    meta: &CheckpointMeta,
) -> Result<(), PhaseSpaceError> {
    writeln!(out, "# ensemble-checkpoint v1")?;
    writeln!(out, "# t = {}", meta.t)?;
    writeln!(out, "# h = {}", meta.h)?;
    writeln!(out, "# amplitude = {}", meta.datum.amplitude)?;
    writeln!(out, "# r_x = {}", meta.datum.r_x)?;
    writeln!(out, "# r_v = {}", meta.datum.r_v)?;
    writeln!(out, "# weight = {}", ensemble.weight)?;
    writeln!(
        out,
        "# columns: ox oy oz ovx ovy ovz x y z vx vy vz value"
    )?;
    for i in 0..ensemble.len() {
        let o = ensemble.origins[i];
        let p = ensemble.positions[i];
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {}",
            o.x[0],
            o.x[1],
            o.x[2],
            o.v[0],
            o.v[1],
            o.v[2],
            p.x[0],
            p.x[1],
            p.x[2],
            p.v[0],
            p.v[1],
            p.v[2],
            ensemble.values[i]
        )?;
    }
    Ok(())
}

/// Read an ensemble checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: BufRead>(
    input: R,
) -> Result<(ParticleEnsemble, CheckpointMeta), PhaseSpaceError> {
    let mut header: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    let mut origins = Vec::new();
    let mut positions = Vec::new();
    let mut values = Vec::new();
    let mut saw_magic = false;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if rest == "ensemble-checkpoint v1" {
                saw_magic = true;
            } else if let Some((key, value)) = rest.split_once('=') {
                let key = key.trim();
                if key != "columns" {
                    let parsed: f64 = value.trim().parse().map_err(|_| {
                        PhaseSpaceError::CheckpointFormat(format!(
                            "bad header value for {key}: {value}"
                        ))
                    })?;
                    header.insert(key.to_string(), parsed);
                }
            }
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    PhaseSpaceError::CheckpointFormat(format!("bad marker field: {tok}"))
                })
            })
            .collect::<Result<_, _>>()?;
        if fields.len() != 13 {
            return Err(PhaseSpaceError::CheckpointFormat(format!(
                "expected 13 columns per marker row, got {}",
                fields.len()
            )));
        }
        origins.push(PhasePoint::new(
            [fields[0], fields[1], fields[2]],
            [fields[3], fields[4], fields[5]],
        ));
        positions.push(PhasePoint::new(
            [fields[6], fields[7], fields[8]],
            [fields[9], fields[10], fields[11]],
        ));
        values.push(fields[12]);
    }
    if !saw_magic {
        return Err(PhaseSpaceError::CheckpointFormat(
            "missing 'ensemble-checkpoint v1' header".into(),
        ));
    }
    let need = |key: &str| -> Result<f64, PhaseSpaceError> {
        header
            .get(key)
            .copied()
            .ok_or_else(|| PhaseSpaceError::CheckpointFormat(format!("missing header key {key}")))
    };
    let meta = CheckpointMeta {
        t: need("t")?,
        h: need("h")?,
        datum: InitialDatum::new(need("amplitude")?, need("r_x")?, need("r_v")?)?,
    };
    let weight = need("weight")?;
    if !weight.is_finite() || weight <= 0.0 {
        return Err(PhaseSpaceError::CheckpointFormat(format!(
            "bad weight {weight}"
        )));
    }
    let mut ensemble = ParticleEnsemble::new(origins, values, weight)?;
    ensemble.positions = positions;
    Ok((ensemble, meta))
}
