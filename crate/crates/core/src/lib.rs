//! Deterministic particle-mesh simulation of the 3D Vlasov–Poisson system
//! under an external magnetic control field, plus a projected-descent
//! optimizer for tracking-type costs over a norm-bounded class of fields.
//!
//! The plasma phase-space density f(t, x, v) obeys
//!
//! ```text
//!   ∂_t f + v·∂_x f + (F + v × B)·∂_v f = 0,      F = -∂_x ψ,
//!   -Δψ = 4π ρ,   ρ(t, x) = ∫ f(t, x, v) dv,      ψ → 0 at infinity,
//! ```
//!
//! where B(t, x) is a prescribed magnetic field drawn from a smooth,
//! norm-bounded admissible class. The solver transports markers along the
//! characteristics of this system with a volume-preserving, speed-exact
//! Boris-type splitting, closes the loop through a free-space Poisson solve
//! on a cartesian grid, and exposes the structural invariants of the
//! continuous problem (measure preservation, L^p and energy conservation,
//! support confinement, Lipschitz dependence of the state on the field) as
//! executable diagnostics.
//!
//! Module map:
//!
//! * [`phase_space`] — initial datum, marker ensembles, L^p norms, support radii
//! * [`fields`] — magnetic field class, quadrature norms, ball projection
//! * [`poisson`] — charge deposition, free-space Poisson solve, interpolation
//! * [`characteristics`] — Boris pusher, flow integration, flow Jacobians
//! * [`vlasov`] — self-consistent runs, backward state evaluation, diagnostics, probes
//! * [`control`] — target snapshots, tracking cost, gradient estimates, projected descent
//! * [`cli`] — run-configuration files and the `vpctl` command front end
//!
//! Every public operation is deterministic: fixed summation order, seeded
//! generators, no time-dependent metadata. Identical inputs produce
//! byte-identical outputs, including exported CSV/JSON artifacts.
//!
//! Runnable walkthroughs live in `examples/` (one per capability); start
//! with `cargo run --release --example free_run`.

pub mod characteristics;
pub mod cli;
pub mod control;
pub mod fields;
pub mod math;
pub mod phase_space;
pub mod poisson;
pub mod vlasov;

pub use characteristics::{flow_jacobian_det, integrate_flow, push_step, ForceContext};
pub use cli::{run, RunConfig};
pub use control::{cost, export_trace, grad_estimate, make_target, optimize, trace_csv};
pub use fields::{dx_b_l2_sq, eval_field, eval_field_jacobian, project_to_ball, vnorm};
pub use phase_space::{eval_initial_datum, lp_norm, sample_ensemble, support_radii};
pub use poisson::{deposit_charge, electric_field, interpolate_field, solve_potential};
pub use vlasov::{eval_f, export_record, lipschitz_probe, simulate, total_energy};
