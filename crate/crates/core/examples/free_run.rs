//! Run the coupled system with no external field and print conservation
//! diagnostics: L^p norms (bit-constant), total energy drift, and the
//! support radii against their kinematic bound.
//!
//! Usage: `cargo run --example free_run -- [h] [dt] [grid_n] [t_final] [half_extent]`
//! (`half_extent` pins the mesh size; omit or pass 0 to auto-size it.)

use vlasov_control::phase_space::InitialDatum;
use vlasov_control::poisson::GridSpec;
use vlasov_control::vlasov::{simulate, NumericsConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, default: f64| -> f64 {
        args.get(i).map(|s| s.parse().expect("numeric arg")).unwrap_or(default)
    };
    let grid_n = get(3, 32.0) as usize;
    let half = get(5, 0.0);
    let numerics = NumericsConfig {
        h: get(1, 0.25),
        dt: get(2, 0.01),
        grid_n,
        field_stride: 0,
        grid_override: if half > 0.0 {
            Some(GridSpec::new([0.0; 3], half, grid_n).unwrap())
        } else {
            None
        },
        ..NumericsConfig::default()
    };
    let t_final = get(4, 1.0);
    let datum = InitialDatum::new(1.0, 1.0, 1.0).unwrap();

    let start = std::time::Instant::now();
    let record = simulate(&datum, None, &numerics, t_final).expect("simulation");
    let elapsed = start.elapsed();

    let first = &record.diagnostics[0];
    let last = record.diagnostics.last().unwrap();
    let drift = record
        .diagnostics
        .iter()
        .map(|r| ((r.total_energy - first.total_energy) / first.total_energy).abs())
        .fold(0.0f64, f64::max);

    println!(
        "markers {}   grid {}^3 (half-extent {:.3})   steps {} @ dt {:.4}   wall {:.2?}",
        record.ensemble.len(),
        record.grid.n,
        record.grid.half_extent,
        record.n_steps,
        record.dt,
        elapsed
    );
    println!(
        "L1 {:.6e}  L2 {:.6e}  Linf {:.6e}  (identical in every row: {})",
        last.l1,
        last.l2,
        last.linf,
        record
            .diagnostics
            .iter()
            .all(|r| r.l1.to_bits() == first.l1.to_bits())
    );
    println!(
        "energy start {:.6e} (kin {:.3e} + field {:.3e})  end {:.6e}  max |drift| {:.3e}",
        first.total_energy, first.kinetic, first.field_energy, last.total_energy, drift
    );
    let bound = record.initial_radii.radius
        + t_final * record.final_radii.speed;
    println!(
        "support: speed {:.4} -> {:.4}   radius {:.4} -> {:.4}   kinematic bound {:.4} ({})",
        record.initial_radii.speed,
        record.final_radii.speed,
        record.initial_radii.radius,
        record.final_radii.radius,
        bound,
        if record.final_radii.radius <= bound + 1e-9 {
            "respected"
        } else {
            "VIOLATED"
        }
    );
}
