//! Probe how strongly the transported state responds to changes of the
//! applied magnetic field: over a family of field pairs whose separation
//! halves step by step, the sup difference of the end states scales
//! linearly with the field distance (a Lipschitz-type response).
//!
//! Usage: `cargo run --example field_sensitivity -- [h] [dt] [grid_n]`

use vlasov_control::fields::{FieldParams, Mode};
use vlasov_control::phase_space::InitialDatum;
use vlasov_control::vlasov::{lipschitz_probe, NumericsConfig, ProbeConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, default: f64| -> f64 {
        args.get(i).map(|s| s.parse().expect("numeric arg")).unwrap_or(default)
    };
    let numerics = NumericsConfig {
        h: get(1, 0.5),
        dt: get(2, 0.02),
        grid_n: get(3, 16.0) as usize,
        ..NumericsConfig::default()
    };
    let datum = InitialDatum::new(1.0, 1.0, 1.0).expect("datum");

    let modes = vec![
        Mode { wave: [0.0, 0.0, 0.0], direction: [0.0, 0.0, 1.0] },
        Mode { wave: [0.8, 0.0, 0.0], direction: [0.0, 1.0, 0.0] },
    ];
    let base = FieldParams::random_in_ball(6, 0.5, modes.clone(), 3, 1.0, 2.0, 6.0, 5.0)
        .expect("base field");
    let direction = FieldParams::random_in_ball(7, 0.3, modes, 3, 1.0, 2.0, 6.0, 5.0)
        .expect("direction field");

    let family: Vec<(FieldParams, FieldParams)> = (0..5)
        .map(|k| {
            let eps = 0.5f64.powi(k);
            let mut shifted = base.clone();
            for (c, d) in shifted.theta.iter_mut().zip(&direction.theta) {
                *c += eps * d;
            }
            (shifted, base.clone())
        })
        .collect();

    println!(
        "state response to field changes at h {}, dt {}, grid {}^3:",
        numerics.h, numerics.dt, numerics.grid_n
    );
    let start = std::time::Instant::now();
    let report = lipschitz_probe(
        &datum,
        &family,
        &numerics,
        1.0,
        &ProbeConfig {
            fit_slopes: true,
            ..ProbeConfig::default()
        },
    )
    .expect("probe");
    println!();
    println!(
        "{:>14} {:>14} {:>12}",
        "field distance", "sup state diff", "ratio"
    );
    for pair in &report.pairs {
        println!(
            "{:>14.4e} {:>14.4e} {:>12.4e}",
            pair.w_dist, pair.sup_diff_f, pair.ratio
        );
    }
    println!();
    println!(
        "fitted log-log slope {:.4} (linear response has slope 1); worst ratio {:.4e}; wall {:.2?}",
        report.f_slope.expect("slope"),
        report.max_ratio,
        start.elapsed()
    );
}
