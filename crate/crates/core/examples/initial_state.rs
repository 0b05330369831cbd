//! Sample the initial phase-space state on marker lattices of decreasing
//! spacing and print how the discrete integral norms settle while the sup
//! norm and support radii stay exact.
//!
//! Usage: `cargo run --example initial_state -- [amplitude] [r_x] [r_v]`

use vlasov_control::phase_space::{lp_norm, sample_ensemble, InitialDatum, SupportRadii};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, default: f64| -> f64 {
        args.get(i).map(|s| s.parse().expect("numeric arg")).unwrap_or(default)
    };
    let datum = InitialDatum::new(get(1, 1.0), get(2, 1.0), get(3, 1.0)).expect("datum");
    println!(
        "smooth bump datum: amplitude {}, position radius {}, velocity radius {}",
        datum.amplitude, datum.r_x, datum.r_v
    );
    println!();
    println!("{:>6} {:>9} {:>13} {:>13} {:>13} {:>8} {:>8}", "h", "markers", "L1", "L2", "Linf", "max|x|", "max|v|");

    for h in [0.5, 0.35, 0.25, 0.18, 0.125] {
        let ensemble = sample_ensemble(&datum, h).expect("lattice sample");
        let radii = vlasov_control::phase_space::support_radii(&ensemble, &SupportRadii::default());
        println!(
            "{:>6} {:>9} {:>13.6e} {:>13.6e} {:>13.6e} {:>8.4} {:>8.4}",
            h,
            ensemble.len(),
            lp_norm(&ensemble, 1.0).unwrap(),
            lp_norm(&ensemble, 2.0).unwrap(),
            lp_norm(&ensemble, f64::INFINITY).unwrap(),
            radii.radius,
            radii.speed,
        );
    }

    println!();
    println!(
        "the sup norm equals the amplitude exactly (the lattice contains the origin),\n\
         the L1/L2 columns converge as the spacing shrinks, and every marker stays\n\
         strictly inside the stated support radii."
    );
}
