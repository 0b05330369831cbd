//! Build an admissible magnetic field from envelope-damped trigonometric
//! modes with piecewise-linear time profiles, evaluate it, compute its
//! quadrature norms, and show how an out-of-ball coefficient vector gets
//! radially projected back to the admissible set.
//!
//! Usage: `cargo run --example field_shapes -- [scale]`
//! (`scale` multiplies the demo coefficients; the default 1 lands just
//! outside the admissible ball and triggers projection, 0.5 stays inside.)

use vlasov_control::fields::{
    eval_field, project_to_ball, vnorm, FieldParams, Mode, QuadratureSpec,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scale: f64 = args.get(1).map(|s| s.parse().expect("numeric arg")).unwrap_or(1.0);

    // Two modes: a spatially uniform envelope along z and an oscillatory
    // one along y; three time knots over [0, 1].
    let modes = vec![
        Mode { wave: [0.0, 0.0, 0.0], direction: [0.0, 0.0, 1.0] },
        Mode { wave: [0.8, 0.0, 0.0], direction: [0.0, 1.0, 0.0] },
    ];
    let theta: Vec<f64> = [0.4, 0.9, 0.2, -0.3, 0.5, 0.1]
        .iter()
        .map(|c| c * scale)
        .collect();
    let field = FieldParams::new(modes, theta, 3, 1.0, 2.0, 6.0, 5.0).expect("field");

    println!("field with {} modes, {} time knots, norm cap K = {}", field.modes.len(), field.n_time_knots, field.k_bound);
    println!();
    println!("{:>5} {:>24} {:>24}", "t", "B(t, 0)", "B(t, (1,0,0))");
    for k in 0..=4 {
        let t = 0.25 * k as f64;
        let b0 = eval_field(&field, t, [0.0, 0.0, 0.0]).unwrap();
        let b1 = eval_field(&field, t, [1.0, 0.0, 0.0]).unwrap();
        let fmt = |b: [f64; 3]| format!("[{:+.3}, {:+.3}, {:+.3}]", b[0], b[1], b[2]);
        println!("{:>5.2} {:>24} {:>24}", t, fmt(b0), fmt(b1));
    }

    let quad = QuadratureSpec::for_field(&field);
    let norms = vnorm(&field, &quad).expect("norms");
    println!();
    println!(
        "quadrature norms: spatial-derivative part {:.4}, time-profile part {:.4}, combined {:.4}",
        norms.w_norm, norms.h_norm, norms.v_norm
    );

    let projected = project_to_ball(&field).expect("projection");
    let projected_norms = vnorm(&projected, &quad).expect("projected norms");
    if norms.v_norm <= field.k_bound {
        println!(
            "inside the admissible ball (cap {}), projection is the identity: {}",
            field.k_bound,
            projected.theta == field.theta
        );
    } else {
        println!(
            "outside the admissible ball (cap {}): radial projection rescales the \
             coefficients so the combined norm becomes {:.6}",
            field.k_bound, projected_norms.v_norm
        );
    }
}
