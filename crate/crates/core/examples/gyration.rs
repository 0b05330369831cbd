//! Integrate a single charge gyrating in a uniform magnetic field and
//! compare against the exact circular orbit: the pusher conserves speed to
//! roundoff at any step size, while the position error and the
//! forward/backward round-trip defect fall off second order in dt.
//!
//! Usage: `cargo run --example gyration -- [b] [t_final]`

use vlasov_control::characteristics::{integrate_flow, ForceContext, UniformField, ZeroField};
use vlasov_control::math;
use vlasov_control::phase_space::PhasePoint;

/// Exact orbit in B = (0, 0, b): velocities rotate at rate b about the z
/// axis and positions trace the corresponding circle.
fn exact(start: PhasePoint, b: f64, t: f64) -> PhasePoint {
    let (s, c) = (b * t).sin_cos();
    let [vx, vy, vz] = start.v;
    let v = [vx * c + vy * s, -vx * s + vy * c, vz];
    let x = [
        start.x[0] + (vx * s + vy * (1.0 - c)) / b,
        start.x[1] + (-vx * (1.0 - c) + vy * s) / b,
        start.x[2] + vz * t,
    ];
    PhasePoint::new(x, v)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, default: f64| -> f64 {
        args.get(i).map(|s| s.parse().expect("numeric arg")).unwrap_or(default)
    };
    let b = get(1, 2.0);
    let t_final = get(2, 3.0);

    let magnetic = UniformField([0.0, 0.0, b]);
    let forces = ForceContext {
        electric: &ZeroField,
        magnetic: &magnetic,
    };
    let start = PhasePoint::new([0.3, -0.2, 0.1], [0.8, 0.5, 0.2]);
    let reference = exact(start, b, t_final);
    let speed0 = math::norm3(start.v);

    println!(
        "gyration at rate {b} for t = {t_final} ({:.2} turns), start speed {speed0:.6}",
        b * t_final / (2.0 * std::f64::consts::PI)
    );
    println!();
    println!(
        "{:>8} {:>14} {:>14} {:>14}",
        "dt", "pos error", "speed drift", "round trip"
    );
    for dt in [0.08, 0.04, 0.02, 0.01, 0.005] {
        let end = integrate_flow(start, 0.0, t_final, dt, &forces).expect("forward");
        let back = integrate_flow(end, t_final, 0.0, dt / 2.0, &forces).expect("backward");
        let pos_err = math::norm3(math::sub3(end.x, reference.x));
        let speed_drift = (math::norm3(end.v) - speed0).abs();
        let dx = math::sub3(back.x, start.x);
        let dv = math::sub3(back.v, start.v);
        let round_trip = (math::dot3(dx, dx) + math::dot3(dv, dv)).sqrt();
        println!("{dt:>8} {pos_err:>14.4e} {speed_drift:>14.4e} {round_trip:>14.4e}");
    }
    println!();
    println!(
        "halving dt divides the position error and the round-trip defect by ~4\n\
         (second order), while the speed column stays at roundoff: the magnetic\n\
         kick is implemented as an exact rotation of the velocity."
    );
}
