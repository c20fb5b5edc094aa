use proptest::prelude::*;
use std::f64::consts::PI;
use uvt_core::eval::register_and_rmse;
use uvt_core::phantom::head_phantom;
use uvt_core::radon::{fbp_reconstruct, radon_adjoint, radon_forward, FbpFilter};
use uvt_core::{detector_len, Image, PoseEstimate, Projection};

fn image_strategy(side: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(-1.0f64..1.0, side * side).prop_map(move |p| Image::new(side, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity(
        x in image_strategy(17),
        y in prop::collection::vec(-1.0f64..1.0, detector_len(17)),
        angles in prop::collection::vec(0.0f64..2.0 * PI, 20),
    ) {
        let y = Projection::new(y).unwrap();
        for a in angles {
            let rx = radon_forward(&x, a);
            let rty = radon_adjoint(&y, a, 17).unwrap();
            let lhs: f64 = rx.bins().iter().zip(y.bins()).map(|(p, q)| p * q).sum();
            let rhs = x.dot(&rty);
            let scale = x.norm() * y.bins().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((lhs - rhs).abs() / scale < 1e-10, "angle {a}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn mass_is_conserved(x in image_strategy(16).prop_map(|i| {
        let p = i.pixels().iter().map(|v| v.abs()).collect();
        Image::new(16, p).unwrap()
    }), angle in 0.0f64..2.0 * PI) {
        let p = radon_forward(&x, angle);
        let abs: f64 = x.pixels().iter().map(|v| v.abs()).sum();
        prop_assume!(abs > 0.0);
        prop_assert!((p.sum() - x.sum()).abs() / abs < 1e-3, "{} vs {}", p.sum(), x.sum());
    }

    #[test]
    fn half_turn_reverses_bins(angle in 0.0f64..PI) {
        let z = head_phantom(32);
        let a = radon_forward(&z, angle + PI);
        let b = radon_forward(&z, angle).reversed();
        let peak = b.bins().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let worst = a.bins().iter().zip(b.bins()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        prop_assert!(worst <= 1e-2 * peak, "worst {worst} peak {peak}");
    }

    #[test]
    fn forward_is_linear(x in image_strategy(12), y in image_strategy(12), a in -3.0f64..3.0, b in -3.0f64..3.0, angle in 0.0f64..2.0 * PI) {
        let lhs = radon_forward(&x.combine(a, &y, b), angle);
        let px = radon_forward(&x, angle);
        let py = radon_forward(&y, angle);
        for ((l, u), v) in lhs.bins().iter().zip(px.bins()).zip(py.bins()) {
            prop_assert!((l - (a * u + b * v)).abs() <= 1e-12 * (1.0 + l.abs()));
        }
    }
}

#[test]
fn dense_fbp_recovers_phantom() {
    let z = head_phantom(64);
    let poses: Vec<PoseEstimate> = (0..180).map(|i| PoseEstimate::from_degrees(i as f64, 0.0)).collect();
    let proj: Vec<Projection> = poses.iter().map(|p| radon_forward(&z, p.angle)).collect();
    let rec = fbp_reconstruct(&proj, &poses, 64, FbpFilter::RamLak).unwrap();
    let r = register_and_rmse(&z, &rec).unwrap();
    assert!(r.rmse < 0.10, "rmse {}", r.rmse);
}
