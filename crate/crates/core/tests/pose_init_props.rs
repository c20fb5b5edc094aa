use proptest::prelude::*;
use std::f64::consts::PI;
use uvt_core::eval::align_poses;
use uvt_core::phantom::{head_phantom, head_phantom_rotated};
use uvt_core::pose_init::{image_moments, projection_moment, solve_poses, MomentFrame, PoseInitConfig};
use uvt_core::radon::radon_forward;
use uvt_core::{PoseEstimate, Projection};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn noiseless_projections_satisfy_moment_identity(angle in 0.0f64..PI) {
        let z = head_phantom(64);
        let v = image_moments(&z, 3);
        let frame = MomentFrame::new(64);
        let p = radon_forward(&z, angle);
        for n in 0..=3 {
            let r = projection_moment(&p, n, 0.0, frame) - v.predict(n, angle);
            prop_assert!(r.abs() < 1e-3, "order {n}: residual {r}");
        }
    }

    #[test]
    fn global_rotation_leaves_projection_set_invariant(delta in -90.0f64..90.0, angle in 0.0f64..PI) {
        let z = head_phantom(64);
        let turned = head_phantom_rotated(64, delta);
        let a = radon_forward(&z, angle);
        let b = radon_forward(&turned, angle + delta.to_radians());
        let peak = a.bins().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = (a.sq_dist(&b) / a.len() as f64).sqrt();
        prop_assert!(err < 0.04 * peak, "err {err} peak {peak}");
    }
}

#[test]
fn noiseless_poses_are_recovered_up_to_gauge() {
    let z = head_phantom(64);
    let truth: Vec<PoseEstimate> = (0..40).map(|i| PoseEstimate::from_degrees(i as f64 * 4.5 + 1.0, 0.0)).collect();
    let proj: Vec<Projection> = truth.iter().map(|p| radon_forward(&z, p.angle)).collect();
    let sol = solve_poses(&proj, 64, &PoseInitConfig::default()).unwrap();
    let a = align_poses(&truth, &sol.poses).unwrap();
    assert!(a.median_angle_error() < 2.0, "median error {}", a.median_angle_error());
}
