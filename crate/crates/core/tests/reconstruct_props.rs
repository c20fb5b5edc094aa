use proptest::prelude::*;
use uvt_core::phantom::head_phantom;
use uvt_core::pose_init::{angle_grid, shift_grid};
use uvt_core::radon::{radon_forward, shift_projection};
use uvt_core::reconstruct::*;
use uvt_core::{detector_len, Image, PoseEstimate, Projection};

fn small_problem(seed: u64) -> (Image, Vec<PoseEstimate>, Vec<Projection>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let side = 8;
    let img = Image::new(side, (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let poses: Vec<PoseEstimate> = (0..4)
        .map(|_| PoseEstimate::new(rng.random_range(0.0..3.1), rng.random_range(-1.5..1.5)))
        .collect();
    let len = detector_len(side);
    let proj = (0..4)
        .map(|_| Projection::new((0..len).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
        .collect();
    (img, poses, proj)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..1000) {
        let (img, poses, proj) = small_problem(seed);
        let g = data_energy_gradient(&img, &poses, &proj).unwrap();
        let h = 1e-4;
        for p in [0usize, 9, 27, 36, 63] {
            let mut plus = img.clone();
            plus.pixels_mut()[p] += h;
            let mut minus = img.clone();
            minus.pixels_mut()[p] -= h;
            let fd = (data_energy(&plus, &poses, &proj).unwrap() - data_energy(&minus, &poses, &proj).unwrap()) / (2.0 * h);
            let an = g.pixels()[p];
            prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "pixel {p}: {fd} vs {an}");
        }
    }

    #[test]
    fn refined_pose_is_grid_optimal(seed in 0u64..1000) {
        let (img, poses, _) = small_problem(seed);
        let target = shift_projection(&radon_forward(&img, poses[0].angle), poses[0].shift);
        let grid = PoseGrid { angle_step: 5.0, shift_bound: 1.5, shift_step: 0.5 };
        let best = refine_pose(&img, &target, &grid);
        let residual = |a: f64, s: f64| shift_projection(&target, -s).sq_dist(&radon_forward(&img, a));
        let r = residual(best.angle, best.shift);
        for a in angle_grid(grid.angle_step) {
            for s in shift_grid(grid.shift_bound, grid.shift_step) {
                prop_assert!(residual(a, s) >= r);
            }
        }
    }

    #[test]
    fn l1_solution_meets_subgradient_conditions(seed in 0u64..1000, lam in 0.5f64..20.0) {
        let (_, poses, proj) = small_problem(seed);
        let problem = SparseProblem::new(&proj, &poses, 8, lam).unwrap();
        let lip = problem.lipschitz(50).unwrap();
        let sol = solve_l1(&problem, vec![0.0; 64], lip, 20000, 1e-13).unwrap();
        let g = problem.smooth_gradient(&sol.beta).unwrap();
        let slack = 1e-4 * lam;
        for (b, gi) in sol.beta.iter().zip(&g) {
            if *b == 0.0 {
                prop_assert!(gi.abs() <= lam + slack, "zero coefficient with |grad| {} > {lam}", gi.abs());
            } else {
                prop_assert!((gi + lam * b.signum()).abs() <= slack, "active coefficient: grad {gi}, beta {b}");
            }
        }
    }
}

#[test]
fn huge_lambda_gives_zero_image() {
    let (_, poses, proj) = small_problem(1);
    let cfg = SparseReconConfig {
        lambda_rel: 2.0,
        outer_iters: 1,
        ..Default::default()
    };
    let r = reconstruct_sparse_baseline(&proj, &poses, 8, &cfg).unwrap();
    assert!(r.image.pixels().iter().all(|&v| v == 0.0));
}

fn phantom_centers(side: usize, n: usize) -> (Vec<PoseEstimate>, Vec<Projection>) {
    let z = head_phantom(side);
    let truth: Vec<PoseEstimate> = (0..n).map(|i| PoseEstimate::from_degrees(i as f64 * 180.0 / n as f64, 0.0)).collect();
    let proj = truth.iter().map(|p| radon_forward(&z, p.angle)).collect();
    (truth, proj)
}

#[test]
fn alternating_returns_its_best_iterate_and_is_deterministic() {
    let (truth, proj) = phantom_centers(32, 30);
    let init: Vec<PoseEstimate> = truth
        .iter()
        .enumerate()
        .map(|(i, p)| PoseEstimate::from_degrees(p.angle_degrees() + if i % 2 == 0 { 2.0 } else { -2.0 }, 0.0))
        .collect();
    let cfg = ReconConfig {
        max_outer_iters: 15,
        ..Default::default()
    };
    let a = reconstruct_alternating(&proj, &init, 32, &cfg).unwrap();
    let b = reconstruct_alternating(&proj, &init, 32, &cfg).unwrap();
    assert_eq!(a.energy_trace, b.energy_trace);
    assert_eq!(a.image, b.image);
    let best = a.energy_trace[a.best_iteration];
    assert!(best <= a.energy_trace[0]);
    assert!(a.energy_trace.iter().all(|&e| e >= best));
    let e = data_energy(&a.image, &a.poses, &proj).unwrap();
    assert!((e - best).abs() <= 1e-9 * best.max(1.0), "{e} vs {best}");
}

#[test]
fn sparse_baseline_is_accurate_at_true_poses() {
    let (truth, proj) = phantom_centers(32, 60);
    let cfg = SparseReconConfig {
        outer_iters: 1,
        ..Default::default()
    };
    let r = reconstruct_sparse_baseline(&proj, &truth, 32, &cfg).unwrap();
    let z = head_phantom(32);
    let rmse = uvt_core::eval::register_and_rmse(&z, &r.image).unwrap().rmse;
    assert!(rmse < 0.05, "rmse {rmse}");
}
