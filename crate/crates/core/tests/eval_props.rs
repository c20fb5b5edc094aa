use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uvt_core::eval::{register_and_rmse, rotate_image};
use uvt_core::phantom::head_phantom;
use uvt_core::Image;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn registration_absorbs_rotation(delta in -180.0f64..180.0) {
        let z = head_phantom(48);
        let turned = rotate_image(&z, delta.to_radians());
        let r = register_and_rmse(&z, &turned).unwrap();
        prop_assert!(r.rmse <= 0.03, "delta {delta}: rmse {}", r.rmse);
    }
}

#[test]
fn rmse_grows_with_noise() {
    let z = head_phantom(48);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pattern: Vec<f64> = (0..48 * 48).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = -1.0;
    for level in [0.02, 0.05, 0.1, 0.2, 0.4] {
        let noisy = Image::new(48, z.pixels().iter().zip(&pattern).map(|(v, n)| v + level * n).collect()).unwrap();
        let r = register_and_rmse(&z, &noisy).unwrap().rmse;
        assert!(r > last, "level {level}: {r} <= {last}");
        last = r;
    }
}
