use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use topoloc::fine::{
    pnp_minimal, pnp_ransac, refine_lm, reprojection_residual, Correspondence, PnPError, PnPParams,
};
use topoloc::geometry::{rotation_distance, translation_distance, CameraIntrinsics, Pixel, Pose};

fn scene(seed: u64, n: usize, noise_px: f64) -> (Pose, Vec<Correspondence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = CameraIntrinsics::default();
    let q = nalgebra::UnitQuaternion::from_euler_angles(
        rng.random_range(-0.5..0.5),
        rng.random_range(-3.0..3.0),
        rng.random_range(-0.5..0.5),
    );
    let truth = Pose::new(q, Vector3::new(rng.random_range(-3.0..3.0), 0.0, rng.random_range(-3.0..3.0)));
    let noise = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let corr = (0..n)
        .map(|_| {
            let px = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let landmark = truth.transform_point(&k.backproject(&px, rng.random_range(3.0..25.0)));
            let mut obs = px;
            if noise_px > 0.0 {
                obs.u += noise.sample(&mut rng);
                obs.v += noise.sample(&mut rng);
            }
            Correspondence::new(landmark, obs)
        })
        .collect();
    (truth, corr)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_minimal_solution_is_exact(seed: u64) {
        let (truth, corr) = scene(seed, 6, 0.0);
        let pose = pnp_minimal(&corr, &CameraIntrinsics::default()).unwrap();
        prop_assert!(translation_distance(&pose, &truth) < 1e-6);
        prop_assert!(rotation_distance(&pose, &truth) < 1e-6);
    }

    #[test]
    fn lm_never_increases_cost(seed: u64, n in 6usize..80, noise in 0.0..3.0f64, kick in 0.0..0.2f64) {
        let (truth, corr) = scene(seed, n, noise);
        let k = CameraIntrinsics::default();
        let start = truth.compose(&Pose::identity().retract_left(
            &Vector3::new(kick, -kick, 0.5 * kick),
            &Vector3::new(kick, 2.0 * kick, -kick),
        ));
        let report = refine_lm(&start, &corr, &k, &PnPParams::default()).unwrap();
        prop_assert!(report.cost_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(report.final_cost() <= report.initial_cost());
    }

    #[test]
    fn ransac_is_deterministic_per_seed(seed: u64) {
        let (_, mut corr) = scene(seed, 60, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for c in corr.iter_mut().take(20) {
            c.observation = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let k = CameraIntrinsics::default();
        let a = pnp_ransac(&corr, &k, &PnPParams::default(), 7);
        let b = pnp_ransac(&corr, &k, &PnPParams::default(), 7);
        prop_assert_eq!(a, b);
    }
}

#[test]
fn noisy_points_refine_close_to_truth() {
    let k = CameraIntrinsics::default();
    for seed in 0..10 {
        let (truth, corr) = scene(seed, 150, 0.5);
        let res = pnp_ransac(&corr, &k, &PnPParams::default(), seed).unwrap();
        assert!(translation_distance(&res.node_from_camera, &truth) < 0.05, "{seed}");
        assert!(rotation_distance(&res.node_from_camera, &truth).to_degrees() < 0.2, "{seed}");
        assert!(res.mean_reprojection_error < 1.5);
        let camera_from_node = res.node_from_camera.inverse();
        for &i in &res.inlier_indices {
            let r = reprojection_residual(&camera_from_node, &corr[i], &k).unwrap();
            assert!(r.norm() < PnPParams::default().inlier_threshold);
        }
    }
}

#[test]
fn too_few_or_degenerate_points_are_errors() {
    let k = CameraIntrinsics::default();
    let (_, corr) = scene(1, 5, 0.0);
    assert!(matches!(
        pnp_ransac(&corr, &k, &PnPParams::default(), 0),
        Err(PnPError::TooFewCorrespondences { found: 5, required: 6 })
    ));
    let same = vec![corr[0]; 12];
    assert!(pnp_ransac(&same, &k, &PnPParams::default(), 0).is_err());
    let bad = PnPParams {
        confidence: 1.0,
        ..PnPParams::default()
    };
    let (_, corr) = scene(2, 20, 0.0);
    assert!(matches!(pnp_ransac(&corr, &k, &bad, 0), Err(PnPError::InvalidParams(_))));
}

#[test]
fn pure_outliers_do_not_produce_a_pose() {
    let k = CameraIntrinsics::default();
    let (_, mut corr) = scene(3, 100, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for c in &mut corr {
        c.observation = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
    }
    let params = PnPParams {
        min_inliers: 30,
        ..PnPParams::default()
    };
    assert!(pnp_ransac(&corr, &k, &params, 0).is_err());
}
