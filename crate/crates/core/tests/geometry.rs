mod common;

use std::f64::consts::PI;

use nalgebra::{Point3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use topoloc::geometry::{
    project, rotation_distance, translation_distance, CameraIntrinsics, Pixel, Pose,
};

fn pose_strategy() -> impl Strategy<Value = Pose> {
    any::<u64>().prop_map(|seed| random_pose(&mut ChaCha8Rng::seed_from_u64(seed), 100.0))
}

proptest! {
    #[test]
    fn composition_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let left = pose_matrix(&a.compose(&b).compose(&c));
        let right = pose_matrix(&a.compose(&b.compose(&c)));
        prop_assert!(max_abs_diff4(&left, &right) < 1e-9);
    }

    #[test]
    fn inverse_undoes_transform(a in pose_strategy(), x in -50.0..50.0f64, y in -50.0..50.0f64, z in -50.0..50.0f64) {
        let p = Point3::new(x, y, z);
        let back = a.inverse().transform_point(&a.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn distances_are_metrics(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let r = rotation_distance(&a, &b);
        prop_assert!((0.0..=PI + 1e-12).contains(&r));
        prop_assert!((r - rotation_distance(&b, &a)).abs() < 1e-12);
        prop_assert!(rotation_distance(&a, &a) < 1e-7);
        prop_assert!(rotation_distance(&a, &c) <= r + rotation_distance(&b, &c) + 1e-9);
        prop_assert!(translation_distance(&a, &c) <= translation_distance(&a, &b) + translation_distance(&b, &c) + 1e-9);
        prop_assert!((r - matrix_rotation_angle(&pose_matrix(&a), &pose_matrix(&b))).abs() < 1e-9);
    }

    #[test]
    fn text_round_trip_is_exact(a in pose_strategy()) {
        let back: Pose = a.to_string().parse().unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn backprojection_inverts_projection(u in 0.0..640.0f64, v in 0.0..480.0f64, depth in 0.1..100.0f64) {
        let k = CameraIntrinsics::default();
        let px = Pixel::new(u, v);
        let p = k.backproject(&px, depth);
        prop_assert!((p.z - depth).abs() < 1e-9);
        let again = k.project_camera_point(&p).unwrap();
        prop_assert!(again.distance(&px) < 1e-9);
    }
}

#[test]
fn retraction_by_zero_is_identity() {
    let a = random_pose(&mut ChaCha8Rng::seed_from_u64(5), 10.0);
    let b = a.retract_left(&Vector3::zeros(), &Vector3::zeros());
    assert!(max_abs_diff4(&pose_matrix(&a), &pose_matrix(&b)) < 1e-15);
}

#[test]
fn points_behind_the_camera_do_not_project() {
    let k = CameraIntrinsics::default();
    assert!(k.project_camera_point(&Point3::new(0.0, 0.0, -1.0)).is_none());
    assert!(k.project_camera_point(&Point3::new(0.0, 0.0, 0.0)).is_none());
    let px = project(&k, &Pose::identity(), &Point3::new(0.0, 0.0, 5.0)).unwrap();
    assert_eq!((px.u, px.v), (k.cx, k.cy));
}

#[test]
fn malformed_pose_text_is_rejected() {
    for s in ["", "1 2 3", "1 2 3 0 0 0 0", "1 2 3 1 0 0 nan", "a b c d e f g"] {
        assert!(s.parse::<Pose>().is_err(), "{s:?}");
    }
    let p: Pose = "1 2 3 2 0 0 0".parse().unwrap();
    assert_eq!(p.quaternion_wxyz(), [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn invalid_intrinsics_are_rejected() {
    assert!(CameraIntrinsics::new(0.0, 500.0, 320.0, 240.0, 640, 480).is_err());
    assert!(CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 0, 480).is_err());
    assert!(CameraIntrinsics::new(500.0, f64::NAN, 320.0, 240.0, 640, 480).is_err());
}
