mod common;

use std::path::PathBuf;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use topoloc::geometry::{CameraIntrinsics, Pose};
use topoloc::mapping::ingest::IngestedSequence;
use topoloc::mapping::{
    build_map, load_map, map_stats, save_map, update_and_test, DistanceAccumulator, FormatError,
    MapBuildParams, MapError, NodeSpacingPolicy, PosedFrame,
};
use topoloc::synthworld::{export_sequence, generate_world, Sequence, SequenceConfig, WorldConfig};

fn node_frames(poses: &[Pose], policy: &NodeSpacingPolicy) -> Vec<usize> {
    let mut acc = DistanceAccumulator::new(poses[0]);
    let mut out = vec![0];
    for (i, p) in poses.iter().enumerate().skip(1) {
        let (next, create) = update_and_test(acc, p, policy);
        acc = next;
        if create {
            out.push(i);
        }
    }
    out
}

fn straight(length: f64, step: f64) -> Vec<Pose> {
    let n = (length / step).round() as usize;
    (0..=n)
        .map(|i| Pose::from_translation(Vector3::new(i as f64 * step, 0.0, 0.0)))
        .collect()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("topoloc-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

proptest! {
    #[test]
    fn accumulator_agrees_with_matrix_oracle(
        seed: u64,
        len in 2usize..120,
        d_thresh in 0.5..25.0f64,
        lambda in 0.0..5.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = random_pose(&mut rng, 5.0);
        let mut poses = vec![pose];
        for _ in 1..len {
            let w = Vector3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let v = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            pose = pose.compose(&Pose::identity().retract_left(&w, &v));
            poses.push(pose);
        }
        let policy = NodeSpacingPolicy::new(d_thresh, lambda).unwrap();
        let ours: Vec<usize> = node_frames(&poses, &policy);
        let oracle: Vec<usize> = std::iter::once(0)
            .chain(node_decisions(&poses, d_thresh, lambda).iter().enumerate().filter_map(|(i, &c)| c.then_some(i + 1)))
            .collect();
        prop_assert_eq!(ours, oracle);
    }

    #[test]
    fn larger_threshold_never_adds_nodes(seed: u64, d in 0.5..30.0f64, extra in 0.0..30.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..200)
            .scan(0.0, |x, _| {
                *x += rng.random_range(0.0..2.0);
                Some(Pose::from_translation(Vector3::new(*x, 0.0, 0.0)))
            })
            .collect();
        let a = node_frames(&poses, &NodeSpacingPolicy::new(d, 2.0).unwrap()).len();
        let b = node_frames(&poses, &NodeSpacingPolicy::new(d + extra, 2.0).unwrap()).len();
        prop_assert!(b <= a);
    }
}

#[test]
fn straight_path_places_nodes_past_each_threshold() {
    let policy = NodeSpacingPolicy::new(20.0, 2.0).unwrap();
    // Strictly greater than 20 m since the previous node.
    assert_eq!(node_frames(&straight(100.0, 1.0), &policy), vec![0, 21, 42, 63, 84]);
    assert_eq!(node_frames(&straight(100.0, 0.5), &policy), vec![0, 41, 82, 123, 164]);
    assert_eq!(node_frames(&straight(20.0, 1.0), &policy), vec![0]);
}

#[test]
fn rotation_in_place_creates_nodes() {
    let policy = NodeSpacingPolicy::new(2.0, 2.0).unwrap();
    let poses: Vec<Pose> = (0..=40)
        .map(|i| {
            let q = nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, i as f64 * 0.1);
            Pose::new(q, Vector3::zeros())
        })
        .collect();
    // 0.1 rad per step at λ = 2 is 0.2 per step; more than 2.0 after 11 steps.
    assert_eq!(node_frames(&poses, &policy), vec![0, 11, 22, 33]);
}

#[test]
fn invalid_policies_are_rejected() {
    assert!(NodeSpacingPolicy::new(0.0, 1.0).is_err());
    assert!(NodeSpacingPolicy::new(-1.0, 1.0).is_err());
    assert!(NodeSpacingPolicy::new(5.0, -1.0).is_err());
    assert!(NodeSpacingPolicy::new(f64::NAN, 1.0).is_err());
}

fn small_world() -> WorldConfig {
    WorldConfig {
        extent: (40.0, 40.0),
        landmark_count: 1750,
        ..WorldConfig::default()
    }
}

#[test]
fn built_map_follows_the_policy_and_survives_a_file_round_trip() {
    let world = generate_world(&small_world());
    let k = CameraIntrinsics::default();
    let seq = Sequence::new(&world, k, SequenceConfig::default());
    let params = MapBuildParams::default();
    let map = build_map(seq.frames(), k, &params).unwrap();

    let expected = node_frames(seq.poses(), &params.policy);
    assert_eq!(map.nodes.len(), expected.len());
    for (node, &frame) in map.nodes.iter().zip(&expected) {
        assert_eq!(node.global_pose, seq.poses()[frame]);
        assert!(node.landmarks.len() >= params.min_template_landmarks);
        assert_eq!(node.keypoints.len(), node.descriptors.len());
        assert!(node.landmarks.iter().all(|p| p.z > 0.0));
    }
    assert_eq!(map.classifier.samples().len(), seq.len());
    for (i, node) in map.nodes.iter().enumerate() {
        assert_eq!(map.nearest_node(&node.global_pose), i as u32);
    }

    let dir = scratch("map");
    let path = dir.join("map.tmap");
    save_map(&map, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, map_stats(&map).bytes);
    assert_eq!(load_map(&path).unwrap(), map);
    assert!(matches!(load_map(dir.join("missing.tmap")), Err(FormatError::Io(_))));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn exported_sequences_ingest_back() {
    let world = generate_world(&small_world());
    let k = CameraIntrinsics::default();
    let cfg = SequenceConfig {
        frame_spacing: 5.0,
        ..SequenceConfig::default()
    };
    let seq = Sequence::new(&world, k, cfg);
    let dir = scratch("ingest");
    assert_eq!(export_sequence(&seq, &dir).unwrap(), seq.len());

    let ingested = IngestedSequence::open(&dir).unwrap();
    assert_eq!(ingested.intrinsics, k);
    assert_eq!(ingested.len(), seq.len());
    for i in 0..seq.len() {
        let read: PosedFrame = ingested.read_posed(i).unwrap();
        let frame = PosedFrame::from(seq.frame(i));
        assert_eq!(read.pose, frame.pose);
        assert_eq!(read.observations, frame.observations);
        let quantized = frame.image.data().iter().zip(read.image.data());
        assert!(quantized.into_iter().all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn empty_and_featureless_sequences_fail() {
    let k = CameraIntrinsics::default();
    let none: Vec<PosedFrame> = vec![];
    assert!(matches!(build_map(none, k, &MapBuildParams::default()), Err(MapError::EmptySequence)));

    let blank = PosedFrame {
        id: 0,
        pose: Pose::identity(),
        image: topoloc::imaging::GrayImage::filled(640, 480, 0.5),
        observations: vec![],
    };
    assert!(matches!(
        build_map(vec![blank], k, &MapBuildParams::default()),
        Err(MapError::SparseTemplate { .. })
    ));
}
