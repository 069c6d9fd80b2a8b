//! Topo-metric map construction.
//!
//! A node is seeded whenever the path length plus `λ` times the accumulated
//! rotation since the previous node exceeds `d_thresh`. Each node keeps the
//! keypoints of its seed image that could be tied to a known landmark, with
//! those landmarks expressed in the node frame. Every mapping frame also
//! feeds the node classifier, labeled with its nearest node.

pub mod format;
pub mod ingest;

use thiserror::Error;

use crate::coarse::{self, CoarseError, GlobalDescriptor, NodeClassifier};
use crate::features::{detect_and_describe_with, Descriptor, DetectorConfig, Keypoint};
use crate::geometry::{
    rotation_distance, translation_distance, CameraIntrinsics, GeometryError, Pixel, Point3, Pose,
};
use crate::imaging::{patch_normalize, GrayImage, PatchNormParams};
use crate::synthworld::Frame;

pub use format::{from_bytes, load_map, save_map, to_bytes, FormatError, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("invalid node spacing policy: {0}")]
    Policy(String),
    #[error("mapping sequence is empty")]
    EmptySequence,
    #[error(
        "frame {frame}: node template keeps only {count} landmark-associated keypoints \
         (need at least {required})"
    )]
    SparseTemplate {
        frame: usize,
        count: usize,
        required: usize,
    },
    #[error(transparent)]
    Intrinsics(#[from] GeometryError),
    #[error(transparent)]
    Classifier(#[from] CoarseError),
}

/// Node spacing rule: `d_thresh` in meters, `lambda` in meters per radian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeSpacingPolicy {
    pub d_thresh: f64,
    pub lambda: f64,
}

impl Default for NodeSpacingPolicy {
    fn default() -> Self {
        Self {
            d_thresh: 20.0,
            lambda: 2.0,
        }
    }
}

impl NodeSpacingPolicy {
    pub fn new(d_thresh: f64, lambda: f64) -> Result<Self, MapError> {
        let p = Self { d_thresh, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.d_thresh > 0.0) || !self.d_thresh.is_finite() {
            return Err(MapError::Policy(format!(
                "d_thresh must be positive, got {}",
                self.d_thresh
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(MapError::Policy(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Combined translation/rotation distance used for both node spacing
    /// and nearest-node labeling.
    pub fn distance(&self, a: &Pose, b: &Pose) -> f64 {
        translation_distance(a, b) + self.lambda * rotation_distance(a, b)
    }
}

/// Motion accumulated since the last node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceAccumulator {
    pub accumulated_translation: f64,
    pub accumulated_rotation: f64,
    pub last_pose: Pose,
}

impl DistanceAccumulator {
    pub fn new(start: Pose) -> Self {
        Self {
            accumulated_translation: 0.0,
            accumulated_rotation: 0.0,
            last_pose: start,
        }
    }
}

/// Adds the motion from `acc.last_pose` to `pose` and reports whether a node
/// must be created there (strict `>`). Accumulators reset when it must.
pub fn update_and_test(
    acc: DistanceAccumulator,
    pose: &Pose,
    policy: &NodeSpacingPolicy,
) -> (DistanceAccumulator, bool) {
    let translation = acc.accumulated_translation + translation_distance(&acc.last_pose, pose);
    let rotation = acc.accumulated_rotation + rotation_distance(&acc.last_pose, pose);
    if translation + policy.lambda * rotation > policy.d_thresh {
        (DistanceAccumulator::new(*pose), true)
    } else {
        (
            DistanceAccumulator {
                accumulated_translation: translation,
                accumulated_rotation: rotation,
                last_pose: *pose,
            },
            false,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoNode {
    pub id: u32,
    /// world_from_node; the node frame is the seed camera frame.
    pub global_pose: Pose,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    /// Node-frame landmark positions, index-aligned with `keypoints`.
    pub landmarks: Vec<Point3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoMetricMap {
    pub nodes: Vec<TopoNode>,
    pub intrinsics: CameraIntrinsics,
    pub policy: NodeSpacingPolicy,
    pub classifier: NodeClassifier,
    pub format_version: u32,
}

impl TopoMetricMap {
    pub fn landmark_count(&self) -> usize {
        self.nodes.iter().map(|n| n.landmarks.len()).sum()
    }

    /// Node nearest to `pose` under the spacing metric; ties go to the lower id.
    pub fn nearest_node(&self, pose: &Pose) -> u32 {
        nearest_node(self.nodes.iter().map(|n| &n.global_pose), pose, &self.policy)
    }
}

fn nearest_node<'a>(
    poses: impl Iterator<Item = &'a Pose>,
    pose: &Pose,
    policy: &NodeSpacingPolicy,
) -> u32 {
    let mut best = (0u32, f64::INFINITY);
    for (i, p) in poses.enumerate() {
        let d = policy.distance(p, pose);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best.0
}

/// Image plus ground-truth pose and world-frame landmark observations.
#[derive(Clone, Debug)]
pub struct PosedFrame {
    pub id: usize,
    /// world_from_camera.
    pub pose: Pose,
    pub image: GrayImage,
    pub observations: Vec<(Pixel, Point3<f64>)>,
}

impl From<Frame> for PosedFrame {
    fn from(f: Frame) -> Self {
        Self {
            id: f.id,
            pose: f.pose,
            image: f.image,
            observations: f.observations.iter().map(|o| (o.pixel, o.point)).collect(),
        }
    }
}

/// Image preparation shared by map building and localization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocessing {
    /// Apply patch normalization before embedding and feature extraction.
    pub normalize: bool,
    pub patch: PatchNormParams,
    pub detector: DetectorConfig,
    pub max_keypoints: usize,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            normalize: true,
            patch: PatchNormParams::default(),
            detector: DetectorConfig::default(),
            max_keypoints: 1000,
        }
    }
}

impl Preprocessing {
    pub fn prepare(&self, img: &GrayImage) -> GrayImage {
        if self.normalize {
            patch_normalize(img, &self.patch)
        } else {
            img.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapBuildParams {
    pub policy: NodeSpacingPolicy,
    pub knn_k: usize,
    /// Maximum keypoint-to-observation distance for association, pixels.
    pub association_gate: f64,
    pub min_template_landmarks: usize,
    pub preprocessing: Preprocessing,
}

impl Default for MapBuildParams {
    fn default() -> Self {
        Self {
            policy: NodeSpacingPolicy::default(),
            knn_k: coarse::DEFAULT_K,
            association_gate: 2.0,
            min_template_landmarks: 8,
            preprocessing: Preprocessing::default(),
        }
    }
}

/// Incremental map builder; frames are consumed one at a time so a long
/// sequence never has to be resident in memory.
pub struct MapBuilder {
    intrinsics: CameraIntrinsics,
    params: MapBuildParams,
    acc: Option<DistanceAccumulator>,
    nodes: Vec<TopoNode>,
    samples: Vec<(GlobalDescriptor, Pose)>,
}

impl MapBuilder {
    pub fn new(intrinsics: CameraIntrinsics, params: MapBuildParams) -> Result<Self, MapError> {
        intrinsics.validate()?;
        params.policy.validate()?;
        if params.knn_k == 0 {
            return Err(CoarseError::ZeroK.into());
        }
        Ok(Self {
            intrinsics,
            params,
            acc: None,
            nodes: Vec::new(),
            samples: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn push(&mut self, frame: &PosedFrame) -> Result<(), MapError> {
        let create = match self.acc {
            None => {
                self.acc = Some(DistanceAccumulator::new(frame.pose));
                true
            }
            Some(acc) => {
                let (next, create) = update_and_test(acc, &frame.pose, &self.params.policy);
                self.acc = Some(next);
                create
            }
        };
        let prepared = self.params.preprocessing.prepare(&frame.image);
        if create {
            let node = self.build_node(frame, &prepared)?;
            self.nodes.push(node);
        }
        let embedding =
            coarse::embed_prepared(&prepared).unwrap_or_else(GlobalDescriptor::fallback);
        self.samples.push((embedding, frame.pose));
        Ok(())
    }

    fn build_node(&self, frame: &PosedFrame, prepared: &GrayImage) -> Result<TopoNode, MapError> {
        let pre = &self.params.preprocessing;
        let features = detect_and_describe_with(prepared, pre.max_keypoints, &pre.detector);
        let keypoints: Vec<Keypoint> = features.iter().map(|f| f.0).collect();
        let pairs = associate(&keypoints, &frame.observations, self.params.association_gate);
        if pairs.len() < self.params.min_template_landmarks {
            return Err(MapError::SparseTemplate {
                frame: frame.id,
                count: pairs.len(),
                required: self.params.min_template_landmarks,
            });
        }
        let node_from_world = frame.pose.inverse();
        let mut node = TopoNode {
            id: self.nodes.len() as u32,
            global_pose: frame.pose,
            keypoints: Vec::with_capacity(pairs.len()),
            descriptors: Vec::with_capacity(pairs.len()),
            landmarks: Vec::with_capacity(pairs.len()),
        };
        for (ki, oi) in pairs {
            let local = node_from_world.transform_point(&frame.observations[oi].1);
            if local.z <= 0.0 {
                continue;
            }
            node.keypoints.push(features[ki].0);
            node.descriptors.push(features[ki].1.clone());
            node.landmarks.push(local);
        }
        if node.landmarks.len() < self.params.min_template_landmarks {
            return Err(MapError::SparseTemplate {
                frame: frame.id,
                count: node.landmarks.len(),
                required: self.params.min_template_landmarks,
            });
        }
        Ok(node)
    }

    pub fn finish(self) -> Result<TopoMetricMap, MapError> {
        if self.nodes.is_empty() {
            return Err(MapError::EmptySequence);
        }
        let labeled = self
            .samples
            .into_iter()
            .map(|(d, pose)| {
                let label = nearest_node(
                    self.nodes.iter().map(|n| &n.global_pose),
                    &pose,
                    &self.params.policy,
                );
                (d, label)
            })
            .collect();
        let classifier = coarse::train_classifier(labeled, self.params.knn_k)?;
        Ok(TopoMetricMap {
            nodes: self.nodes,
            intrinsics: self.intrinsics,
            policy: self.params.policy,
            classifier,
            format_version: FORMAT_VERSION,
        })
    }
}

/// Builds a map from a posed sequence. The first frame always seeds node 0.
pub fn build_map<I>(
    frames: I,
    intrinsics: CameraIntrinsics,
    params: &MapBuildParams,
) -> Result<TopoMetricMap, MapError>
where
    I: IntoIterator,
    I::Item: Into<PosedFrame>,
{
    let mut builder = MapBuilder::new(intrinsics, *params)?;
    for frame in frames {
        builder.push(&frame.into())?;
    }
    builder.finish()
}

/// Pairs keypoints with observations by nearest pixel within `gate`,
/// one-to-one. Returns `(keypoint index, observation index)` pairs in
/// keypoint order.
pub fn associate(
    keypoints: &[Keypoint],
    observations: &[(Pixel, Point3<f64>)],
    gate: f64,
) -> Vec<(usize, usize)> {
    // Bucket observations on a grid of gate-sized cells.
    let cell = gate.max(1e-6);
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> =
        std::collections::HashMap::new();
    for (i, (px, _)) in observations.iter().enumerate() {
        let key = ((px.u / cell).floor() as i64, (px.v / cell).floor() as i64);
        grid.entry(key).or_default().push(i);
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (ki, kp) in keypoints.iter().enumerate() {
        let (cu, cv) = (
            (kp.position.u / cell).floor() as i64,
            (kp.position.v / cell).floor() as i64,
        );
        let mut best: Option<(f64, usize)> = None;
        for du in -1..=1 {
            for dv in -1..=1 {
                for &oi in grid.get(&(cu + du, cv + dv)).into_iter().flatten() {
                    let d = kp.position.distance(&observations[oi].0);
                    if d <= gate && best.is_none_or(|b| d < b.0) {
                        best = Some((d, oi));
                    }
                }
            }
        }
        if let Some((d, oi)) = best {
            candidates.push((d, ki, oi));
        }
    }
    // Closest keypoint wins an observation claimed twice.
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut taken = vec![false; observations.len()];
    let mut pairs: Vec<(usize, usize)> = candidates
        .into_iter()
        .filter(|&(_, _, oi)| !std::mem::replace(&mut taken[oi], true))
        .map(|(_, ki, oi)| (ki, oi))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapStats {
    pub nodes: usize,
    pub landmarks: usize,
    /// Length of the serialized map file.
    pub bytes: usize,
}

pub fn map_stats(map: &TopoMetricMap) -> MapStats {
    MapStats {
        nodes: map.nodes.len(),
        landmarks: map.landmark_count(),
        bytes: format::to_bytes(map).len(),
    }
}
