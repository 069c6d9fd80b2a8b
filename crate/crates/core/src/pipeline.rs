//! Single-image localization against a topo-metric map, the jump filter,
//! and trajectory evaluation.

use std::fmt;
use std::io::{self, Write};
use std::time::{Duration, Instant};

use crate::coarse::{self, GlobalDescriptor};
use crate::features::{self, detect_and_describe_with, Descriptor, Keypoint};
use crate::fine::{self, Correspondence, PnPParams};
use crate::geometry::{rotation_distance, translation_distance, Pose};
use crate::imaging::GrayImage;
use crate::mapping::{Preprocessing, TopoMetricMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Localized,
    /// Classified to a node but the metric step failed.
    CoarseOnly,
    Failed,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Localized => "localized",
            Status::CoarseOnly => "coarse-only",
            Status::Failed => "failed",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub frame_id: usize,
    pub node_id: Option<u32>,
    /// `world_from_camera`; present iff `status` is `Localized`.
    pub pose: Option<Pose>,
    pub inliers: usize,
    pub matched: usize,
    /// The estimate jumped too far and `pose` was copied from the previous frame.
    pub jump_rejected: bool,
    pub status: Status,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpFilterParams {
    /// Largest accepted translation between consecutive poses, meters.
    pub max_step: f64,
}

impl Default for JumpFilterParams {
    fn default() -> Self {
        Self { max_step: 2.0 }
    }
}

/// Returns `(prev, true)` if `new` is more than `max_step` from `prev`,
/// otherwise `(new, false)`.
pub fn jump_filter(prev: &Pose, new: &Pose, params: &JumpFilterParams) -> (Pose, bool) {
    if translation_distance(prev, new) > params.max_step {
        (*prev, true)
    } else {
        (*new, false)
    }
}

/// Sequential jump filter. The filter only compares against the
/// immediately preceding frame, and only if that frame produced a pose; a
/// frame following a gap is accepted as is.
#[derive(Clone, Debug)]
pub struct JumpFilter {
    params: JumpFilterParams,
    prev: Option<Pose>,
}

impl JumpFilter {
    pub fn new(params: JumpFilterParams) -> Self {
        Self { params, prev: None }
    }

    /// Filters the next frame's estimate; returns the emitted pose and
    /// whether the estimate was rejected.
    pub fn apply(&mut self, estimate: Option<Pose>) -> (Option<Pose>, bool) {
        let out = match (self.prev, estimate) {
            (Some(prev), Some(new)) => {
                let (p, rejected) = jump_filter(&prev, &new, &self.params);
                (Some(p), rejected)
            }
            (_, e) => (e, false),
        };
        self.prev = out.0;
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationParams {
    /// Must match the preprocessing the map was built with.
    pub preprocessing: Preprocessing,
    pub ratio: f64,
    pub pnp: PnPParams,
    pub jump: JumpFilterParams,
    pub seed: u64,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        Self {
            preprocessing: Preprocessing::default(),
            ratio: features::DEFAULT_RATIO,
            pnp: PnPParams::default(),
            jump: JumpFilterParams::default(),
            seed: 0,
        }
    }
}

/// Wall-clock time per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub normalize: Duration,
    pub classify: Duration,
    pub match_pnp: Duration,
    pub total: Duration,
}

impl std::ops::AddAssign for StageTimings {
    fn add_assign(&mut self, o: Self) {
        self.normalize += o.normalize;
        self.classify += o.classify;
        self.match_pnp += o.match_pnp;
        self.total += o.total;
    }
}

/// The map-independent part of localizing an image.
#[derive(Clone, Debug)]
pub struct QueryFrame {
    pub frame_id: usize,
    /// `None` when the image carries no structure to embed.
    pub embedding: Option<GlobalDescriptor>,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub timings: StageTimings,
}

impl QueryFrame {
    pub fn prepare(frame_id: usize, img: &GrayImage, pre: &Preprocessing) -> Self {
        let start = Instant::now();
        let prepared = pre.prepare(img);
        let normalized = Instant::now();
        let embedding = coarse::embed_prepared(&prepared);
        let embedded = Instant::now();
        let (keypoints, descriptors) = detect_and_describe_with(&prepared, pre.max_keypoints, &pre.detector)
            .into_iter()
            .unzip();
        let detected = Instant::now();
        Self {
            frame_id,
            embedding,
            keypoints,
            descriptors,
            timings: StageTimings {
                normalize: normalized - start,
                classify: embedded - normalized,
                match_pnp: detected - embedded,
                total: detected - start,
            },
        }
    }
}

fn frame_seed(seed: u64, frame_id: usize) -> u64 {
    seed ^ (frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Coarse-to-fine estimate for a prepared query, before jump filtering.
pub fn localize_query(
    map: &TopoMetricMap,
    query: &QueryFrame,
    params: &LocalizationParams,
) -> (LocalizationResult, StageTimings) {
    let mut timings = query.timings;
    let mut result = LocalizationResult {
        frame_id: query.frame_id,
        node_id: None,
        pose: None,
        inliers: 0,
        matched: 0,
        jump_rejected: false,
        status: Status::Failed,
    };
    let Some(embedding) = &query.embedding else {
        return (result, timings);
    };
    let t0 = Instant::now();
    let node_id = map.classifier.classify(embedding);
    let t1 = Instant::now();
    timings.classify += t1 - t0;
    result.node_id = Some(node_id);
    result.status = Status::CoarseOnly;

    let node = &map.nodes[node_id as usize];
    if !query.descriptors.is_empty() && !node.descriptors.is_empty() {
        let matches = features::match_descriptors(&query.descriptors, &node.descriptors, params.ratio);
        result.matched = matches.len();
        let corr: Vec<Correspondence> = matches
            .iter()
            .map(|m| {
                Correspondence::new(node.landmarks[m.train_index], query.keypoints[m.query_index].position)
            })
            .collect();
        if let Ok(pnp) = fine::pnp_ransac(
            &corr,
            &map.intrinsics,
            &params.pnp,
            frame_seed(params.seed, query.frame_id),
        ) {
            result.inliers = pnp.inlier_indices.len();
            result.pose = Some(node.global_pose.compose(&pnp.node_from_camera));
            result.status = Status::Localized;
        }
    }
    let t2 = Instant::now();
    timings.match_pnp += t2 - t1;
    timings.total += t2 - t0;
    (result, timings)
}

/// Localizes one image; `prev` is the previous frame's result, if any.
pub fn localize_frame(
    map: &TopoMetricMap,
    frame_id: usize,
    img: &GrayImage,
    prev: Option<&LocalizationResult>,
    params: &LocalizationParams,
) -> LocalizationResult {
    let query = QueryFrame::prepare(frame_id, img, &params.preprocessing);
    let (mut result, _) = localize_query(map, &query, params);
    let mut filter = JumpFilter::new(params.jump);
    filter.prev = prev.and_then(|p| p.pose);
    apply_filter(&mut filter, &mut result);
    result
}

fn apply_filter(filter: &mut JumpFilter, result: &mut LocalizationResult) {
    let (pose, rejected) = filter.apply(result.pose);
    result.pose = pose;
    result.jump_rejected = rejected;
}

/// Localizes an ordered sequence of prepared queries.
pub fn localize_queries<'a>(
    map: &TopoMetricMap,
    queries: impl IntoIterator<Item = &'a QueryFrame>,
    params: &LocalizationParams,
) -> (Vec<LocalizationResult>, StageTimings) {
    let mut filter = JumpFilter::new(params.jump);
    let mut total = StageTimings::default();
    let mut out = Vec::new();
    for q in queries {
        let (mut r, t) = localize_query(map, q, params);
        apply_filter(&mut filter, &mut r);
        total += t;
        out.push(r);
    }
    (out, total)
}

/// Localizes an ordered sequence of `(frame id, image)` pairs.
pub fn localize_sequence<I>(
    map: &TopoMetricMap,
    frames: I,
    params: &LocalizationParams,
) -> (Vec<LocalizationResult>, StageTimings)
where
    I: IntoIterator<Item = (usize, GrayImage)>,
{
    let mut filter = JumpFilter::new(params.jump);
    let mut total = StageTimings::default();
    let mut out = Vec::new();
    for (id, img) in frames {
        let q = QueryFrame::prepare(id, &img, &params.preprocessing);
        let (mut r, t) = localize_query(map, &q, params);
        apply_filter(&mut filter, &mut r);
        total += t;
        out.push(r);
    }
    (out, total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    /// `None` when no frame was localized.
    pub median_translation_error: Option<f64>,
    /// Degrees.
    pub median_rotation_error: Option<f64>,
    /// Median over every frame, unlocalized ones counting as unbounded
    /// error; `None` when at least half the frames failed. Unlike the
    /// localized-only median it does not improve when a sparse map simply
    /// gives up on the harder frames.
    pub median_translation_error_all: Option<f64>,
    pub topological_accuracy: f64,
    pub localization_rate: f64,
    pub frames: usize,
    pub localized: usize,
    pub jump_rejected: usize,
}

/// Lower median (the `⌈n/2⌉`-th smallest value); `None` for an empty slice.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Some(*m)
}

/// Compares results against ground truth `(world_from_camera, node id)`
/// given frame by frame. Jump-rejected frames count with their copied pose.
pub fn evaluate(results: &[LocalizationResult], truth: &[(Pose, u32)]) -> TrajectoryMetrics {
    assert_eq!(results.len(), truth.len(), "results and truth must align");
    let mut dt = Vec::new();
    let mut dr = Vec::new();
    let mut topo_hits = 0;
    for (r, (pose, node)) in results.iter().zip(truth) {
        if r.node_id == Some(*node) {
            topo_hits += 1;
        }
        if let (Status::Localized, Some(p)) = (r.status, r.pose) {
            dt.push(translation_distance(&p, pose));
            dr.push(rotation_distance(&p, pose).to_degrees());
        }
    }
    let n = results.len();
    let mut all = dt.clone();
    all.resize(n, f64::INFINITY);
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    TrajectoryMetrics {
        median_translation_error: lower_median(&dt),
        median_rotation_error: lower_median(&dr),
        median_translation_error_all: lower_median(&all).filter(|m| m.is_finite()),
        topological_accuracy: frac(topo_hits),
        localization_rate: frac(dt.len()),
        frames: n,
        localized: dt.len(),
        jump_rejected: results.iter().filter(|r| r.jump_rejected).count(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

impl TrajectoryMetrics {
    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "median_translation_error_m={}\nmedian_rotation_error_deg={}\n\
             median_translation_error_all_m={}\ntopological_accuracy={}\n\
             localization_rate={}\nframes={}\nlocalized={}\njump_rejected={}\n",
            opt(self.median_translation_error),
            opt(self.median_rotation_error),
            opt(self.median_translation_error_all),
            self.topological_accuracy,
            self.localization_rate,
            self.frames,
            self.localized,
            self.jump_rejected
        )
    }
}

pub const TRAJECTORY_HEADER: &str =
    "frame_id,status,node_id,tx,ty,tz,qw,qx,qy,qz,matched,inliers,jump_rejected";

/// Writes the trajectory CSV; pose and node columns are empty when absent.
pub fn write_trajectory_csv(mut w: impl Write, results: &[LocalizationResult]) -> io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in results {
        let node = r.node_id.map(|n| n.to_string()).unwrap_or_default();
        let pose = match r.pose {
            Some(p) => {
                let t = p.translation();
                let q = p.quaternion_wxyz();
                format!(
                    "{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                    t.x, t.y, t.z, q[0], q[1], q[2], q[3]
                )
            }
            None => ",,,,,,".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.frame_id,
            r.status,
            node,
            pose,
            r.matched,
            r.inliers,
            u8::from(r.jump_rejected)
        )?;
    }
    Ok(())
}
