//! Deterministic synthetic environment used to exercise the whole pipeline
//! against ground truth.
//!
//! The world is a rounded-rectangle loop inside a `width × depth` box. Point
//! landmarks fill two thin wall bands flanking the path (5.5–6.5 m to either
//! side, −2.5 to 4.5 m in height). Frames are rendered as Gaussian blobs on
//! black.
//!
//! World frame: X/Y horizontal, Z up. Camera frame: x right, y down, z forward.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};
use crate::imaging::GrayImage;
use crate::mapping::ingest;

/// Lateral extent of the landmark bands, measured from the path.
pub const BAND_NEAR: f64 = 5.5;
pub const BAND_FAR: f64 = 6.5;
pub const HEIGHT_RANGE: (f64, f64) = (-2.5, 4.5);
/// Corner radius of the loop.
pub const CORNER_RADIUS: f64 = 13.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldConfig {
    /// Bounding box `(x, y)` in meters; the loop runs inside it.
    pub extent: (f64, f64),
    pub landmark_count: usize,
    pub seed: u64,
    /// Rendered blob standard deviation, in pixels.
    pub blob_sigma: f64,
    /// Landmarks farther than this along the optical axis are not rendered.
    pub view_distance: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent: (120.0, 40.0),
            landmark_count: 5000,
            seed: 7,
            blob_sigma: 2.5,
            view_distance: 20.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), String> {
        let min_side = 2.0 * (BAND_FAR + CORNER_RADIUS);
        if !(self.extent.0 >= min_side && self.extent.1 >= min_side) {
            return Err(format!(
                "extent {:?} too small, both sides must be at least {min_side} m",
                self.extent
            ));
        }
        if self.landmark_count == 0 {
            return Err("landmark_count must be positive".into());
        }
        if !(self.blob_sigma > 0.0) || !(self.view_distance > 0.0) {
            return Err("blob_sigma and view_distance must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub position: Point3<f64>,
    /// Peak blob intensity in `[0.4, 1.0]`.
    pub brightness: f64,
}

/// Closed rounded-rectangle path traversed counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopPath {
    half_x: f64,
    half_y: f64,
    radius: f64,
}

impl LoopPath {
    fn straight_x(&self) -> f64 {
        2.0 * (self.half_x - self.radius)
    }

    fn straight_y(&self) -> f64 {
        2.0 * (self.half_y - self.radius)
    }

    pub fn length(&self) -> f64 {
        2.0 * self.straight_x() + 2.0 * self.straight_y() + 2.0 * PI * self.radius
    }

    /// Position and unit heading at arc length `s` (wrapped). The loop starts
    /// in the middle of the bottom edge heading +X.
    pub fn at(&self, s: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (ix, iy, r) = (self.half_x - self.radius, self.half_y - self.radius, self.radius);
        let quarter = PI * r / 2.0;
        let mut s = s.rem_euclid(self.length());
        // Segments in order: half bottom, corner, right, corner, top, corner,
        // left, corner, half bottom.
        let segments: [(f64, Box<dyn Fn(f64) -> (Vector3<f64>, Vector3<f64>)>); 9] = [
            (ix, Box::new(move |t| (Vector3::new(t, -self.half_y, 0.0), Vector3::x()))),
            (quarter, Box::new(move |t| arc(ix, -iy, r, -PI / 2.0 + t / r))),
            (2.0 * iy, Box::new(move |t| (Vector3::new(self.half_x, -iy + t, 0.0), Vector3::y()))),
            (quarter, Box::new(move |t| arc(ix, iy, r, t / r))),
            (2.0 * ix, Box::new(move |t| (Vector3::new(ix - t, self.half_y, 0.0), -Vector3::x()))),
            (quarter, Box::new(move |t| arc(-ix, iy, r, PI / 2.0 + t / r))),
            (2.0 * iy, Box::new(move |t| (Vector3::new(-self.half_x, iy - t, 0.0), -Vector3::y()))),
            (quarter, Box::new(move |t| arc(-ix, -iy, r, PI + t / r))),
            (ix, Box::new(move |t| (Vector3::new(-ix + t, -self.half_y, 0.0), Vector3::x()))),
        ];
        for (len, f) in segments.iter() {
            if s <= *len {
                return f(s);
            }
            s -= len;
        }
        segments[8].1(ix)
    }

    /// Unsigned distance from a horizontal point to the path.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let (ix, iy) = (self.half_x - self.radius, self.half_y - self.radius);
        let dx = x.abs() - ix;
        let dy = y.abs() - iy;
        let outside = dx.max(0.0).hypot(dy.max(0.0));
        let inside = dx.max(dy).min(0.0);
        (outside + inside - self.radius).abs()
    }
}

fn arc(cx: f64, cy: f64, r: f64, angle: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (s, c) = angle.sin_cos();
    (
        Vector3::new(cx + r * c, cy + r * s, 0.0),
        Vector3::new(-s, c, 0.0),
    )
}

/// Camera pose looking along `heading` from `position`.
pub fn camera_pose(position: Vector3<f64>, heading: Vector3<f64>) -> Pose {
    let forward = heading.normalize();
    let up = Vector3::z();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    Pose::from_rotation_matrix(&r, position)
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub landmarks: Vec<Landmark>,
    pub path: LoopPath,
}

/// Samples landmarks uniformly (by rejection) in the two bands flanking the
/// loop path. Deterministic per seed.
pub fn generate_world(cfg: &WorldConfig) -> World {
    cfg.validate().expect("invalid world config");
    let margin = BAND_FAR;
    let path = LoopPath {
        half_x: cfg.extent.0 / 2.0 - margin,
        half_y: cfg.extent.1 / 2.0 - margin,
        radius: CORNER_RADIUS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (hx, hy) = (cfg.extent.0 / 2.0, cfg.extent.1 / 2.0);
    let mut landmarks = Vec::with_capacity(cfg.landmark_count);
    while landmarks.len() < cfg.landmark_count {
        let x = rng.random_range(-hx..hx);
        let y = rng.random_range(-hy..hy);
        let z = rng.random_range(HEIGHT_RANGE.0..HEIGHT_RANGE.1);
        let brightness = rng.random_range(0.4..=1.0);
        let d = path.distance(x, y);
        if (BAND_NEAR..=BAND_FAR).contains(&d) {
            landmarks.push(Landmark {
                position: Point3::new(x, y, z),
                brightness,
            });
        }
    }
    World {
        config: *cfg,
        landmarks,
        path,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceConfig {
    /// Arc length between consecutive frames, meters.
    pub frame_spacing: f64,
    /// Sideways shift of the camera, meters; positive moves it to the right.
    pub lateral_offset: f64,
    pub lighting_gain: f64,
    pub lighting_bias: f64,
    /// Standard deviation of the jitter added to rendered blob centers, pixels.
    pub pixel_noise_sigma: f64,
    /// Probability that a visible landmark is not rendered in a frame.
    pub landmark_dropout: f64,
    /// Arc length of the first frame, meters.
    pub start: f64,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            frame_spacing: 0.5,
            lateral_offset: 0.0,
            lighting_gain: 1.0,
            lighting_bias: 0.0,
            pixel_noise_sigma: 0.0,
            landmark_dropout: 0.0,
            start: 0.0,
            seed: 0,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.frame_spacing > 0.0) {
            return Err("frame_spacing must be positive".into());
        }
        if !(self.lighting_gain > 0.0) {
            return Err("lighting_gain must be positive".into());
        }
        if !(0.0..1.0).contains(&self.landmark_dropout) {
            return Err("landmark_dropout must lie in [0, 1)".into());
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return Err("pixel_noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub pixel: Pixel,
    /// World-frame landmark position.
    pub point: Point3<f64>,
    pub landmark_id: usize,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub id: usize,
    /// Ground-truth world_from_camera pose.
    pub pose: Pose,
    pub image: GrayImage,
    pub observations: Vec<Observation>,
}

/// A lazily rendered sequence; frames are produced on demand so long loops
/// need not be held in memory.
#[derive(Clone, Debug)]
pub struct Sequence<'w> {
    world: &'w World,
    intrinsics: CameraIntrinsics,
    config: SequenceConfig,
    poses: Vec<Pose>,
}

impl<'w> Sequence<'w> {
    pub fn new(world: &'w World, intrinsics: CameraIntrinsics, config: SequenceConfig) -> Self {
        config.validate().expect("invalid sequence config");
        let count = (world.path.length() / config.frame_spacing).floor() as usize;
        let poses = (0..count)
            .map(|i| {
                let (pos, heading) = world.path.at(config.start + i as f64 * config.frame_spacing);
                let pose = camera_pose(pos, heading);
                let right = pose.rotation() * Vector3::x();
                Pose::new(*pose.rotation(), pos + right * config.lateral_offset)
            })
            .collect();
        Self {
            world,
            intrinsics,
            config,
            poses,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.config
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn frame(&self, index: usize) -> Frame {
        render_frame(
            self.world,
            &self.intrinsics,
            &self.config,
            index,
            self.poses[index],
        )
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.len()).map(move |i| self.frame(i))
    }
}

/// Renders every frame of a sequence eagerly. A full default loop holds a
/// few hundred 640×480 images; prefer [`Sequence::frames`] for long runs.
pub fn render_sequence(world: &World, k: &CameraIntrinsics, seq: &SequenceConfig) -> Vec<Frame> {
    Sequence::new(world, *k, *seq).frames().collect()
}

/// Renders a single frame from `pose`. Per-frame randomness (dropout and
/// jitter) is seeded from the world seed, the sequence seed and `id`.
pub fn render_frame(
    world: &World,
    k: &CameraIntrinsics,
    seq: &SequenceConfig,
    id: usize,
    pose: Pose,
) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(
        world
            .config
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(seq.seed.wrapping_mul(0xD1B5_4A32_D192_ED03))
            .wrapping_add(id as u64),
    );
    let jitter = Normal::new(0.0, seq.pixel_noise_sigma.max(0.0)).expect("jitter sigma");
    let camera_from_world = pose.inverse();
    let sigma = world.config.blob_sigma;
    let radius = (4.0 * sigma).ceil();
    let (w, h) = (k.width as usize, k.height as usize);
    let mut canvas = vec![0.0; w * h];
    let mut observations = Vec::new();
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);

    for (landmark_id, lm) in world.landmarks.iter().enumerate() {
        let pc = camera_from_world.transform_point(&lm.position);
        if pc.z <= 0.1 || pc.z > world.config.view_distance {
            continue;
        }
        let Some(px) = k.project_camera_point(&pc) else {
            continue;
        };
        if px.u < -radius || px.v < -radius || px.u >= w as f64 + radius || px.v >= h as f64 + radius
        {
            continue;
        }
        // Draw the random numbers unconditionally so dropout does not shift
        // the jitter stream of later landmarks.
        let dropped = rng.random::<f64>() < seq.landmark_dropout;
        let (ju, jv) = (jitter.sample(&mut rng), jitter.sample(&mut rng));
        if dropped {
            continue;
        }
        if k.contains(&px) {
            observations.push(Observation {
                pixel: px,
                point: lm.position,
                landmark_id,
            });
        }
        let (bu, bv) = (px.u + ju, px.v + jv);
        let x0 = (bu - radius).floor().max(0.0) as usize;
        let x1 = ((bu + radius).ceil() as isize).clamp(0, w as isize - 1) as usize;
        let y0 = (bv - radius).floor().max(0.0) as usize;
        let y1 = ((bv + radius).ceil() as isize).clamp(0, h as isize - 1) as usize;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            let dy = y as f64 - bv;
            let row = &mut canvas[y * w..(y + 1) * w];
            for (x, px) in row.iter_mut().enumerate().take(x1 + 1).skip(x0) {
                let dx = x as f64 - bu;
                *px += lm.brightness * (-(dx * dx + dy * dy) * inv2s2).exp();
            }
        }
    }
    for v in canvas.iter_mut() {
        *v = (seq.lighting_gain * *v + seq.lighting_bias).clamp(0.0, 1.0);
    }
    Frame {
        id,
        pose,
        image: GrayImage::new(k.width, k.height, canvas).expect("canvas dimensions"),
        observations,
    }
}

/// Writes a sequence in the external ingestion layout (PGM + sidecar per
/// frame, plus `intrinsics.txt`).
pub fn export_sequence(seq: &Sequence<'_>, dir: impl AsRef<Path>) -> io::Result<usize> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    ingest::write_intrinsics(dir, seq.intrinsics())?;
    let mut n = 0;
    for frame in seq.frames() {
        let obs: Vec<(Pixel, Point3<f64>)> =
            frame.observations.iter().map(|o| (o.pixel, o.point)).collect();
        ingest::write_frame(dir, frame.id, &frame.pose, &frame.image, &obs)?;
        n += 1;
    }
    Ok(n)
}
