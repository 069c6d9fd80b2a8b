//! WebAssembly bindings for the browser demo in `www/`. Three operations:
//! patch normalization of a rendered (and relit) frame, a PnP RANSAC trial
//! on synthetic correspondences, and node placement along the loop.
//!
//! Images cross the boundary as row-major 8-bit gray buffers and point sets
//! as flat `[x0, y0, x1, y1, ...]` arrays.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use topoloc::fine::{pnp_ransac, reprojection_residual, Correspondence, PnPParams};
use topoloc::geometry::{rotation_distance, translation_distance, CameraIntrinsics, Pixel, Pose};
use topoloc::imaging::{patch_normalize, GrayImage, PatchNormParams};
use topoloc::mapping::{update_and_test, DistanceAccumulator, NodeSpacingPolicy};
use topoloc::synthworld::{generate_world, Sequence, SequenceConfig, World, WorldConfig};

/// Normalized values are shown over `[-DISPLAY_RANGE, DISPLAY_RANGE]`.
const DISPLAY_RANGE: f64 = 3.0;

fn to_bytes(img: &GrayImage, f: impl Fn(f64) -> f64) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (f(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// The synthetic world seen by the demo camera.
#[wasm_bindgen]
pub struct Scene {
    world: World,
    intrinsics: CameraIntrinsics,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Scene {
        let world = generate_world(&WorldConfig {
            seed,
            ..WorldConfig::default()
        });
        Scene {
            world,
            intrinsics: CameraIntrinsics::default(),
        }
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Loop length in meters.
    pub fn path_length(&self) -> f64 {
        self.world.path.length()
    }

    /// Frame at arc length `s`, shifted sideways by `offset` and relit as
    /// `gain·I + bias`.
    pub fn render(&self, s: f64, offset: f64, gain: f64, bias: f64) -> Result<Vec<u8>, JsError> {
        js(self.try_render(s, offset, gain, bias))
    }

    /// Patch-normalized version of [`Scene::render`].
    pub fn render_normalized(
        &self,
        s: f64,
        offset: f64,
        gain: f64,
        bias: f64,
        window: u32,
        epsilon: f64,
    ) -> Result<Vec<u8>, JsError> {
        js(self.try_render_normalized(s, offset, gain, bias, window, epsilon))
    }

    /// Sampled loop centreline, one point every `step` meters.
    pub fn path_xy(&self, step: f64) -> Vec<f64> {
        let n = (self.world.path.length() / step.max(0.1)).ceil() as usize;
        (0..=n)
            .flat_map(|i| {
                let (p, _) = self.world.path.at(i as f64 * self.world.path.length() / n as f64);
                [p.x, p.y]
            })
            .collect()
    }

    pub fn landmarks_xy(&self) -> Vec<f64> {
        self.world
            .landmarks
            .iter()
            .flat_map(|l| [l.position.x, l.position.y])
            .collect()
    }

    /// Where nodes fall along the default mapping sequence for this spacing
    /// policy.
    pub fn node_positions(&self, d_thresh: f64, lambda: f64) -> Result<Vec<f64>, JsError> {
        js(self.try_node_positions(d_thresh, lambda))
    }
}

impl Scene {
    fn frame(&self, s: f64, offset: f64, gain: f64, bias: f64) -> Result<GrayImage, String> {
        let cfg = SequenceConfig {
            frame_spacing: self.world.path.length(),
            start: s,
            lateral_offset: offset,
            lighting_gain: gain,
            lighting_bias: bias,
            ..SequenceConfig::default()
        };
        cfg.validate()?;
        Ok(Sequence::new(&self.world, self.intrinsics, cfg).frame(0).image)
    }

    pub fn try_render(&self, s: f64, offset: f64, gain: f64, bias: f64) -> Result<Vec<u8>, String> {
        Ok(to_bytes(&self.frame(s, offset, gain, bias)?, |v| v))
    }

    pub fn try_render_normalized(
        &self,
        s: f64,
        offset: f64,
        gain: f64,
        bias: f64,
        window: u32,
        epsilon: f64,
    ) -> Result<Vec<u8>, String> {
        normalized_bytes(&self.frame(s, offset, gain, bias)?, window, epsilon)
    }

    pub fn try_node_positions(&self, d_thresh: f64, lambda: f64) -> Result<Vec<f64>, String> {
        let policy = NodeSpacingPolicy::new(d_thresh, lambda).map_err(|e| e.to_string())?;
        let seq = Sequence::new(&self.world, self.intrinsics, SequenceConfig::default());
        Ok(node_poses(seq.poses(), &policy)
            .iter()
            .flat_map(|p| [p.translation().x, p.translation().y])
            .collect())
    }
}

/// `JsError` only exists on the JS side, so errors stay strings until they
/// cross the boundary.
fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

fn normalized_bytes(img: &GrayImage, window: u32, epsilon: f64) -> Result<Vec<u8>, String> {
    let params = PatchNormParams { window, epsilon };
    params.validate().map_err(|e| e.to_string())?;
    let n = patch_normalize(img, &params);
    Ok(to_bytes(&n, |v| 0.5 + 0.5 * v / DISPLAY_RANGE))
}

/// Patch-normalizes an arbitrary gray image, e.g. one loaded by the user.
#[wasm_bindgen]
pub fn normalize_gray(
    pixels: &[u8],
    width: u32,
    height: u32,
    window: u32,
    epsilon: f64,
) -> Result<Vec<u8>, JsError> {
    js(try_normalize_gray(pixels, width, height, window, epsilon))
}

pub fn try_normalize_gray(
    pixels: &[u8],
    width: u32,
    height: u32,
    window: u32,
    epsilon: f64,
) -> Result<Vec<u8>, String> {
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let img = GrayImage::new(width, height, data).map_err(|e| e.to_string())?;
    normalized_bytes(&img, window, epsilon)
}

fn node_poses(poses: &[Pose], policy: &NodeSpacingPolicy) -> Vec<Pose> {
    let Some(first) = poses.first() else {
        return Vec::new();
    };
    let mut acc = DistanceAccumulator::new(*first);
    let mut out = vec![*first];
    for p in &poses[1..] {
        let (next, create) = update_and_test(acc, p, policy);
        acc = next;
        if create {
            out.push(*p);
        }
    }
    out
}

/// Outcome of one RANSAC run on synthetic correspondences.
#[wasm_bindgen]
pub struct PnpTrial {
    solved: bool,
    translation_error: f64,
    rotation_error_deg: f64,
    iterations: usize,
    observations: Vec<f64>,
    reprojections: Vec<f64>,
    true_inlier: Vec<u8>,
    found_inlier: Vec<u8>,
}

#[wasm_bindgen]
impl PnpTrial {
    pub fn solved(&self) -> bool {
        self.solved
    }

    /// Meters; NaN when no pose was found.
    pub fn translation_error(&self) -> f64 {
        self.translation_error
    }

    pub fn rotation_error_deg(&self) -> f64 {
        self.rotation_error_deg
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn observations(&self) -> Vec<f64> {
        self.observations.clone()
    }

    /// Projections under the estimated pose (empty when unsolved).
    pub fn reprojections(&self) -> Vec<f64> {
        self.reprojections.clone()
    }

    /// 1 where the correspondence was generated as an inlier.
    pub fn true_inliers(&self) -> Vec<u8> {
        self.true_inlier.clone()
    }

    /// 1 where RANSAC kept the correspondence.
    pub fn found_inliers(&self) -> Vec<u8> {
        self.found_inlier.clone()
    }

    pub fn inlier_recall(&self) -> f64 {
        let truth = self.true_inlier.iter().filter(|&&t| t == 1).count();
        let hit = self
            .true_inlier
            .iter()
            .zip(&self.found_inlier)
            .filter(|(t, f)| **t == 1 && **f == 1)
            .count();
        if truth == 0 {
            0.0
        } else {
            hit as f64 / truth as f64
        }
    }
}

/// Draws `points` landmarks 4–20 m in front of a random camera, replaces a
/// fraction of the observations by random pixels, perturbs the rest with
/// Gaussian noise and runs RANSAC.
#[wasm_bindgen]
pub fn pnp_trial(
    points: usize,
    outlier_fraction: f64,
    noise_px: f64,
    inlier_threshold: f64,
    seed: u64,
) -> Result<PnpTrial, JsError> {
    js(try_pnp_trial(points, outlier_fraction, noise_px, inlier_threshold, seed))
}

pub fn try_pnp_trial(
    points: usize,
    outlier_fraction: f64,
    noise_px: f64,
    inlier_threshold: f64,
    seed: u64,
) -> Result<PnpTrial, String> {
    if !(0.0..=1.0).contains(&outlier_fraction) || !(noise_px >= 0.0) {
        return Err("outlier fraction must lie in [0, 1] and noise be non-negative".into());
    }
    let k = CameraIntrinsics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = Pose::identity().retract_left(
        &Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-3.0..3.0),
            rng.random_range(-0.3..0.3),
        ),
        &Vector3::new(rng.random_range(-2.0..2.0), 0.0, rng.random_range(-2.0..2.0)),
    );
    let noise = Normal::new(0.0, noise_px).map_err(|e| e.to_string())?;
    let outliers = (points as f64 * outlier_fraction).round() as usize;
    let mut corr = Vec::with_capacity(points);
    let mut true_inlier = Vec::with_capacity(points);
    for i in 0..points {
        let px = Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let landmark = truth.transform_point(&k.backproject(&px, rng.random_range(4.0..20.0)));
        let obs = if i < outliers {
            Pixel::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
        } else {
            Pixel::new(px.u + noise.sample(&mut rng), px.v + noise.sample(&mut rng))
        };
        corr.push(Correspondence::new(landmark, obs));
        true_inlier.push(u8::from(i >= outliers));
    }
    let params = PnPParams {
        inlier_threshold,
        ..PnPParams::default()
    };
    params.validate().map_err(|e| e.to_string())?;
    let observations = corr.iter().flat_map(|c| [c.observation.u, c.observation.v]).collect();
    let mut trial = PnpTrial {
        solved: false,
        translation_error: f64::NAN,
        rotation_error_deg: f64::NAN,
        iterations: 0,
        observations,
        reprojections: Vec::new(),
        true_inlier,
        found_inlier: vec![0; points],
    };
    if let Ok(res) = pnp_ransac(&corr, &k, &params, seed) {
        let camera_from_node = res.node_from_camera.inverse();
        trial.solved = true;
        trial.translation_error = translation_distance(&res.node_from_camera, &truth);
        trial.rotation_error_deg = rotation_distance(&res.node_from_camera, &truth).to_degrees();
        trial.iterations = res.iterations;
        trial.reprojections = corr
            .iter()
            .flat_map(|c| {
                let r = reprojection_residual(&camera_from_node, c, &k)
                    .map_or([f64::NAN, f64::NAN], |r| [r.x, r.y]);
                [c.observation.u + r[0], c.observation.v + r[1]]
            })
            .collect();
        for i in res.inlier_indices {
            trial.found_inlier[i] = 1;
        }
    }
    Ok(trial)
}
