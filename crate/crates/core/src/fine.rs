//! Metric pose from 3D↔2D correspondences: a 6-point DLT inside RANSAC,
//! then Levenberg–Marquardt on the reprojection error.
//!
//! Public poses are `node_from_camera`. Internally the solvers work on
//! `camera_from_node`, which maps landmarks straight into the camera.

use nalgebra::{Matrix2x6, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose, Z_MIN};

/// Minimal sample size of the DLT solver.
pub const MINIMAL_SAMPLE: usize = 6;

/// Relative size of the second-smallest singular value of the DLT design
/// matrix below which a sample is treated as degenerate.
const DEGENERACY_RATIO: f64 = 1e-7;
/// Consecutive rejected LM steps after which the solver gives up.
const MAX_ESCALATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    /// Landmark in the node frame.
    pub landmark: Point3<f64>,
    pub observation: Pixel,
}

impl Correspondence {
    pub fn new(landmark: Point3<f64>, observation: Pixel) -> Self {
        Self {
            landmark,
            observation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnPParams {
    /// Reprojection error below which a correspondence is an inlier, pixels.
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub lm_max_iters: usize,
    pub lm_lambda0: f64,
}

impl Default for PnPParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            confidence: 0.99,
            max_iterations: 1000,
            min_inliers: 8,
            lm_max_iters: 100,
            lm_lambda0: 1e-3,
        }
    }
}

impl PnPParams {
    pub fn validate(&self) -> Result<(), PnPError> {
        let ok = self.inlier_threshold > 0.0
            && self.confidence > 0.0
            && self.confidence < 1.0
            && self.max_iterations > 0
            && self.min_inliers > 0
            && self.lm_max_iters > 0
            && self.lm_lambda0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PnPError::InvalidParams(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnPResult {
    pub node_from_camera: Pose,
    pub inlier_indices: Vec<usize>,
    /// Mean reprojection error over the inliers, pixels.
    pub mean_reprojection_error: f64,
    /// Hypotheses scored (degenerate samples excluded).
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnPError {
    #[error("need at least {required} correspondences, got {found}")]
    TooFewCorrespondences { found: usize, required: usize },
    #[error("best hypothesis had {best} inliers, {required} required")]
    InsufficientInliers { best: usize, required: usize },
    #[error("initial pose puts only {found} points in front of the camera")]
    BehindCamera { found: usize },
    #[error("degenerate point configuration")]
    Degenerate,
    #[error("invalid PnP parameters: {0}")]
    InvalidParams(String),
}

/// Projection residual `project(p) − observation` of one correspondence
/// under `camera_from_node`; `None` if the point is behind the camera.
pub fn reprojection_residual(
    camera_from_node: &Pose,
    c: &Correspondence,
    k: &CameraIntrinsics,
) -> Option<Vector2<f64>> {
    let px = k.project_camera_point(&camera_from_node.transform_point(&c.landmark))?;
    Some(Vector2::new(px.u - c.observation.u, px.v - c.observation.v))
}

/// Jacobian of the projected pixel with respect to a left increment
/// `(ω, v)` applied to `camera_from_node` (see [`Pose::retract_left`]).
pub fn reprojection_jacobian(
    camera_from_node: &Pose,
    landmark: &Point3<f64>,
    k: &CameraIntrinsics,
) -> Option<Matrix2x6<f64>> {
    let p = camera_from_node.transform_point(landmark);
    if p.z <= Z_MIN {
        return None;
    }
    let iz = 1.0 / p.z;
    let dproj = nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    );
    // d(exp(ω)p)/dω = −[p]×, d/dv = I.
    let skew = Matrix3::new(0.0, p.z, -p.y, -p.z, 0.0, p.x, p.y, -p.x, 0.0);
    let mut j = Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * skew));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    Some(j)
}

fn reprojection_error(camera_from_node: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> f64 {
    reprojection_residual(camera_from_node, c, k).map_or(f64::INFINITY, |r| r.norm())
}

/// Factor that brings a mean distance of `dist_sum / n` to `target`.
fn normalizing_scale(dist_sum: f64, n: usize, target: f64) -> f64 {
    let mean = dist_sum / n as f64;
    if mean > 0.0 {
        target / mean
    } else {
        1.0
    }
}

/// `camera_from_node` from exactly six correspondences, or `None` when the
/// sample is degenerate.
fn dlt_camera_from_node(corr: &[Correspondence], k: &CameraIntrinsics) -> Option<Pose> {
    debug_assert_eq!(corr.len(), MINIMAL_SAMPLE);
    let n = corr.len();
    let xs: Vec<(f64, f64)> = corr.iter().map(|c| k.normalize(&c.observation)).collect();

    let c3 = corr
        .iter()
        .fold(Vector3::zeros(), |acc, c| acc + c.landmark.coords)
        / n as f64;
    let s3 = normalizing_scale(
        corr.iter().map(|c| (c.landmark.coords - c3).norm()).sum(),
        n,
        3f64.sqrt(),
    );
    let c2 = xs.iter().fold((0.0, 0.0), |a, x| (a.0 + x.0, a.1 + x.1));
    let c2 = (c2.0 / n as f64, c2.1 / n as f64);
    let s2 = normalizing_scale(
        xs.iter().map(|x| (x.0 - c2.0).hypot(x.1 - c2.1)).sum(),
        n,
        2f64.sqrt(),
    );

    let mut a = SMatrix::<f64, 12, 12>::zeros();
    for (i, (c, x)) in corr.iter().zip(&xs).enumerate() {
        let p = (c.landmark.coords - c3) * s3;
        let ph = [p.x, p.y, p.z, 1.0];
        let (u, v) = ((x.0 - c2.0) * s2, (x.1 - c2.1) * s2);
        for j in 0..4 {
            a[(2 * i, j)] = ph[j];
            a[(2 * i, 8 + j)] = -u * ph[j];
            a[(2 * i + 1, 4 + j)] = ph[j];
            a[(2 * i + 1, 8 + j)] = -v * ph[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let (largest, second_smallest) = (
        svd.singular_values[order[0]],
        svd.singular_values[order[10]],
    );
    if !(largest > 0.0) || second_smallest / largest < DEGENERACY_RATIO {
        return None;
    }
    let h = vt.row(order[11]);
    let pn = SMatrix::<f64, 3, 4>::from_fn(|r, col| h[4 * r + col]);

    // Undo the normalizations: P = T2⁻¹ · Pn · T3.
    let t2_inv = Matrix3::new(1.0 / s2, 0.0, c2.0, 0.0, 1.0 / s2, c2.1, 0.0, 0.0, 1.0);
    let mut t3 = SMatrix::<f64, 4, 4>::identity() * s3;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-c3 * s3));
    let mut p = t2_inv * pn * t3;

    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    let det = m.determinant();
    if !det.is_finite() || det == 0.0 {
        return None;
    }
    if det < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    let msvd = m.svd(true, true);
    let (u, vt) = (msvd.u?, msvd.v_t?);
    let r = u * vt;
    if r.determinant() <= 0.0 {
        return None;
    }
    let scale = msvd.singular_values.mean();
    if !(scale > 0.0) {
        return None;
    }
    let t: Vector3<f64> = p.fixed_view::<3, 1>(0, 3) / scale;
    let pose = Pose::from_rotation_matrix(&r, t);
    let in_front = corr
        .iter()
        .filter(|c| pose.transform_point(&c.landmark).z > Z_MIN)
        .count();
    if in_front + 1 < n {
        return None;
    }
    Some(pose)
}

/// Pose hypothesis (`node_from_camera`) from exactly six correspondences.
pub fn pnp_minimal(corr: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose, PnPError> {
    if corr.len() != MINIMAL_SAMPLE {
        return Err(PnPError::TooFewCorrespondences {
            found: corr.len(),
            required: MINIMAL_SAMPLE,
        });
    }
    dlt_camera_from_node(corr, k)
        .map(|p| p.inverse())
        .ok_or(PnPError::Degenerate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmReport {
    /// Refined `node_from_camera`.
    pub pose: Pose,
    /// Cost (sum of squared residuals, px²) after each accepted step,
    /// starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Solves attempted, accepted or not.
    pub iterations: usize,
    /// The first escalations all failed; `pose` is the initial pose.
    pub no_progress: bool,
}

impl LmReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_history[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().unwrap()
    }
}

/// Sum of squared reprojection errors over `active`; `None` if any of them
/// falls behind the camera.
fn cost(
    camera_from_node: &Pose,
    corr: &[Correspondence],
    active: &[usize],
    k: &CameraIntrinsics,
) -> Option<f64> {
    active.iter().try_fold(0.0, |acc, &i| {
        reprojection_residual(camera_from_node, &corr[i], k).map(|r| acc + r.norm_squared())
    })
}

fn normal_equations(
    camera_from_node: &Pose,
    corr: &[Correspondence],
    active: &[usize],
    k: &CameraIntrinsics,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for &i in active {
        let c = &corr[i];
        if let (Some(r), Some(j)) = (
            reprojection_residual(camera_from_node, c, k),
            reprojection_jacobian(camera_from_node, &c.landmark, k),
        ) {
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
    }
    (h, g)
}

/// Minimizes the squared reprojection error of `corr` starting from
/// `initial` (`node_from_camera`). Points behind the initial camera are
/// ignored; steps that push a used point behind the camera are rejected.
pub fn refine_lm(
    initial: &Pose,
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    params: &PnPParams,
) -> Result<LmReport, PnPError> {
    if corr.len() < 4 {
        return Err(PnPError::TooFewCorrespondences {
            found: corr.len(),
            required: 4,
        });
    }
    let start = initial.inverse();
    let active: Vec<usize> = (0..corr.len())
        .filter(|&i| start.transform_point(&corr[i].landmark).z > Z_MIN)
        .collect();
    if active.len() < 4 {
        return Err(PnPError::BehindCamera {
            found: active.len(),
        });
    }
    let mut current = start;
    let mut current_cost = cost(&current, corr, &active, k).expect("active points are in front");
    let mut history = vec![current_cost];
    let mut mu = params.lm_lambda0;
    let mut accepted_any = false;
    let mut rejections = 0;
    let mut iterations = 0;
    let (mut h, mut g) = normal_equations(&current, corr, &active, k);

    while iterations < params.lm_max_iters {
        iterations += 1;
        let mut damped = h;
        for d in 0..6 {
            damped[(d, d)] += mu * h[(d, d)].max(1e-12);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-g)),
            None => {
                mu *= 10.0;
                rejections += 1;
                if rejections >= MAX_ESCALATIONS {
                    break;
                }
                continue;
            }
        };
        if step.norm() < 1e-12 {
            break;
        }
        let omega = Vector3::new(step[0], step[1], step[2]);
        let v = Vector3::new(step[3], step[4], step[5]);
        let candidate = current.retract_left(&omega, &v);
        match cost(&candidate, corr, &active, k) {
            Some(c) if c < current_cost => {
                let decrease = current_cost - c;
                current = candidate;
                current_cost = c;
                history.push(c);
                accepted_any = true;
                rejections = 0;
                mu = (mu / 10.0).max(1e-12);
                if decrease < 1e-10 {
                    break;
                }
                (h, g) = normal_equations(&current, corr, &active, k);
            }
            _ => {
                mu *= 10.0;
                rejections += 1;
                if rejections >= MAX_ESCALATIONS {
                    break;
                }
            }
        }
    }
    let no_progress = !accepted_any && rejections >= MAX_ESCALATIONS;
    Ok(LmReport {
        pose: if no_progress { *initial } else { current.inverse() },
        cost_history: history,
        iterations,
        no_progress,
    })
}

/// Iterations needed to draw one all-inlier sample with probability
/// `confidence` at the given inlier ratio.
fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let good = inlier_ratio.powi(MINIMAL_SAMPLE as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

fn inliers_of(
    camera_from_node: &Pose,
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    threshold: f64,
) -> Vec<usize> {
    (0..corr.len())
        .filter(|&i| reprojection_error(camera_from_node, &corr[i], k) < threshold)
        .collect()
}

/// RANSAC over 6-point DLT hypotheses followed by LM on the inliers.
/// Deterministic for a given `seed`.
pub fn pnp_ransac(
    corr: &[Correspondence],
    k: &CameraIntrinsics,
    params: &PnPParams,
    seed: u64,
) -> Result<PnPResult, PnPError> {
    params.validate()?;
    let n = corr.len();
    if n < MINIMAL_SAMPLE {
        return Err(PnPError::TooFewCorrespondences {
            found: n,
            required: MINIMAL_SAMPLE,
        });
    }
    let required = params.min_inliers.max(MINIMAL_SAMPLE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Pose, Vec<usize>)> = None;
    let mut budget = params.max_iterations;
    let (mut scored, mut attempts) = (0, 0);
    let mut sample = [Correspondence::new(Point3::origin(), Pixel::new(0.0, 0.0)); MINIMAL_SAMPLE];
    while scored < budget && attempts < 10 * params.max_iterations {
        attempts += 1;
        let idx = rand::seq::index::sample(&mut rng, n, MINIMAL_SAMPLE);
        for (slot, i) in sample.iter_mut().zip(idx.iter()) {
            *slot = corr[i];
        }
        let Some(hyp) = dlt_camera_from_node(&sample, k) else {
            continue;
        };
        scored += 1;
        let inliers = inliers_of(&hyp, corr, k, params.inlier_threshold);
        if inliers.len() > best.as_ref().map_or(0, |b| b.1.len()) {
            budget = adaptive_iterations(
                inliers.len() as f64 / n as f64,
                params.confidence,
                params.max_iterations,
            );
            best = Some((hyp, inliers));
        }
    }
    let best_count = best.as_ref().map_or(0, |b| b.1.len());
    let (hyp, inliers) = match best {
        Some(b) if b.1.len() >= required => b,
        _ => {
            return Err(PnPError::InsufficientInliers {
                best: best_count,
                required,
            })
        }
    };

    let subset: Vec<Correspondence> = inliers.iter().map(|&i| corr[i]).collect();
    let refined = refine_lm(&hyp.inverse(), &subset, k, params)?;
    let camera_from_node = refined.pose.inverse();
    let mut final_inliers = inliers_of(&camera_from_node, corr, k, params.inlier_threshold);
    let mut pose = refined.pose;
    if final_inliers.len() < required {
        // The refit drifted away from the consensus set; keep the hypothesis.
        final_inliers = inliers;
        pose = hyp.inverse();
    }
    let camera_from_node = pose.inverse();
    let mean = final_inliers
        .iter()
        .map(|&i| reprojection_error(&camera_from_node, &corr[i], k))
        .sum::<f64>()
        / final_inliers.len() as f64;
    Ok(PnPResult {
        node_from_camera: pose,
        inlier_indices: final_inliers,
        mean_reprojection_error: mean,
        iterations: scored,
    })
}
