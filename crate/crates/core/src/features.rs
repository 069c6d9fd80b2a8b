//! Scale-space blob keypoints, patch descriptors and ratio-test matching.
//!
//! Keypoints are maxima of the scale-normalized determinant of the Hessian
//! over three octaves. The descriptor is an 8×8 grid of intensities sampled
//! around the keypoint at its detection scale, flattened and L2-normalized.

use std::cmp::Ordering;

use crate::geometry::Pixel;
use crate::imaging::{gaussian_kernel, reflect, GrayImage};

/// Descriptor grid side; descriptors have `GRID * GRID` entries.
pub const GRID: usize = 8;
pub const DESCRIPTOR_LEN: usize = GRID * GRID;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub position: Pixel,
    /// Detection scale (Gaussian σ) in full-resolution pixels.
    pub scale: f64,
    pub response: f64,
}

/// L2-normalized descriptor vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(Vec<f32>);

impl Descriptor {
    /// Normalizes `values`; `None` if they are all zero or non-finite.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return None;
        }
        Some(Self(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    /// Wraps stored values without renormalizing them.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        squared_distance(&self.0, &other.0).sqrt()
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub octaves: usize,
    /// σ of the first level of every octave, in octave pixels.
    pub base_sigma: f64,
    /// Minimum scale-normalized Hessian determinant.
    pub response_threshold: f64,
    /// Descriptor sample spacing in units of the detection scale.
    pub descriptor_step: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            octaves: 3,
            base_sigma: 1.6,
            response_threshold: 4e-3,
            descriptor_step: 2.5,
        }
    }
}

const LEVELS: usize = 5;

fn level_sigma(base: f64, level: f64) -> f64 {
    base * 2f64.powf(level / 2.0)
}

/// Single-precision image plane used inside the scale space.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn from_image(img: &GrayImage) -> Self {
        Self {
            w: img.width() as usize,
            h: img.height() as usize,
            data: img.data().iter().map(|&v| v as f32).collect(),
        }
    }

    /// Separable Gaussian blur with reflect-101 borders.
    fn blur(&self, sigma: f64) -> Plane {
        let kernel: Vec<f32> = gaussian_kernel(sigma).iter().map(|&v| v as f32).collect();
        let r = kernel.len() / 2;
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0f32; w * h];
        let mut padded = vec![0.0f32; w + 2 * r];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            for (i, p) in padded.iter_mut().enumerate() {
                *p = row[reflect(i as i64 - r as i64, w)];
            }
            let dst = &mut tmp[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(&padded[r..r + w]) {
                *d = kernel[r] * s;
            }
            for j in 1..=r {
                let kv = kernel[r + j];
                let (lo, hi) = (&padded[r - j..r - j + w], &padded[r + j..r + j + w]);
                for ((d, a), b) in dst.iter_mut().zip(lo).zip(hi) {
                    *d += kv * (a + b);
                }
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            let dst = &mut out[y * w..(y + 1) * w];
            let center = &tmp[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(center) {
                *d = kernel[r] * s;
            }
            for j in 1..=r {
                let kv = kernel[r + j];
                let ya = reflect(y as i64 - j as i64, h);
                let yb = reflect((y + j) as i64, h);
                let (lo, hi) = (&tmp[ya * w..(ya + 1) * w], &tmp[yb * w..(yb + 1) * w]);
                for ((d, a), b) in dst.iter_mut().zip(lo).zip(hi) {
                    *d += kv * (a + b);
                }
            }
        }
        Plane { w, h, data: out }
    }

    /// Keeps every second pixel.
    fn decimate(&self) -> Plane {
        let (w, h) = ((self.w / 2).max(1), (self.h / 2).max(1));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let src = (2 * y).min(self.h - 1) * self.w;
            data.extend((0..w).map(|x| self.data[src + (2 * x).min(self.w - 1)]));
        }
        Plane { w, h, data }
    }

    fn get_reflect(&self, x: i64, y: i64) -> f64 {
        self.data[reflect(y, self.h) * self.w + reflect(x, self.w)] as f64
    }

    fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as i64, y0 as i64);
        let a = self.get_reflect(xi, yi);
        let b = self.get_reflect(xi + 1, yi);
        let c = self.get_reflect(xi, yi + 1);
        let d = self.get_reflect(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }
}

struct Octave {
    /// Power-of-two factor from octave pixels to input pixels.
    step: f64,
    w: usize,
    h: usize,
    images: Vec<Plane>,
    responses: Vec<Vec<f32>>,
    laplacians: Vec<Vec<f32>>,
}

fn hessian_maps(img: &Plane, sigma: f64) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (img.w, img.h);
    let d = &img.data;
    let norm = sigma.powi(4) as f32;
    let mut det = vec![0.0f32; w * h];
    let mut lap = vec![0.0f32; w * h];
    if w < 3 || h < 3 {
        return (det, lap);
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let c = d[i];
            let dxx = d[i + 1] - 2.0 * c + d[i - 1];
            let dyy = d[i + w] - 2.0 * c + d[i - w];
            let dxy = (d[i + w + 1] - d[i + w - 1] - d[i - w + 1] + d[i - w - 1]) * 0.25;
            det[i] = norm * (dxx * dyy - dxy * dxy);
            lap[i] = dxx + dyy;
        }
    }
    (det, lap)
}

fn build_octaves(img: &GrayImage, cfg: &DetectorConfig) -> Vec<Octave> {
    let mut octaves = Vec::with_capacity(cfg.octaves);
    let mut base = Plane::from_image(img).blur(cfg.base_sigma);
    let mut step = 1.0;
    for _ in 0..cfg.octaves {
        if base.w < 8 || base.h < 8 {
            break;
        }
        let mut images = Vec::with_capacity(LEVELS);
        let (w, h) = (base.w, base.h);
        images.push(base);
        for k in 1..LEVELS {
            let prev = level_sigma(cfg.base_sigma, (k - 1) as f64);
            let cur = level_sigma(cfg.base_sigma, k as f64);
            let inc = (cur * cur - prev * prev).sqrt();
            let next = images[k - 1].blur(inc);
            images.push(next);
        }
        let (responses, laplacians) = images
            .iter()
            .enumerate()
            .map(|(k, im)| hessian_maps(im, level_sigma(cfg.base_sigma, k as f64)))
            .unzip();
        // Level 2 carries twice the base blur: decimated, it seeds the next octave.
        base = images[2].decimate();
        octaves.push(Octave {
            step,
            w,
            h,
            images,
            responses,
            laplacians,
        });
        step *= 2.0;
    }
    octaves
}

/// Fits a quadratic through the 3×3×3 neighbourhood and returns the offset
/// of its extremum in (x, y, level), or `None` if the fit is unusable.
fn refine(oct: &Octave, k: usize, x: usize, y: usize, w: usize) -> Option<[f64; 3]> {
    let i = y * w + x;
    let r = |k: usize, i: usize| oct.responses[k][i] as f64;
    let c = r(k, i);
    let gx = (r(k, i + 1) - r(k, i - 1)) * 0.5;
    let gy = (r(k, i + w) - r(k, i - w)) * 0.5;
    let gs = (r(k + 1, i) - r(k - 1, i)) * 0.5;
    let hxx = r(k, i + 1) - 2.0 * c + r(k, i - 1);
    let hyy = r(k, i + w) - 2.0 * c + r(k, i - w);
    let hss = r(k + 1, i) - 2.0 * c + r(k - 1, i);
    let hxy = (r(k, i + w + 1) - r(k, i + w - 1) - r(k, i - w + 1) + r(k, i - w - 1)) * 0.25;
    let hxs = (r(k + 1, i + 1) - r(k + 1, i - 1) - r(k - 1, i + 1) + r(k - 1, i - 1)) * 0.25;
    let hys = (r(k + 1, i + w) - r(k + 1, i - w) - r(k - 1, i + w) + r(k - 1, i - w)) * 0.25;
    let hess = nalgebra::Matrix3::new(hxx, hxy, hxs, hxy, hyy, hys, hxs, hys, hss);
    let grad = nalgebra::Vector3::new(gx, gy, gs);
    let off = hess.lu().solve(&(-grad))?;
    if off.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
        return None;
    }
    Some([off.x, off.y, off.z])
}

fn describe(
    oct: &Octave,
    level: usize,
    pos_oct: (f64, f64),
    sigma_oct: f64,
    cfg: &DetectorConfig,
) -> Option<Descriptor> {
    // One level coarser than detection: neighbouring blobs that drift with
    // viewpoint still overlap their template positions.
    let img = &oct.images[level + 1];
    let step = cfg.descriptor_step * sigma_oct;
    let half = (GRID as f64 - 1.0) / 2.0;
    let mut values = [0.0; DESCRIPTOR_LEN];
    for gy in 0..GRID {
        for gx in 0..GRID {
            let sx = pos_oct.0 + (gx as f64 - half) * step;
            let sy = pos_oct.1 + (gy as f64 - half) * step;
            values[gy * GRID + gx] = img.sample_bilinear(sx, sy);
        }
    }
    Descriptor::from_values(&values)
}

/// Detects up to `max_keypoints` bright blobs with the default configuration.
/// Results are sorted by descending response.
pub fn detect_and_describe(img: &GrayImage, max_keypoints: usize) -> Vec<(Keypoint, Descriptor)> {
    detect_and_describe_with(img, max_keypoints, &DetectorConfig::default())
}

pub fn detect_and_describe_with(
    img: &GrayImage,
    max_keypoints: usize,
    cfg: &DetectorConfig,
) -> Vec<(Keypoint, Descriptor)> {
    assert!(max_keypoints >= 1, "max_keypoints must be at least 1");
    let octaves = build_octaves(img, cfg);
    let (iw, ih) = (img.width() as f64, img.height() as f64);
    let mut out = Vec::new();
    for oct in &octaves {
        let (w, h) = (oct.w, oct.h);
        for k in 1..LEVELS - 1 {
            let resp = &oct.responses[k];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let i = y * w + x;
                    let v = resp[i];
                    if (v as f64) <= cfg.response_threshold || oct.laplacians[k][i] >= 0.0 {
                        continue;
                    }
                    if !is_strict_max(oct, k, i, w, v) {
                        continue;
                    }
                    let off = if x >= 2 && y >= 2 && x + 2 < w && y + 2 < h {
                        refine(oct, k, x, y, w).unwrap_or([0.0; 3])
                    } else {
                        [0.0; 3]
                    };
                    let pos_oct = (x as f64 + off[0], y as f64 + off[1]);
                    let sigma_oct = level_sigma(cfg.base_sigma, k as f64 + off[2]);
                    // Octave pixel centers sit on input pixel centers (decimation keeps even pixels).
                    let position = Pixel::new(pos_oct.0 * oct.step, pos_oct.1 * oct.step);
                    if position.u < 0.0 || position.v < 0.0 || position.u >= iw || position.v >= ih
                    {
                        continue;
                    }
                    if let Some(desc) = describe(oct, k, pos_oct, sigma_oct, cfg) {
                        out.push((
                            Keypoint {
                                position,
                                scale: sigma_oct * oct.step,
                                response: v as f64,
                            },
                            desc,
                        ));
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.0.response
            .partial_cmp(&a.0.response)
            .unwrap_or(Ordering::Equal)
            .then(a.0.position.v.total_cmp(&b.0.position.v))
            .then(a.0.position.u.total_cmp(&b.0.position.u))
    });
    out.truncate(max_keypoints);
    out
}

fn is_strict_max(oct: &Octave, k: usize, i: usize, w: usize, v: f32) -> bool {
    let offsets = [
        -(w as isize) - 1,
        -(w as isize),
        -(w as isize) + 1,
        -1,
        0,
        1,
        w as isize - 1,
        w as isize,
        w as isize + 1,
    ];
    for (dk, r) in oct.responses[k - 1..=k + 1].iter().enumerate() {
        for &o in &offsets {
            if dk == 1 && o == 0 {
                continue;
            }
            if r[(i as isize + o) as usize] >= v {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query_index: usize,
    pub train_index: usize,
    pub distance: f64,
}

/// Default nearest/second-nearest distance ratio.
pub const DEFAULT_RATIO: f64 = 0.7;

/// Exhaustive nearest-neighbour matching with the ratio test. A query is
/// matched to its nearest train descriptor iff `d1 / d2 < ratio`; with a
/// single train descriptor the nearest is always accepted. Several queries
/// may share a train descriptor.
pub fn match_descriptors(query: &[Descriptor], train: &[Descriptor], ratio: f64) -> Vec<Match> {
    assert!(ratio > 0.0 && ratio < 1.0, "ratio must lie in (0, 1)");
    let mut out = Vec::new();
    if train.is_empty() {
        return out;
    }
    for (qi, q) in query.iter().enumerate() {
        let (mut best, mut second) = ((usize::MAX, f64::INFINITY), f64::INFINITY);
        for (ti, t) in train.iter().enumerate() {
            let d = squared_distance(q.as_slice(), t.as_slice());
            if d < best.1 {
                second = best.1;
                best = (ti, d);
            } else if d < second {
                second = d;
            }
        }
        let (d1, d2) = (best.1.sqrt(), second.sqrt());
        let accept = if train.len() == 1 {
            true
        } else {
            d1 < ratio * d2
        };
        if accept {
            out.push(Match {
                query_index: qi,
                train_index: best.0,
                distance: d1,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn blob_image(w: u32, h: u32, blobs: &[(f64, f64, f64, f64)]) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            blobs
                .iter()
                .map(|&(cx, cy, sigma, amp)| {
                    let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    amp * (-r2 / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        })
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        assert!(detect_and_describe(&GrayImage::filled(64, 64, 0.4), 100).is_empty());
    }

    #[test]
    fn single_blob_gives_one_keypoint_at_its_center() {
        let img = blob_image(80, 80, &[(40.0, 40.0, 3.0, 1.0)]);
        let kps = detect_and_describe(&img, 100);
        assert_eq!(kps.len(), 1, "{kps:?}");
        let p = kps[0].0.position;
        assert!(p.distance(&Pixel::new(40.0, 40.0)) < 1.0, "{p:?}");
        assert!((kps[0].0.scale - 3.0).abs() < 1.0, "{}", kps[0].0.scale);
    }

    #[test]
    fn subpixel_blob_center_is_recovered() {
        let img = blob_image(80, 80, &[(40.3, 37.6, 2.5, 0.8)]);
        let kps = detect_and_describe(&img, 100);
        assert_eq!(kps.len(), 1);
        assert!(kps[0].0.position.distance(&Pixel::new(40.3, 37.6)) < 0.25);
    }

    #[test]
    fn identical_blobs_have_identical_descriptors() {
        let img = blob_image(120, 80, &[(30.0, 40.0, 3.0, 1.0), (90.0, 40.0, 3.0, 1.0)]);
        let kps = detect_and_describe(&img, 100);
        assert_eq!(kps.len(), 2);
        assert!(kps[0].1.distance(&kps[1].1) < 1e-6);
    }

    #[test]
    fn max_keypoints_truncates_by_response() {
        let blobs: Vec<_> = (0..6)
            .map(|i| (20.0 + 30.0 * i as f64, 30.0, 3.0, 0.4 + 0.1 * i as f64))
            .collect();
        let img = blob_image(200, 60, &blobs);
        let all = detect_and_describe(&img, 100);
        assert_eq!(all.len(), 6);
        let top = detect_and_describe(&img, 2);
        assert_eq!(top.len(), 2);
        assert!(top[0].0.response >= top[1].0.response);
        assert!((top[0].0.position.u - 170.0).abs() < 1.0);
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let img = blob_image(100, 100, &[(30.0, 40.0, 2.5, 1.0), (36.0, 44.0, 2.5, 0.5)]);
        for (_, d) in detect_and_describe(&img, 10) {
            let n: f64 = d.as_slice().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(d.len(), DESCRIPTOR_LEN);
        }
    }

    #[test]
    fn single_train_descriptor_is_always_accepted() {
        let d = Descriptor::from_values(&[1.0, 2.0, 3.0]).unwrap();
        let m = match_descriptors(&[d.clone()], &[d], 0.7);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].distance, 0.0);
    }

    #[test]
    fn equidistant_train_descriptors_are_rejected() {
        let q = Descriptor::from_values(&[1.0, 0.0]).unwrap();
        let a = Descriptor::from_values(&[1.0, 1.0]).unwrap();
        let b = Descriptor::from_values(&[1.0, -1.0]).unwrap();
        assert!(match_descriptors(&[q], &[a, b], 0.7).is_empty());
    }

    #[test]
    fn zero_descriptor_is_rejected() {
        assert!(Descriptor::from_values(&[0.0; 4]).is_none());
    }
}
