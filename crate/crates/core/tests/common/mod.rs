//! Independent oracles shared by the integration tests. None of them call
//! into the crate except for plain data accessors.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use topoloc::geometry::Pose;
use topoloc::imaging::GrayImage;

pub type M3 = [[f64; 3]; 3];
pub type M4 = [[f64; 4]; 4];

/// Rotation matrix of a unit quaternion `(w, x, y, z)`, written out.
pub fn quat_to_matrix(q: [f64; 4]) -> M3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn homogeneous(q: [f64; 4], t: [f64; 3]) -> M4 {
    let r = quat_to_matrix(q);
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = t[i];
    }
    m[3][3] = 1.0;
    m
}

pub fn pose_matrix(p: &Pose) -> M4 {
    let t = p.translation();
    homogeneous(p.quaternion_wxyz(), [t.x, t.y, t.z])
}

pub fn matmul4(a: &M4, b: &M4) -> M4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Inverse of a rigid transform: `[Rᵀ | −Rᵀt]`.
pub fn rigid_inverse(m: &M4) -> M4 {
    let mut inv = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = m[j][i];
        }
        inv[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    inv[3][3] = 1.0;
    inv
}

pub fn max_abs_diff4(a: &M4, b: &M4) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            d = d.max((a[i][j] - b[i][j]).abs());
        }
    }
    d
}

/// Rotation angle between the rotation blocks of two transforms, from the
/// skew and trace parts of `RaᵀRb` (accurate at small angles too).
pub fn matrix_rotation_angle(a: &M4, b: &M4) -> f64 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[k][i] * b[k][j]).sum();
        }
    }
    let trace = r[0][0] + r[1][1] + r[2][2];
    let s = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let sin = 0.5 * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    sin.atan2(0.5 * (trace - 1.0))
}

pub fn matrix_translation_distance(a: &M4, b: &M4) -> f64 {
    (0..3).map(|i| (a[i][3] - b[i][3]).powi(2)).sum::<f64>().sqrt()
}

pub fn random_unit_quaternion(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 {
            return q.map(|v| v / n);
        }
    }
}

pub fn random_pose(rng: &mut impl Rng, translation_range: f64) -> Pose {
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-translation_range..translation_range));
    Pose::from_parts(t, random_unit_quaternion(rng))
}

/// Brute-force patch normalization: every window is summed explicitly,
/// with reflect-101 borders and the population standard deviation.
pub fn brute_force_normalize(img: &GrayImage, window: u32, epsilon: f64) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = (window / 2) as i64;
    let reflect = |i: i64, n: i64| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i;
            } else if i >= n {
                i = 2 * (n - 1) - i;
            } else {
                return i as usize;
            }
        }
    };
    let data = img.data();
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        for x in 0..w {
            let mut values = Vec::with_capacity((window * window) as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    values.push(data[reflect(y + dy, h) * w as usize + reflect(x + dx, w)]);
                }
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            out.push((data[(y * w + x) as usize] - mean) / (var.sqrt() + epsilon));
        }
    }
    out
}

/// Population standard deviation of the reflect-101 window around each pixel.
pub fn window_sigma(img: &GrayImage, window: u32) -> Vec<f64> {
    let r = (window / 2) as i64;
    let mut out = Vec::with_capacity(img.data().len());
    for y in 0..img.height() as i64 {
        for x in 0..img.width() as i64 {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = img.get_reflect(x + dx, y + dy);
                    s += v;
                    s2 += v * v;
                    n += 1.0;
                }
            }
            let mean = s / n;
            out.push((s2 / n - mean * mean).max(0.0).sqrt());
        }
    }
    out
}

/// Node-creation decisions along `poses`, replaying the distance
/// accumulator on 4×4 matrices. Index 0 (the first node) is not reported.
pub fn node_decisions(poses: &[Pose], d_thresh: f64, lambda: f64) -> Vec<bool> {
    let mats: Vec<M4> = poses.iter().map(pose_matrix).collect();
    let (mut dt, mut dr) = (0.0, 0.0);
    let mut out = Vec::new();
    for pair in mats.windows(2) {
        dt += matrix_translation_distance(&pair[0], &pair[1]);
        dr += matrix_rotation_angle(&pair[0], &pair[1]);
        let create = dt + lambda * dr > d_thresh;
        if create {
            dt = 0.0;
            dr = 0.0;
        }
        out.push(create);
    }
    out
}
