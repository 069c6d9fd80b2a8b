//! Grayscale images, local patch normalization and PGM I/O.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data has {len} values, expected {width}x{height}")]
    Dimensions { width: u32, height: u32, len: usize },
    #[error("image contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid patch normalization parameters: {0}")]
    Params(String),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major intensity grid. Intensities are nominally in `[0, 1]`, but
/// derived images (patch-normalized, blurred) may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width as usize * height as usize {
            return Err(ImageError::Dimensions {
                width,
                height,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("from_fn produced an invalid image")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Pixel access with mirror reflection outside the image.
    #[inline]
    pub fn get_reflect(&self, x: i64, y: i64) -> f64 {
        let xr = reflect(x, self.width as usize);
        let yr = reflect(y, self.height as usize);
        self.data[yr * self.width as usize + xr]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integers).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let a = self.get_reflect(xi, yi);
        let b = self.get_reflect(xi + 1, yi);
        let c = self.get_reflect(xi, yi + 1);
        let d = self.get_reflect(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Separable Gaussian blur with mirror-reflected borders.
    pub fn gaussian_blur(&self, sigma: f64) -> GrayImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let tmp = convolve_rows(self, &kernel);
        convolve_cols(&tmp, &kernel)
    }

    /// Halves the resolution by taking every second pixel.
    pub fn decimate(&self) -> GrayImage {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        GrayImage::from_fn(w, h, |x, y| {
            self.get((2 * x).min(self.width - 1), (2 * y).min(self.height - 1))
        })
    }

    /// Exact area-weighted averaging down to `out_w × out_h` cells.
    pub fn area_average(&self, out_w: u32, out_h: u32) -> GrayImage {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let xw = coverage_weights(self.width, out_w, sx);
        let yw = coverage_weights(self.height, out_h, sy);
        let mut out = vec![0.0; out_w as usize * out_h as usize];
        for (oy, ys) in yw.iter().enumerate() {
            for (ox, xs) in xw.iter().enumerate() {
                let mut acc = 0.0;
                for &(y, wy) in ys {
                    for &(x, wx) in xs {
                        acc += wy * wx * self.get(x, y);
                    }
                }
                out[oy * out_w as usize + ox] = acc / (sx * sy);
            }
        }
        GrayImage::new(out_w, out_h, out).expect("area average dimensions")
    }
}

fn coverage_weights(n: u32, out: u32, scale: f64) -> Vec<Vec<(u32, f64)>> {
    (0..out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as u32;
            let last = (hi.ceil() as u32).min(n);
            (first..last)
                .filter_map(|i| {
                    let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// Reflect-101 border index (`-1 → 1`, `n → n-2`).
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_rows(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let (w, h) = (img.width as usize, img.height as usize);
    let r = kernel.len() / 2;
    let mut out = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * r];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for (i, p) in padded.iter_mut().enumerate() {
            *p = row[reflect(i as i64 - r as i64, w)];
        }
        let dst = &mut out[y * w..(y + 1) * w];
        for (j, kv) in kernel.iter().enumerate() {
            for (d, s) in dst.iter_mut().zip(&padded[j..j + w]) {
                *d += kv * s;
            }
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data: out,
    }
}

fn convolve_cols(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let (w, h) = (img.width as usize, img.height as usize);
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (j, kv) in kernel.iter().enumerate() {
            let src_y = reflect(y as i64 + j as i64 - r, h);
            let src = &img.data[src_y * w..(src_y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data: out,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchNormParams {
    /// Odd side length of the square window, in pixels.
    pub window: u32,
    pub epsilon: f64,
}

impl Default for PatchNormParams {
    fn default() -> Self {
        Self {
            window: 17,
            epsilon: 1e-3,
        }
    }
}

impl PatchNormParams {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(ImageError::Params(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(ImageError::Params(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Replaces every pixel by `(I(p) - μ) / (σ + ε)`, with `μ` and `σ` the mean
/// and population standard deviation of the window centered on `p`. Borders
/// are mirror-reflected. The output is not clamped.
///
/// Panics if `params` is invalid; see [`PatchNormParams::validate`].
pub fn patch_normalize(img: &GrayImage, params: &PatchNormParams) -> GrayImage {
    params.validate().expect("invalid patch normalization parameters");
    let (w, h) = (img.width as usize, img.height as usize);
    let r = (params.window / 2) as i64;
    let n = (params.window * params.window) as f64;

    // Values are shifted by a reference intensity so a constant image
    // yields exact zeros and the variance sum stays well conditioned.
    let reference = img.data[0];
    let shifted: Vec<f64> = img.data.iter().map(|v| v - reference).collect();

    let win = params.window as usize;
    let mut row_sum = vec![0.0; w * h];
    let mut row_sq = vec![0.0; w * h];
    let mut padded = vec![0.0; w + win - 1];
    for y in 0..h {
        let row = &shifted[y * w..(y + 1) * w];
        for (i, p) in padded.iter_mut().enumerate() {
            *p = row[reflect(i as i64 - r, w)];
        }
        let squares: Vec<f64> = padded.iter().map(|v| v * v).collect();
        for x in 0..w {
            row_sum[y * w + x] = padded[x..x + win].iter().sum::<f64>();
            row_sq[y * w + x] = squares[x..x + win].iter().sum::<f64>();
        }
    }

    let mut sum = vec![0.0; w * h];
    let mut sq = vec![0.0; w * h];
    for y in 0..h {
        for dy in -r..=r {
            let sy = reflect(y as i64 + dy, h);
            let (src, src2) = (&row_sum[sy * w..(sy + 1) * w], &row_sq[sy * w..(sy + 1) * w]);
            let dst = &mut sum[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
            let dst2 = &mut sq[y * w..(y + 1) * w];
            for (d, s) in dst2.iter_mut().zip(src2) {
                *d += s;
            }
        }
    }

    let data = shifted
        .iter()
        .zip(sum.iter().zip(&sq))
        .map(|(&v, (&s, &s2))| {
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            (v - mean) / (var.sqrt() + params.epsilon)
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Reads a binary (P5) 8-bit PGM, scaling intensities to `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    decode_pgm(&fs::read(path)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Pgm("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(ImageError::Pgm(format!("unsupported magic {:?}", tokens[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| ImageError::Pgm(format!("bad {what} {s:?}")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Pgm(format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let len = width as usize * height as usize;
    if width == 0 || height == 0 || bytes.len() < pos + len {
        return Err(ImageError::Pgm(format!(
            "raster holds {} bytes, expected {len}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data = bytes[pos..pos + len]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    GrayImage::new(width, height, data)
}

/// Writes a binary (P5) 8-bit PGM; intensities are clamped to `[0, 1]`.
pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Per-pixel evaluation of the normalization formula with explicit
    /// window loops and two-pass statistics.
    pub(crate) fn brute_force_normalize(img: &GrayImage, window: u32, eps: f64) -> GrayImage {
        let r = (window / 2) as i64;
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            let mut vals = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    vals.push(img.get_reflect(x as i64 + dx, y as i64 + dy));
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (img.get(x, y) - mean) / (var.sqrt() + eps)
        })
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(4, 5), 4);
        assert_eq!(reflect(-9, 3), 1);
        assert_eq!(reflect(7, 1), 0);
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        for c in [0.0, 0.3, 0.7, 1.0] {
            let out = patch_normalize(&GrayImage::filled(20, 15, c), &PatchNormParams::default());
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ramp_with_window_three_matches_brute_force() {
        let img = GrayImage::from_fn(3, 3, |x, y| (x + 3 * y) as f64 / 8.0);
        let params = PatchNormParams {
            window: 3,
            epsilon: 1e-3,
        };
        let fast = patch_normalize(&img, &params);
        let slow = brute_force_normalize(&img, 3, 1e-3);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn affine_lighting_is_nearly_cancelled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = GrayImage::from_fn(40, 30, |_, _| rng.random::<f64>());
        let j = img.map(|v| 0.5 * v + 0.2);
        let p = PatchNormParams::default();
        let (a, b) = (patch_normalize(&img, &p), patch_normalize(&j, &p));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 0.01);
        }
    }

    #[test]
    fn params_validation() {
        for (window, epsilon) in [(2, 1e-3), (1, 1e-3), (17, 0.0), (17, -1.0)] {
            assert!(PatchNormParams { window, epsilon }.validate().is_err());
        }
        assert!(PatchNormParams::default().validate().is_ok());
    }

    #[test]
    fn area_average_matches_block_mean() {
        let img = GrayImage::from_fn(8, 4, |x, y| (x * y) as f64);
        let avg = img.area_average(4, 2);
        let expect = (0..2)
            .flat_map(|y| (0..2).map(move |x| (x, y)))
            .map(|(x, y)| x as f64 * y as f64)
            .sum::<f64>()
            / 4.0;
        assert!((avg.get(0, 0) - expect).abs() < 1e-12);
        // Non-integer ratio keeps the global mean.
        let avg = img.area_average(3, 3);
        assert!((avg.mean() - img.mean()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_blur_preserves_constants() {
        let img = GrayImage::filled(10, 7, 0.25);
        let out = img.gaussian_blur(2.0);
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let img = GrayImage::from_fn(5, 3, |x, y| ((x + y) * 20) as f64 / 255.0);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = decode_pgm(with_comment).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P2\n2 1\n255\n01").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n65535\n\x00\x00\x00\x00").is_err());
    }
}
