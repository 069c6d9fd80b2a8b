//! Whole-image embedding and K-nearest-neighbour node classification.

use std::cmp::Ordering;

use thiserror::Error;

use crate::imaging::{patch_normalize, GrayImage, PatchNormParams};

/// Embedding grid: every column is pooled into one, rows are kept at
/// `EMBED_ROWS` bands.
pub const EMBED_COLS: u32 = 1;
pub const EMBED_ROWS: u32 = 256;
pub const GLOBAL_DESCRIPTOR_LEN: usize = (EMBED_COLS * EMBED_ROWS) as usize;
pub const DEFAULT_K: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CoarseError {
    #[error("classifier needs at least one labeled sample")]
    NoSamples,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("sample {index} has {len} entries, expected {expected}")]
    Length {
        index: usize,
        len: usize,
        expected: usize,
    },
}

/// L2-normalized whole-image descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor(Vec<f32>);

impl GlobalDescriptor {
    /// Unit vector along the first axis; stands in for images without
    /// any structure.
    pub fn fallback() -> Self {
        let mut v = vec![0.0; GLOBAL_DESCRIPTOR_LEN];
        v[0] = 1.0;
        Self(v)
    }

    pub fn from_raw(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn squared_distance(&self, other: &GlobalDescriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum()
    }

    pub fn cosine_similarity(&self, other: &GlobalDescriptor) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a * b) as f64).sum();
        let na: f64 = self.0.iter().map(|a| (a * a) as f64).sum::<f64>().sqrt();
        let nb: f64 = other.0.iter().map(|b| (b * b) as f64).sum::<f64>().sqrt();
        dot / (na * nb)
    }
}

/// Embeds an already-prepared image: the mean absolute intensity of each
/// of 256 horizontal bands, L2-normalized. `None` when every band is zero.
///
/// Bands average magnitudes rather than signed values: a patch-normalized
/// image is locally zero-mean, so signed means cancel out. Pooling whole
/// rows keeps the profile stable when the camera moves sideways, which
/// shifts image content horizontally but leaves its rows in place; a square
/// 16×16 grid lost most nodes at 1 m of lateral offset.
pub fn embed_prepared(img: &GrayImage) -> Option<GlobalDescriptor> {
    let magnitude = img.map(f64::abs);
    let cells = magnitude.area_average(EMBED_COLS, EMBED_ROWS);
    let norm = cells.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    Some(GlobalDescriptor(
        cells.data().iter().map(|v| (v / norm) as f32).collect(),
    ))
}

/// Patch-normalizes `img` and embeds it, falling back to
/// [`GlobalDescriptor::fallback`] for structureless images.
pub fn embed(img: &GrayImage) -> GlobalDescriptor {
    let normalized = patch_normalize(img, &PatchNormParams::default());
    embed_prepared(&normalized).unwrap_or_else(GlobalDescriptor::fallback)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeClassifier {
    samples: Vec<(GlobalDescriptor, u32)>,
    k: usize,
}

/// Stores the labeled samples verbatim.
pub fn train_classifier(
    labeled: Vec<(GlobalDescriptor, u32)>,
    k: usize,
) -> Result<NodeClassifier, CoarseError> {
    if labeled.is_empty() {
        return Err(CoarseError::NoSamples);
    }
    if k == 0 {
        return Err(CoarseError::ZeroK);
    }
    let expected = labeled[0].0.as_slice().len();
    if let Some((index, (d, _))) = labeled
        .iter()
        .enumerate()
        .find(|(_, (d, _))| d.as_slice().len() != expected)
    {
        return Err(CoarseError::Length {
            index,
            len: d.as_slice().len(),
            expected,
        });
    }
    Ok(NodeClassifier {
        samples: labeled,
        k,
    })
}

impl NodeClassifier {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> &[(GlobalDescriptor, u32)] {
        &self.samples
    }

    pub fn descriptor_len(&self) -> usize {
        self.samples[0].0.as_slice().len()
    }

    /// Majority label among the `k` nearest samples. A tie goes to the tied
    /// label owning the nearest sample.
    pub fn classify(&self, d: &GlobalDescriptor) -> u32 {
        let mut scored: Vec<(f64, u32)> = self
            .samples
            .iter()
            .map(|(s, label)| (s.squared_distance(d), *label))
            .collect();
        let by_distance = |a: &(f64, u32), b: &(f64, u32)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        let k = self.k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_distance);
            scored.truncate(k);
        }
        scored.sort_by(by_distance);

        // (label, votes, nearest distance)
        let mut tally: Vec<(u32, usize, f64)> = Vec::new();
        for &(dist, label) in &scored {
            match tally.iter_mut().find(|t| t.0 == label) {
                Some(t) => t.1 += 1,
                None => tally.push((label, 1, dist)),
            }
        }
        tally
            .into_iter()
            .min_by(|a, b| {
                b.1.cmp(&a.1)
                    .then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal))
                    .then(a.0.cmp(&b.0))
            })
            .map(|t| t.0)
            .expect("at least one neighbour")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(v: &[f32]) -> GlobalDescriptor {
        GlobalDescriptor::from_raw(v.to_vec())
    }

    #[test]
    fn constant_image_falls_back() {
        assert_eq!(embed(&GrayImage::filled(64, 48, 0.5)), GlobalDescriptor::fallback());
        assert!(embed_prepared(&GrayImage::filled(32, 32, 0.0)).is_none());
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let img = GrayImage::from_fn(64, 48, |x, y| ((x * 7 + y * 13) % 11) as f64 / 10.0);
        let a = embed(&img);
        assert_eq!(a, embed(&img));
        let n: f64 = a.as_slice().iter().map(|v| (*v as f64).powi(2)).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(a.as_slice().len(), GLOBAL_DESCRIPTOR_LEN);
    }

    #[test]
    fn rejects_empty_training_set_and_zero_k() {
        assert_eq!(train_classifier(vec![], 1), Err(CoarseError::NoSamples));
        assert_eq!(
            train_classifier(vec![(desc(&[1.0, 0.0]), 0)], 0),
            Err(CoarseError::ZeroK)
        );
        assert!(matches!(
            train_classifier(vec![(desc(&[1.0, 0.0]), 0), (desc(&[1.0]), 1)], 1),
            Err(CoarseError::Length { index: 1, .. })
        ));
    }

    #[test]
    fn single_sample_always_wins() {
        let c = train_classifier(vec![(desc(&[1.0, 0.0]), 4)], 1).unwrap();
        assert_eq!(c.classify(&desc(&[0.0, 1.0])), 4);
        assert_eq!(c.classify(&desc(&[1.0, 0.0])), 4);
    }

    #[test]
    fn majority_beats_single_nearest() {
        let c = train_classifier(
            vec![
                (desc(&[0.0, 0.0]), 1),
                (desc(&[1.0, 0.0]), 0),
                (desc(&[0.0, 1.1]), 0),
                (desc(&[9.0, 9.0]), 2),
            ],
            3,
        )
        .unwrap();
        assert_eq!(c.classify(&desc(&[0.1, 0.1])), 0);
    }

    #[test]
    fn tie_goes_to_nearest_label() {
        let c = train_classifier(
            vec![
                (desc(&[1.0, 0.0]), 0),
                (desc(&[0.0, 2.0]), 1),
                (desc(&[0.5, 0.0]), 1),
                (desc(&[3.0, 0.0]), 0),
            ],
            4,
        )
        .unwrap();
        assert_eq!(c.classify(&desc(&[0.0, 0.0])), 1);
    }
}
