//! Binary map file.
//!
//! Little-endian throughout:
//!
//! ```text
//! "TMAP" | u32 version
//! intrinsics: fx fy cx cy (f64) | 2 × f64 reserved (0) | width height (u32)
//! policy: d_thresh lambda (f64)
//! u32 node count, then per node:
//!   u32 id | pose tx ty tz qw qx qy qz (f64)
//!   u32 keypoint count n | n × (u v scale response) (f64)
//!   u32 descriptor length D | n × D × f32
//!   n × (x y z) (f64)
//! classifier: u32 k | u32 sample count | per sample 256 × f32, u32 label
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{NodeSpacingPolicy, TopoMetricMap, TopoNode};
use crate::coarse::{self, GlobalDescriptor, GLOBAL_DESCRIPTOR_LEN};
use crate::features::{Descriptor, Keypoint};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};

pub const MAGIC: &[u8; 4] = b"TMAP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not a map file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported map format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("map file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} unexpected bytes after the map payload")]
    TrailingBytes(usize),
    #[error("map checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("map file is inconsistent: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn pose(&mut self, p: &Pose) {
        let t = p.translation();
        for v in [t.x, t.y, t.z] {
            self.f64(v);
        }
        for v in p.quaternion_wxyz() {
            self.f64(v);
        }
    }
}

pub fn to_bytes(map: &TopoMetricMap) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let k = &map.intrinsics;
    for v in [k.fx, k.fy, k.cx, k.cy, 0.0, 0.0] {
        w.f64(v);
    }
    w.u32(k.width);
    w.u32(k.height);
    w.f64(map.policy.d_thresh);
    w.f64(map.policy.lambda);
    w.u32(map.nodes.len() as u32);
    for node in &map.nodes {
        w.u32(node.id);
        w.pose(&node.global_pose);
        w.u32(node.keypoints.len() as u32);
        for kp in &node.keypoints {
            for v in [kp.position.u, kp.position.v, kp.scale, kp.response] {
                w.f64(v);
            }
        }
        let dlen = node.descriptors.first().map_or(0, Descriptor::len);
        w.u32(dlen as u32);
        for d in &node.descriptors {
            for &v in d.as_slice() {
                w.f32(v);
            }
        }
        for p in &node.landmarks {
            for v in [p.x, p.y, p.z] {
                w.f64(v);
            }
        }
    }
    w.u32(map.classifier.k() as u32);
    w.u32(map.classifier.samples().len() as u32);
    for (d, label) in map.classifier.samples() {
        for &v in d.as_slice() {
            w.f32(v);
        }
        w.u32(*label);
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            }),
        }
    }
    /// Fails early when `count` elements of `size` bytes cannot possibly fit.
    fn reserve(&self, count: usize, size: usize) -> Result<(), FormatError> {
        let need = count.saturating_mul(size);
        let have = self.bytes.len() - self.pos;
        if need > have {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: need - have,
            });
        }
        Ok(())
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn finite(values: &[f64], what: &str) -> Result<(), FormatError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FormatError::Invalid(format!("non-finite value in {what}")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TopoMetricMap, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version { found: version });
    }

    let mut kv = [0.0; 6];
    for v in kv.iter_mut() {
        *v = r.f64()?;
    }
    let (width, height) = (r.u32()?, r.u32()?);
    let (d_thresh, lambda) = (r.f64()?, r.f64()?);

    let node_count = r.u32()? as usize;
    r.reserve(node_count, 4 + 56 + 4 + 4)?;
    let mut nodes = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let id = r.u32()?;
        let mut pv = [0.0; 7];
        for v in pv.iter_mut() {
            *v = r.f64()?;
        }
        let n = r.u32()? as usize;
        r.reserve(n, 32 + 24)?;
        let mut keypoints = Vec::with_capacity(n);
        for _ in 0..n {
            let (u, v, scale, response) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            keypoints.push(Keypoint {
                position: Pixel::new(u, v),
                scale,
                response,
            });
        }
        let dlen = r.u32()? as usize;
        r.reserve(n, dlen.saturating_mul(4))?;
        let mut descriptors = Vec::with_capacity(n);
        for _ in 0..n {
            let vals = (0..dlen).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            descriptors.push(Descriptor::from_raw(vals));
        }
        let mut landmarks = Vec::with_capacity(n);
        for _ in 0..n {
            landmarks.push(Point3::new(r.f64()?, r.f64()?, r.f64()?));
        }
        nodes.push((id, pv, keypoints, descriptors, landmarks, dlen));
    }

    let k = r.u32()? as usize;
    let sample_count = r.u32()? as usize;
    r.reserve(sample_count, GLOBAL_DESCRIPTOR_LEN * 4 + 4)?;
    let mut samples = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let vals = (0..GLOBAL_DESCRIPTOR_LEN)
            .map(|_| r.f32())
            .collect::<Result<Vec<_>, _>>()?;
        let label = r.u32()?;
        samples.push((GlobalDescriptor::from_raw(vals), label));
    }

    let payload_end = r.pos;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }

    // The checksum matched; what remains are semantic checks on a file that
    // was written inconsistently rather than damaged in transit.
    finite(&kv, "intrinsics")?;
    if kv[4] != 0.0 || kv[5] != 0.0 {
        return Err(FormatError::Invalid("reserved intrinsics fields are non-zero".into()));
    }
    let intrinsics = CameraIntrinsics::new(kv[0], kv[1], kv[2], kv[3], width, height)
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    let policy = NodeSpacingPolicy { d_thresh, lambda };
    policy
        .validate()
        .map_err(|e| FormatError::Invalid(e.to_string()))?;

    let mut out_nodes = Vec::with_capacity(nodes.len());
    for (expected, (id, pv, keypoints, descriptors, landmarks, dlen)) in
        nodes.into_iter().enumerate()
    {
        if id as usize != expected {
            return Err(FormatError::Invalid(format!(
                "node {expected} carries id {id}"
            )));
        }
        finite(&pv, "node pose")?;
        let qnorm = pv[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qnorm - 1.0).abs() > 1e-6 {
            return Err(FormatError::Invalid(format!("node {id} quaternion norm {qnorm}")));
        }
        if !keypoints.is_empty() && dlen == 0 {
            return Err(FormatError::Invalid(format!("node {id} has empty descriptors")));
        }
        for kp in &keypoints {
            finite(&[kp.position.u, kp.position.v, kp.scale, kp.response], "keypoint")?;
        }
        for p in &landmarks {
            finite(&[p.x, p.y, p.z], "landmark")?;
        }
        out_nodes.push(TopoNode {
            id,
            global_pose: Pose::from_parts_exact([pv[0], pv[1], pv[2]], [pv[3], pv[4], pv[5], pv[6]]),
            keypoints,
            descriptors,
            landmarks,
        });
    }
    if out_nodes.is_empty() {
        return Err(FormatError::Invalid("map has no nodes".into()));
    }
    if let Some((_, label)) = samples
        .iter()
        .find(|(_, l)| *l as usize >= out_nodes.len())
    {
        return Err(FormatError::Invalid(format!(
            "classifier label {label} exceeds node count {}",
            out_nodes.len()
        )));
    }
    let classifier =
        coarse::train_classifier(samples, k).map_err(|e| FormatError::Invalid(e.to_string()))?;

    Ok(TopoMetricMap {
        nodes: out_nodes,
        intrinsics,
        policy,
        classifier,
        format_version: version,
    })
}

pub fn save_map(map: &TopoMetricMap, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, to_bytes(map))?;
    Ok(())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<TopoMetricMap, FormatError> {
    from_bytes(&fs::read(path)?)
}
