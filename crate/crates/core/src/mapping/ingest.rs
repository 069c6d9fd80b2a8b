//! Directory layout for externally produced sequences.
//!
//! ```text
//! intrinsics.txt       fx fy cx cy width height
//! frame_00000.pgm      8-bit P5 image
//! frame_00000.txt      line 1: tx ty tz qw qx qy qz (world_from_camera)
//!                      then one `u v x y z` world-frame observation per line
//! ```
//!
//! Sidecars are required for mapping; for localization they are optional and
//! only provide ground truth.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::PosedFrame;
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};
use crate::imaging::{self, GrayImage, ImageError};

pub const INTRINSICS_FILE: &str = "intrinsics.txt";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: no frame_*.pgm images found")]
    Empty(PathBuf),
    #[error("{path}: image is {found:?}, intrinsics say {expected:?}")]
    ImageSize {
        path: PathBuf,
        found: (u32, u32),
        expected: (u32, u32),
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn frame_stem(id: usize) -> String {
    format!("frame_{id:05}")
}

pub fn write_intrinsics(dir: &Path, k: &CameraIntrinsics) -> io::Result<()> {
    fs::write(
        dir.join(INTRINSICS_FILE),
        format!(
            "{:?} {:?} {:?} {:?} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        ),
    )
}

pub fn read_intrinsics(dir: &Path) -> Result<CameraIntrinsics, IngestError> {
    let path = dir.join(INTRINSICS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let parse_err = |message: String| IngestError::Parse {
        path: path.clone(),
        line: 1,
        message,
    };
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(parse_err(format!("expected 6 fields, found {}", fields.len())));
    }
    let f = |i: usize| {
        fields[i]
            .parse::<f64>()
            .map_err(|e| parse_err(format!("field {}: {e}", i + 1)))
    };
    let u = |i: usize| {
        fields[i]
            .parse::<u32>()
            .map_err(|e| parse_err(format!("field {}: {e}", i + 1)))
    };
    CameraIntrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?)
        .map_err(|e| parse_err(e.to_string()))
}

pub fn write_frame(
    dir: &Path,
    id: usize,
    pose: &Pose,
    image: &GrayImage,
    observations: &[(Pixel, Point3<f64>)],
) -> io::Result<()> {
    let stem = frame_stem(id);
    imaging::write_pgm(image, dir.join(format!("{stem}.pgm"))).map_err(|e| match e {
        ImageError::Io(e) => e,
        other => io::Error::other(other.to_string()),
    })?;
    let mut side = io::BufWriter::new(fs::File::create(dir.join(format!("{stem}.txt")))?);
    writeln!(side, "{pose}")?;
    for (px, p) in observations {
        writeln!(side, "{:?} {:?} {:?} {:?} {:?}", px.u, px.v, p.x, p.y, p.z)?;
    }
    side.flush()
}

/// Parses a sidecar: the pose line and the observation lines.
pub fn parse_sidecar(
    path: &Path,
    text: &str,
) -> Result<(Pose, Vec<(Pixel, Point3<f64>)>), IngestError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| IngestError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing pose line".into(),
    })?;
    let pose: Pose = first.parse().map_err(|e: crate::geometry::GeometryError| {
        IngestError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        }
    })?;
    let mut observations = Vec::new();
    for (i, line) in lines {
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == 5 && v.iter().all(|x| x.is_finite()) => {
                observations.push((Pixel::new(v[0], v[1]), Point3::new(v[2], v[3], v[4])));
            }
            _ => {
                return Err(IngestError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `u v x y z`, got {line:?}"),
                })
            }
        }
    }
    Ok((pose, observations))
}

/// An ingested frame; `truth` is present when a sidecar exists.
#[derive(Clone, Debug)]
pub struct IngestedFrame {
    pub id: usize,
    pub image: GrayImage,
    pub truth: Option<(Pose, Vec<(Pixel, Point3<f64>)>)>,
}

impl IngestedFrame {
    /// Converts to a mapping frame; fails when the sidecar is missing.
    pub fn into_posed(self, path: &Path) -> Result<PosedFrame, IngestError> {
        let (pose, observations) = self.truth.ok_or_else(|| IngestError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("frame {} has no sidecar", self.id),
        })?;
        Ok(PosedFrame {
            id: self.id,
            pose,
            image: self.image,
            observations,
        })
    }
}

/// Lists the frame images of `dir` in id order.
pub fn frame_paths(dir: &Path) -> Result<Vec<(usize, PathBuf)>, IngestError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name
            .strip_prefix("frame_")
            .and_then(|s| s.strip_suffix(".pgm"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((id, entry.path()));
        }
    }
    if out.is_empty() {
        return Err(IngestError::Empty(dir.to_path_buf()));
    }
    out.sort();
    Ok(out)
}

pub fn read_frame(
    id: usize,
    image_path: &Path,
    k: &CameraIntrinsics,
) -> Result<IngestedFrame, IngestError> {
    let image = imaging::read_pgm(image_path).map_err(|source| IngestError::Image {
        path: image_path.to_path_buf(),
        source,
    })?;
    if (image.width(), image.height()) != (k.width, k.height) {
        return Err(IngestError::ImageSize {
            path: image_path.to_path_buf(),
            found: (image.width(), image.height()),
            expected: (k.width, k.height),
        });
    }
    let side = image_path.with_extension("txt");
    let truth = if side.exists() {
        let text = fs::read_to_string(&side).map_err(io_err(&side))?;
        Some(parse_sidecar(&side, &text)?)
    } else {
        None
    };
    Ok(IngestedFrame { id, image, truth })
}

/// Lazily reads an ingestion directory.
pub struct IngestedSequence {
    pub dir: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<(usize, PathBuf)>,
}

impl IngestedSequence {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, IngestError> {
        let dir = dir.as_ref().to_path_buf();
        let intrinsics = read_intrinsics(&dir)?;
        let frames = frame_paths(&dir)?;
        Ok(Self {
            dir,
            intrinsics,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn read(&self, index: usize) -> Result<IngestedFrame, IngestError> {
        let (id, path) = &self.frames[index];
        read_frame(*id, path, &self.intrinsics)
    }

    pub fn read_posed(&self, index: usize) -> Result<PosedFrame, IngestError> {
        let (_, path) = &self.frames[index];
        self.read(index)?.into_posed(&path.with_extension("txt"))
    }
}
