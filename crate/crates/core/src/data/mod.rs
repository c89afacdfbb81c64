//! Pose datasets: the PoseSet JSON format, 2D input normalization and a synthetic
//! generator.
//!
//! A PoseSet file looks like
//!
//! ```json
//! {"skeleton": "h36m17", "image_size": [1000, 1000],
//!  "frames": [{"p2d": [[x, y], ...], "p3d": [[x, y, z], ...]}]}
//! ```
//!
//! with `p2d` in pixels and `p3d` in millimetres relative to the root joint. Paths
//! ending in `.gz` are read and written gzip-compressed.

pub mod anthropometry;
mod synth;

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::skeleton::Skeleton;
use crate::{Error, Result};

pub use synth::{synth_generate, CameraModel, SynthGenerator};

/// One frame: 2D pixel coordinates and root-relative 3D millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub p2d: Vec<[f64; 2]>,
    pub p3d: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    pub skeleton: String,
    pub image_size: [f64; 2],
    pub frames: Vec<PoseSample>,
}

impl PoseSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized 2D inputs of the selected frames stacked as a `(B*N) x 2` matrix.
    pub fn input_batch(&self, indices: &[usize]) -> Tensor {
        let [w, h] = self.image_size;
        let n = self.frames.first().map_or(0, |f| f.p2d.len());
        let mut data = Vec::with_capacity(indices.len() * n * 2);
        for &i in indices {
            for p in normalize_2d(&self.frames[i].p2d, w, h) {
                data.extend_from_slice(&p);
            }
        }
        Tensor::new(vec![indices.len() * n, 2], data).expect("consistent joint counts")
    }

    /// 3D targets of the selected frames as a `(B*N) x 3` matrix.
    pub fn target_batch(&self, indices: &[usize]) -> Tensor {
        let n = self.frames.first().map_or(0, |f| f.p3d.len());
        let mut data = Vec::with_capacity(indices.len() * n * 3);
        for &i in indices {
            for p in &self.frames[i].p3d {
                data.extend_from_slice(p);
            }
        }
        Tensor::new(vec![indices.len() * n, 3], data).expect("consistent joint counts")
    }

    /// Checks joint counts, finiteness and image size against `skeleton`; moves any
    /// frame whose root is off the origin back to it.
    pub fn validate(&mut self, skeleton: &Skeleton) -> Result<()> {
        if self.skeleton != skeleton.name() {
            return Err(Error::MalformedPoseSet(format!(
                "file declares skeleton {:?} but {:?} is active",
                self.skeleton,
                skeleton.name()
            )));
        }
        let [w, h] = self.image_size;
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(Error::MalformedPoseSet(format!("image_size must be positive, got [{w}, {h}]")));
        }
        let n = skeleton.joint_count();
        let root = skeleton.root();
        let mut recentered = 0;
        for (i, f) in self.frames.iter_mut().enumerate() {
            for got in [f.p2d.len(), f.p3d.len()] {
                if got != n {
                    return Err(Error::JointCount {
                        got,
                        expected: n,
                        skeleton: skeleton.name().to_string(),
                    });
                }
            }
            if !f.p2d.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("frame {i} p2d")));
            }
            if !f.p3d.iter().flatten().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("frame {i} p3d")));
            }
            let r = f.p3d[root];
            if r != [0.0; 3] {
                for p in f.p3d.iter_mut() {
                    for k in 0..3 {
                        p[k] -= r[k];
                    }
                }
                recentered += 1;
            }
        }
        if recentered > 0 {
            log::warn!("{recentered} frame(s) were not root-relative and have been re-centred");
        }
        Ok(())
    }
}

/// Maps pixels into roughly `[-1, 1]` preserving aspect ratio:
/// `x' = (2x - width) / width`, `y' = (2y - height) / width`.
pub fn normalize_2d(p2d: &[[f64; 2]], width: f64, height: f64) -> Vec<[f64; 2]> {
    p2d.iter()
        .map(|&[x, y]| [(2.0 * x - width) / width, (2.0 * y - height) / width])
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::open(path).map_err(io)?;
    let mut text = String::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_string(&mut text).map_err(io)?;
    } else {
        std::io::BufReader::new(file).read_to_string(&mut text).map_err(io)?;
    }
    Ok(text)
}

/// Parses and validates a PoseSet file against `skeleton`.
pub fn load_poseset(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<PoseSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut set = parse_poseset(&text)?;
    set.validate(skeleton)?;
    Ok(set)
}

/// Parses PoseSet JSON without validating it.
pub fn parse_poseset(text: &str) -> Result<PoseSet> {
    serde_json::from_str(text).map_err(|e| Error::MalformedPoseSet(e.to_string()))
}

pub fn save_poseset(path: impl AsRef<Path>, set: &PoseSet) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let json = serde_json::to_vec(set)?;
    let file = std::fs::File::create(path).map_err(io)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(&json).map_err(io)?;
        enc.finish().map_err(io)?;
    } else {
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&json).map_err(io)?;
        w.flush().map_err(io)?;
    }
    Ok(())
}
