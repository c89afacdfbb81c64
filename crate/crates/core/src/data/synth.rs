//! Synthetic 2D/3D pairs from forward kinematics on a fixed-length skeleton.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::anthropometry::{BONES, FOCAL_PX, IMAGE_SIZE_PX, JOINT_LIMITS, SUBJECT_DEPTH_MM};
use super::{PoseSample, PoseSet};
use crate::{Error, Result};

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: [f64; 2],
    pub center: [f64; 2],
}

impl CameraModel {
    pub fn new(focal: [f64; 2], center: [f64; 2]) -> Result<Self> {
        if !(focal[0] > 0.0 && focal[1] > 0.0) {
            return Err(Error::InvalidConfig(format!("focal lengths must be positive, got {focal:?}")));
        }
        Ok(CameraModel { focal, center })
    }

    /// Projects a camera-frame point (z forward) to pixels.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.focal[0] * p[0] / p[2] + self.center[0],
            self.focal[1] * p[1] / p[2] + self.center[1],
        ]
    }
}

/// Generator state: camera, subject placement and image size.
#[derive(Clone, Debug)]
pub struct SynthGenerator {
    camera: CameraModel,
    depth_mm: f64,
    image_size: [f64; 2],
}

impl Default for SynthGenerator {
    fn default() -> Self {
        SynthGenerator {
            camera: CameraModel {
                focal: [FOCAL_PX, FOCAL_PX],
                center: [IMAGE_SIZE_PX / 2.0, IMAGE_SIZE_PX / 2.0],
            },
            depth_mm: SUBJECT_DEPTH_MM,
            image_size: [IMAGE_SIZE_PX, IMAGE_SIZE_PX],
        }
    }
}

impl SynthGenerator {
    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    /// Camera-frame position of the root joint.
    pub fn root_offset(&self) -> [f64; 3] {
        [0.0, 0.0, self.depth_mm]
    }

    pub fn image_size(&self) -> [f64; 2] {
        self.image_size
    }

    /// Projects a root-relative pose as seen by the generator's camera.
    pub fn project(&self, p3d: &[[f64; 3]]) -> Vec<[f64; 2]> {
        let o = self.root_offset();
        p3d.iter()
            .map(|p| self.camera.project([p[0] + o[0], p[1] + o[1], p[2] + o[2]]))
            .collect()
    }

    /// Root-relative joint positions for the given per-joint local rotations.
    pub fn forward_kinematics(&self, local: &[Rotation3<f64>; 17]) -> Vec<[f64; 3]> {
        let mut global = [Rotation3::identity(); 17];
        let mut pos = [Vector3::zeros(); 17];
        global[0] = local[0];
        // Parents precede children in joint order.
        for &(j, parent, dir, len) in BONES.iter() {
            let bone = Vector3::new(dir[0], dir[1], dir[2]) * len;
            pos[j] = pos[parent] + global[parent] * bone;
            global[j] = global[parent] * local[j];
        }
        pos.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    fn sample_rotations(rng: &mut ChaCha8Rng) -> [Rotation3<f64>; 17] {
        let mut out = [Rotation3::identity(); 17];
        for (rot, limits) in out.iter_mut().zip(JOINT_LIMITS.iter()) {
            let mut angle = |[lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let (ax, ay, az) = (angle(limits[0]), angle(limits[1]), angle(limits[2]));
            *rot = Rotation3::from_euler_angles(ax, ay, az);
        }
        out
    }

    /// `n` samples with random joint angles; `noise_mm` is converted to pixel noise at
    /// the subject's depth. Deterministic in `seed`.
    pub fn generate(&self, n: usize, seed: u64, noise_mm: f64) -> PoseSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma_px = [
            noise_mm * self.camera.focal[0] / self.depth_mm,
            noise_mm * self.camera.focal[1] / self.depth_mm,
        ];
        let noise = [
            Normal::new(0.0, sigma_px[0].abs()).expect("finite sigma"),
            Normal::new(0.0, sigma_px[1].abs()).expect("finite sigma"),
        ];
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let local = Self::sample_rotations(&mut rng);
            let p3d = self.forward_kinematics(&local);
            let mut p2d = self.project(&p3d);
            if noise_mm > 0.0 {
                for p in p2d.iter_mut() {
                    p[0] += noise[0].sample(&mut rng);
                    p[1] += noise[1].sample(&mut rng);
                }
            }
            frames.push(PoseSample { p2d, p3d });
        }
        PoseSet {
            skeleton: "h36m17".into(),
            image_size: self.image_size,
            frames,
        }
    }
}

/// [`SynthGenerator::generate`] with the default camera.
pub fn synth_generate(n: usize, seed: u64, noise_mm: f64) -> PoseSet {
    SynthGenerator::default().generate(n, seed, noise_mm)
}
