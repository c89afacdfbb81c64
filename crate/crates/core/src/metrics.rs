//! Pose-error metrics.
//!
//! All functions take poses as per-frame joint lists in millimetres. PCK counts a
//! joint as correct when its error is `<=` the threshold; AUC averages PCK over the
//! 31 thresholds `0, 5, ..., 150` mm.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::skeleton::Skeleton;
use crate::{Error, Result};

pub type Pose3 = Vec<[f64; 3]>;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;
pub const AUC_STEPS: usize = 31;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    /// Keyed by PDoF level 0..=3.
    pub per_pdof_mpjpe: BTreeMap<u8, f64>,
    pub per_joint_mpjpe: Vec<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mpjpe,p_mpjpe,pck,auc,pdof0,pdof1,pdof2,pdof3";

    pub fn evaluate(pred: &[Pose3], gt: &[Pose3], skeleton: &Skeleton) -> Result<Self> {
        let per_joint = per_joint_mpjpe(pred, gt)?;
        Ok(MetricsReport {
            mpjpe: mpjpe(pred, gt)?,
            p_mpjpe: p_mpjpe(pred, gt)?,
            pck: pck(pred, gt, PCK_THRESHOLD_MM)?,
            auc: auc(pred, gt)?,
            per_pdof_mpjpe: pdof_breakdown(pred, gt, skeleton)?,
            per_joint_mpjpe: per_joint,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row matching [`MetricsReport::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let pd = |k: u8| self.per_pdof_mpjpe.get(&k).copied().unwrap_or(f64::NAN);
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mpjpe,
            self.p_mpjpe,
            self.pck,
            self.auc,
            pd(0),
            pd(1),
            pd(2),
            pd(3)
        )
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check(pred: &[Pose3], gt: &[Pose3]) -> Result<()> {
    let shape = |p: &[Pose3]| vec![p.len(), p.first().map_or(0, |f| f.len()), 3];
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: shape(pred),
            rhs: shape(gt),
        });
    }
    Ok(())
}

/// Errors of every `(frame, joint)` pair.
fn joint_errors(pred: &[Pose3], gt: &[Pose3]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .flat_map(|(p, g)| p.iter().zip(g).map(|(a, b)| dist(a, b)))
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean Euclidean joint error over all frames and joints.
pub fn mpjpe(pred: &[Pose3], gt: &[Pose3]) -> Result<f64> {
    Ok(mean(&joint_errors(pred, gt)?))
}

/// Mean error of each joint over frames.
pub fn per_joint_mpjpe(pred: &[Pose3], gt: &[Pose3]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let n = gt.first().map_or(0, |f| f.len());
    let mut sums = vec![0.0; n];
    for (p, g) in pred.iter().zip(gt) {
        for (j, (a, b)) in p.iter().zip(g).enumerate() {
            sums[j] += dist(a, b);
        }
    }
    let f = pred.len().max(1) as f64;
    Ok(sums.into_iter().map(|s| s / f).collect())
}

/// Similarity transform `s * R * pred + t` (proper rotation, `s > 0`) minimizing the
/// squared distance to `gt`.
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Pose3> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "procrustes_align",
            lhs: vec![pred.len(), 3],
            rhs: vec![gt.len(), 3],
        });
    }
    if gt.len() < 3 {
        return Err(Error::DegenerateAlignment(format!("need at least 3 points, got {}", gt.len())));
    }
    let to_vecs = |ps: &[[f64; 3]]| ps.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect::<Vec<_>>();
    let (p, g) = (to_vecs(pred), to_vecs(gt));
    let n = p.len() as f64;
    let mu_p = p.iter().sum::<Vector3<f64>>() / n;
    let mu_g = g.iter().sum::<Vector3<f64>>() / n;
    let p0: Vec<_> = p.iter().map(|v| v - mu_p).collect();
    let g0: Vec<_> = g.iter().map(|v| v - mu_g).collect();

    let rank_ok = |pts: &[Vector3<f64>]| {
        let cov: Matrix3<f64> = pts.iter().map(|v| v * v.transpose()).sum();
        let mut sv = cov.symmetric_eigenvalues().iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv[0] > 0.0 && sv[1] > 1e-12 * sv[0]
    };
    if !rank_ok(&g0) {
        return Err(Error::DegenerateAlignment("target points are collinear or coincident".into()));
    }
    if !rank_ok(&p0) {
        return Err(Error::DegenerateAlignment("source points are collinear or coincident".into()));
    }

    // Cross-covariance H = sum p0 g0^T; with H = U S V^T the optimal rotation is
    // V D U^T, D = diag(1, 1, sign det(V U^T)).
    let h: Matrix3<f64> = p0.iter().zip(&g0).map(|(a, b)| a * b.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = v_t.transpose();
    let d = if (v * u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * dm * u.transpose();
    let trace = svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2];
    let norm_p: f64 = p0.iter().map(|v| v.norm_squared()).sum();
    let s = trace / norm_p;
    let t = mu_g - s * r * mu_p;
    Ok(p.iter()
        .map(|x| {
            let y = s * r * x + t;
            [y.x, y.y, y.z]
        })
        .collect())
}

/// MPJPE after per-frame Procrustes alignment.
pub fn p_mpjpe(pred: &[Pose3], gt: &[Pose3]) -> Result<f64> {
    check(pred, gt)?;
    let aligned = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| procrustes_align(p, g))
        .collect::<Result<Vec<_>>>()?;
    mpjpe(&aligned, gt)
}

/// Percentage of joints with error `<= threshold_mm`.
pub fn pck(pred: &[Pose3], gt: &[Pose3], threshold_mm: f64) -> Result<f64> {
    Ok(pck_of(&joint_errors(pred, gt)?, threshold_mm))
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 100.0;
    }
    100.0 * errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

/// The PCK thresholds AUC averages over.
pub fn auc_thresholds() -> impl Iterator<Item = f64> {
    (0..AUC_STEPS).map(|i| i as f64 * AUC_STEP_MM)
}

/// Mean of PCK over [`auc_thresholds`].
pub fn auc(pred: &[Pose3], gt: &[Pose3]) -> Result<f64> {
    let errors = joint_errors(pred, gt)?;
    Ok(auc_thresholds().map(|t| pck_of(&errors, t)).sum::<f64>() / AUC_STEPS as f64)
}

/// Mean error over all `(frame, joint)` pairs of each PDoF level.
pub fn pdof_breakdown(pred: &[Pose3], gt: &[Pose3], skeleton: &Skeleton) -> Result<BTreeMap<u8, f64>> {
    check(pred, gt)?;
    let n = skeleton.joint_count();
    if let Some(f) = gt.iter().find(|f| f.len() != n) {
        return Err(Error::JointCount {
            got: f.len(),
            expected: n,
            skeleton: skeleton.name().to_string(),
        });
    }
    let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for &level in skeleton.pdof() {
        sums.entry(level).or_default();
    }
    for (p, g) in pred.iter().zip(gt) {
        for (j, (a, b)) in p.iter().zip(g).enumerate() {
            let e = sums.entry(skeleton.pdof()[j]).or_default();
            e.0 += dist(a, b);
            e.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, c))| (k, if c == 0 { 0.0 } else { s / c as f64 }))
        .collect())
}
