//! Skeleton topology: joints, bones, PDoF labels and limb groups.
//!
//! A joint's PDoF (part degree of freedom) is its hop distance from the torso along
//! its limb: torso joints are 0, hips and shoulders 1, knees and elbows 2, ankles and
//! wrists 3. The part-level block consumes the 12 limb joints gathered limb-major,
//! one `(1-PDoF, 2-PDoF, 3-PDoF)` triple per limb.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const LIMB_COUNT: usize = 4;

/// Joint names of the 17-joint convention, in storage order.
pub const H36M17_JOINTS: [&str; 17] = [
    "hip",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

const H36M17_PARENTS: [usize; 17] = [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
const H36M17_PDOF: [u8; 17] = [0, 1, 2, 3, 1, 2, 3, 0, 0, 0, 0, 1, 2, 3, 1, 2, 3];
// R-leg, L-leg, L-arm, R-arm
const H36M17_LIMBS: [[usize; 3]; LIMB_COUNT] = [[1, 2, 3], [4, 5, 6], [11, 12, 13], [14, 15, 16]];

/// On-disk form of a skeleton. Edges are implied by `parents`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonDoc {
    pub name: String,
    pub joint_names: Vec<String>,
    pub parents: Vec<usize>,
    pub pdof: Vec<u8>,
    pub limbs: Vec<[usize; 3]>,
    pub root: usize,
}

/// A validated tree skeleton with PDoF labels and four ordered limbs.
///
/// Immutable after construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonDoc", into = "SkeletonDoc")]
pub struct Skeleton {
    name: String,
    joint_names: Vec<String>,
    parents: Vec<usize>,
    edges: Vec<(usize, usize)>,
    pdof: Vec<u8>,
    limbs: [[usize; 3]; LIMB_COUNT],
    root: usize,
}

impl Skeleton {
    pub fn new(doc: SkeletonDoc) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidSkeleton(msg));
        let n = doc.joint_names.len();
        if n == 0 {
            return bad("no joints".into());
        }
        if doc.parents.len() != n || doc.pdof.len() != n {
            return bad(format!(
                "{} names, {} parents, {} pdof labels",
                n,
                doc.parents.len(),
                doc.pdof.len()
            ));
        }
        if doc.root >= n {
            return bad(format!("root {} out of range for {} joints", doc.root, n));
        }
        if let Some(j) = doc.parents.iter().position(|&p| p >= n) {
            return bad(format!("parent of joint {j} out of range"));
        }
        for (j, &p) in doc.parents.iter().enumerate() {
            if (p == j) != (j == doc.root) {
                return bad(format!("joint {j} has parent {p}; only the root may be its own parent"));
            }
        }
        // Every chain must reach the root within n hops, otherwise there is a cycle.
        for start in 0..n {
            let mut j = start;
            let mut hops = 0;
            while j != doc.root {
                j = doc.parents[j];
                hops += 1;
                if hops > n {
                    return bad(format!("joint {start} is on a cycle"));
                }
            }
        }
        let edges: Vec<(usize, usize)> = (0..n)
            .filter(|&j| j != doc.root)
            .map(|j| (doc.parents[j], j))
            .collect();

        if let Some(j) = doc.pdof.iter().position(|&d| d > 3) {
            return bad(format!("joint {j} has pdof {} (must be 0..=3)", doc.pdof[j]));
        }
        for level in 1..=3u8 {
            let count = doc.pdof.iter().filter(|&&d| d == level).count();
            if count != LIMB_COUNT {
                return bad(format!("{count} joints with pdof {level}, expected {LIMB_COUNT}"));
            }
        }
        if doc.limbs.len() != LIMB_COUNT {
            return bad(format!("{} limbs, expected {LIMB_COUNT}", doc.limbs.len()));
        }
        let mut seen = vec![false; n];
        for (l, limb) in doc.limbs.iter().enumerate() {
            for (k, &j) in limb.iter().enumerate() {
                if j >= n {
                    return bad(format!("limb {l} references joint {j} out of range"));
                }
                if seen[j] {
                    return bad(format!("joint {j} appears in more than one limb slot"));
                }
                seen[j] = true;
                if doc.pdof[j] as usize != k + 1 {
                    return bad(format!(
                        "limb {l} slot {k} holds joint {j} with pdof {}, expected {}",
                        doc.pdof[j],
                        k + 1
                    ));
                }
            }
            if doc.parents[limb[1]] != limb[0] || doc.parents[limb[2]] != limb[1] {
                return bad(format!("limb {l} is not a parent chain"));
            }
        }

        Ok(Skeleton {
            name: doc.name,
            joint_names: doc.joint_names,
            parents: doc.parents,
            edges,
            pdof: doc.pdof,
            limbs: [doc.limbs[0], doc.limbs[1], doc.limbs[2], doc.limbs[3]],
            root: doc.root,
        })
    }

    /// The standard 17-joint skeleton with limbs ordered R-leg, L-leg, L-arm, R-arm.
    pub fn h36m17() -> Self {
        Skeleton::new(SkeletonDoc {
            name: "h36m17".into(),
            joint_names: H36M17_JOINTS.iter().map(|s| s.to_string()).collect(),
            parents: H36M17_PARENTS.to_vec(),
            pdof: H36M17_PDOF.to_vec(),
            limbs: H36M17_LIMBS.to_vec(),
            root: 0,
        })
        .expect("built-in skeleton is valid")
    }

    /// Resolves a built-in skeleton by name.
    pub fn builtin(name: &str) -> Option<Self> {
        (name == "h36m17").then(Self::h36m17)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parents[joint]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn pdof(&self) -> &[u8] {
        &self.pdof
    }

    /// `(1-PDoF, 2-PDoF, 3-PDoF)` joint triples in limb order.
    pub fn limbs(&self) -> &[[usize; 3]; LIMB_COUNT] {
        &self.limbs
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn normalized_adjacency(&self) -> AdjacencyMatrix {
        normalized_adjacency(self.joint_count(), &self.edges).expect("validated skeleton edges")
    }

    pub fn replacement_masks(&self) -> ReplacementMasks {
        let n = self.joint_count();
        let mut masks = ReplacementMasks {
            mask1: vec![false; n],
            mask2: vec![false; n],
            limb_of: vec![None; n],
        };
        for (l, &[_, two, three]) in self.limbs.iter().enumerate() {
            masks.mask1[three] = true;
            masks.mask2[two] = true;
            masks.mask2[three] = true;
            masks.limb_of[two] = Some(l);
            masks.limb_of[three] = Some(l);
        }
        masks
    }
}

impl TryFrom<SkeletonDoc> for Skeleton {
    type Error = Error;

    fn try_from(doc: SkeletonDoc) -> Result<Self> {
        Skeleton::new(doc)
    }
}

impl From<Skeleton> for SkeletonDoc {
    fn from(s: Skeleton) -> Self {
        SkeletonDoc {
            name: s.name,
            joint_names: s.joint_names,
            parents: s.parents,
            pdof: s.pdof,
            limbs: s.limbs.to_vec(),
            root: s.root,
        }
    }
}

/// Joints overwritten by the two part-level constraint maps.
///
/// `mask1` marks 3-PDoF joints, `mask2` marks 2- and 3-PDoF joints, and `limb_of`
/// gives the limb index of every masked joint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplacementMasks {
    pub mask1: Vec<bool>,
    pub mask2: Vec<bool>,
    pub limb_of: Vec<Option<usize>>,
}

/// Symmetrically normalized adjacency `D^-1/2 (A + I) D^-1/2`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AdjacencyMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.values.clone()).expect("square matrix")
    }

    /// Wraps an arbitrary square matrix. Used for hand-set adjacencies in tests.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "adjacency",
                lhs: vec![n, n],
                rhs: vec![values.len()],
            });
        }
        Ok(AdjacencyMatrix { n, values })
    }
}

/// Normalizes an undirected edge list over `n` joints.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<AdjacencyMatrix> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::InvalidSkeleton(format!(
                "edge ({i}, {j}) references a joint outside 0..{n}"
            )));
        }
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| 1.0 / a[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Ok(AdjacencyMatrix { n, values: a })
}
