//! Canonical bone layout of the synthetic 17-joint body, in millimetres.
//!
//! Lengths are adult anthropometric averages. Rest directions are expressed in the
//! camera frame (x right, y down, z away from the camera) for a subject standing
//! upright and facing the camera, so the subject's left side lies toward +x.

/// `(joint, parent, rest direction, length_mm)` for every non-root joint of `h36m17`.
pub const BONES: [(usize, usize, [f64; 3], f64); 16] = [
    (1, 0, [-1.0, 0.0, 0.0], 132.0),
    (2, 1, [0.0, 1.0, 0.0], 442.0),
    (3, 2, [0.0, 1.0, 0.0], 454.0),
    (4, 0, [1.0, 0.0, 0.0], 132.0),
    (5, 4, [0.0, 1.0, 0.0], 442.0),
    (6, 5, [0.0, 1.0, 0.0], 454.0),
    (7, 0, [0.0, -1.0, 0.0], 233.0),
    (8, 7, [0.0, -1.0, 0.0], 257.0),
    (9, 8, [0.0, -1.0, 0.0], 121.0),
    (10, 9, [0.0, -1.0, 0.0], 115.0),
    (11, 8, [1.0, 0.0, 0.0], 151.0),
    (12, 11, [0.0, 1.0, 0.0], 278.0),
    (13, 12, [0.0, 1.0, 0.0], 252.0),
    (14, 8, [-1.0, 0.0, 0.0], 151.0),
    (15, 14, [0.0, 1.0, 0.0], 278.0),
    (16, 15, [0.0, 1.0, 0.0], 252.0),
];

/// Local joint rotation limits in radians, `[min, max]` about the x, y and z axes.
/// The rotation at a joint moves the bones of its children.
pub const JOINT_LIMITS: [[[f64; 2]; 3]; 17] = [
    // hip (root): free heading about the vertical axis, slight tilt
    [[-0.15, 0.15], [-std::f64::consts::PI, std::f64::consts::PI], [-0.15, 0.15]],
    // r_hip, r_knee, r_ankle
    [[-1.5, 0.4], [-0.4, 0.4], [-0.2, 0.5]],
    [[0.0, 2.2], [0.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
    // l_hip, l_knee, l_ankle
    [[-1.5, 0.4], [-0.4, 0.4], [-0.5, 0.2]],
    [[0.0, 2.2], [0.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
    // spine, thorax, neck, head
    [[-0.5, 0.2], [-0.4, 0.4], [-0.3, 0.3]],
    [[-0.2, 0.2], [-0.3, 0.3], [-0.2, 0.2]],
    [[-0.5, 0.5], [-0.6, 0.6], [-0.3, 0.3]],
    [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
    // l_shoulder, l_elbow, l_wrist
    [[-2.5, 0.8], [-0.5, 0.5], [-2.0, 0.2]],
    [[-2.4, 0.0], [0.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
    // r_shoulder, r_elbow, r_wrist
    [[-2.5, 0.8], [-0.5, 0.5], [-0.2, 2.0]],
    [[-2.4, 0.0], [0.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
];

/// Distance from the camera centre to the root joint.
pub const SUBJECT_DEPTH_MM: f64 = 5000.0;
pub const FOCAL_PX: f64 = 1145.0;
pub const IMAGE_SIZE_PX: f64 = 1000.0;
