//! Rotation representations, conversions, and forward kinematics.
//!
//! Everything here is pure `f64` math shared by the feature encoder, the
//! curation filters, and the evaluation metrics. Conventions: right-handed
//! coordinates, Y is up, rotations act on column vectors (`y = R * x`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3-vector in meters (or unitless, depending on context).
pub type Vec3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),
    #[error("degenerate 6d input: {0}")]
    Degenerate6d(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
}

pub fn vec_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn vec_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vec_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vec_norm(a: Vec3) -> f64 {
    vec_dot(a, a).sqrt()
}

/// Row-major 3x3 rotation matrix. Orthonormal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

/// Tolerance for the orthonormality check on externally supplied matrices.
pub const ROTATION_TOL: f64 = 1e-6;

impl RotationMatrix {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Wraps a raw matrix after validating orthonormality and determinant.
    pub fn from_rows(m: [[f64; 3]; 3]) -> Result<Self, GeomError> {
        let r = Self(m);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let m = &self.0;
        for i in 0..3 {
            for j in i..3 {
                let dot = m[0][i] * m[0][j] + m[1][i] * m[1][j] + m[2][i] * m[2][j];
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ROTATION_TOL {
                    return Err(GeomError::InvalidRotation(format!(
                        "columns {i},{j} dot product deviates by {:.2e}",
                        (dot - expect).abs()
                    )));
                }
            }
        }
        if (self.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeomError::InvalidRotation(format!(
                "determinant {:.6} != 1",
                self.determinant()
            )));
        }
        Ok(())
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    /// Inverse of a rotation is its transpose.
    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn mul(&self, other: &Self) -> Self {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Self(out)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Rotation about the world Y (up) axis.
    pub fn yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rodrigues formula from a unit axis and an angle in radians.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = vec_norm(axis);
        let (x, y, z) = if n > 0.0 {
            (axis[0] / n, axis[1] / n, axis[2] / n)
        } else {
            (1.0, 0.0, 0.0)
        };
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Self([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    /// Unit quaternion (w, x, y, z) via Shepperd's method (branch on the
    /// largest of trace and diagonal entries, stable everywhere).
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            ]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            ]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            ]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            ]
        };
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        Self([
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
        ])
    }

    /// Splits off the yaw (heading) component: the twist of this rotation
    /// about the world Y axis. `self = heading * tilt` exactly, with
    /// `heading` a pure Y rotation.
    ///
    /// Degenerate case (rotation by pi about a horizontal axis) falls back
    /// to the identity heading.
    pub fn heading_decompose(&self) -> (RotationMatrix, RotationMatrix) {
        let q = self.to_quaternion();
        let (w, y) = (q[0], q[2]);
        let n = (w * w + y * y).sqrt();
        let heading = if n < 1e-12 {
            RotationMatrix::IDENTITY
        } else {
            RotationMatrix::from_quaternion([w / n, 0.0, y / n, 0.0])
        };
        let tilt = heading.inverse().mul(self);
        (heading, tilt)
    }
}

/// Continuous 6D rotation encoding: the first two columns of the matrix,
/// stored as `[c0x, c0y, c0z, c1x, c1y, c1z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

/// Axis-angle rotation: unit axis and angle in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
}

/// Converts a rotation matrix to axis-angle form.
///
/// The angle is `arccos(clamp((trace - 1) / 2, -1, 1))`. The axis comes
/// from the skew-symmetric part away from the branch points; near an angle
/// of pi the skew part vanishes and the axis is recovered from the
/// symmetric part instead. A zero rotation reports the fixed axis (1,0,0).
pub fn matrix_to_axis_angle(r: &RotationMatrix) -> Result<AxisAngle, GeomError> {
    r.validate()?;
    let m = &r.0;
    let trace = m[0][0] + m[1][1] + m[2][2];
    let cos_angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();

    if angle < 1e-10 {
        return Ok(AxisAngle {
            axis: [1.0, 0.0, 0.0],
            angle: 0.0,
        });
    }

    if angle < std::f64::consts::PI - 1e-5 {
        let skew = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
        let n = vec_norm(skew);
        Ok(AxisAngle {
            axis: vec_scale(skew, 1.0 / n),
            angle,
        })
    } else {
        // Near pi the skew part is ~0; at exactly pi, (R + I)/2 = aa^T.
        // Take the column with the largest diagonal for stability.
        let b = [
            [
                (m[0][0] + 1.0) / 2.0,
                (m[0][1] + m[1][0]) / 4.0,
                (m[0][2] + m[2][0]) / 4.0,
            ],
            [
                (m[0][1] + m[1][0]) / 4.0,
                (m[1][1] + 1.0) / 2.0,
                (m[1][2] + m[2][1]) / 4.0,
            ],
            [
                (m[0][2] + m[2][0]) / 4.0,
                (m[1][2] + m[2][1]) / 4.0,
                (m[2][2] + 1.0) / 2.0,
            ],
        ];
        let k = if b[0][0] >= b[1][1] && b[0][0] >= b[2][2] {
            0
        } else if b[1][1] >= b[2][2] {
            1
        } else {
            2
        };
        let mut axis = [b[0][k], b[1][k], b[2][k]];
        axis[k] = b[k][k].max(0.0).sqrt();
        for j in 0..3 {
            if j != k && axis[k] > 0.0 {
                axis[j] = b[k][j] / axis[k];
            }
        }
        let n = vec_norm(axis);
        Ok(AxisAngle {
            axis: vec_scale(axis, 1.0 / n),
            angle,
        })
    }
}

/// Geodesic angle between two rotations: the rotation angle of
/// `R_curr * R_prev^-1`, in `[0, pi]`.
pub fn geodesic_delta(r_prev: &RotationMatrix, r_curr: &RotationMatrix) -> Result<f64, GeomError> {
    r_prev.validate()?;
    r_curr.validate()?;
    let delta = r_curr.mul(&r_prev.inverse());
    Ok(matrix_to_axis_angle(&delta)?.angle)
}

/// Encodes a rotation matrix as its first two columns.
pub fn rot6d_encode(r: &RotationMatrix) -> Rotation6D {
    let m = &r.0;
    Rotation6D([m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]])
}

/// Decodes a 6D rotation by Gram-Schmidt orthonormalization: normalize the
/// first column, project it out of the second, and take the cross product
/// for the third.
pub fn rot6d_decode(r: &Rotation6D) -> Result<RotationMatrix, GeomError> {
    let a1 = [r.0[0], r.0[1], r.0[2]];
    let a2 = [r.0[3], r.0[4], r.0[5]];
    let n1 = vec_norm(a1);
    if n1 < 1e-8 {
        return Err(GeomError::Degenerate6d(format!(
            "first column norm {n1:.2e} below 1e-8"
        )));
    }
    let b1 = vec_scale(a1, 1.0 / n1);
    let proj = vec_dot(b1, a2);
    let ortho = vec_sub(a2, vec_scale(b1, proj));
    let n2 = vec_norm(ortho);
    if n2 < 1e-8 {
        return Err(GeomError::Degenerate6d(format!(
            "second column near-parallel to first (residual norm {n2:.2e})"
        )));
    }
    let b2 = vec_scale(ortho, 1.0 / n2);
    let b3 = vec_cross(b1, b2);
    Ok(RotationMatrix([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ]))
}

/// Sentinel parent index marking the root joint.
pub const ROOT_PARENT: usize = usize::MAX;

/// Kinematic tree: parent indices and rest-pose bone offsets in meters.
/// Joint 0 is the root; `parents[0] == ROOT_PARENT` and every other parent
/// precedes its child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    parents: Vec<usize>,
    offsets: Vec<Vec3>,
}

impl Skeleton {
    pub fn new(parents: Vec<usize>, offsets: Vec<Vec3>) -> Result<Self, GeomError> {
        if parents.is_empty() || parents.len() != offsets.len() {
            return Err(GeomError::InvalidSkeleton(format!(
                "{} parents vs {} offsets",
                parents.len(),
                offsets.len()
            )));
        }
        if parents[0] != ROOT_PARENT {
            return Err(GeomError::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, &p) in parents.iter().enumerate().skip(1) {
            if p >= j {
                return Err(GeomError::InvalidSkeleton(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )));
            }
        }
        for (j, o) in offsets.iter().enumerate() {
            if !o.iter().all(|c| c.is_finite()) {
                return Err(GeomError::InvalidSkeleton(format!(
                    "offset of joint {j} is not finite"
                )));
            }
        }
        Ok(Self { parents, offsets })
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        let p = self.parents[joint];
        (p != ROOT_PARENT).then_some(p)
    }

    pub fn offset(&self, joint: usize) -> Vec3 {
        self.offsets[joint]
    }

    /// A serial chain of `n` joints, each offset by `bone` from its parent.
    pub fn chain(n: usize, bone: Vec3) -> Self {
        let mut parents = vec![ROOT_PARENT];
        let mut offsets = vec![[0.0, 0.0, 0.0]];
        for j in 1..n {
            parents.push(j - 1);
            offsets.push(bone);
        }
        Self { parents, offsets }
    }

    /// Default 22-joint body (root + 21): pelvis, legs, spine, neck, head,
    /// and arms, with rest offsets in meters. Hands and face are not
    /// modeled; other joint counts go through `new`.
    pub fn default_body() -> Self {
        let parents = vec![
            ROOT_PARENT, // 0 pelvis
            0,           // 1 left hip
            0,           // 2 right hip
            0,           // 3 spine1
            1,           // 4 left knee
            2,           // 5 right knee
            3,           // 6 spine2
            4,           // 7 left ankle
            5,           // 8 right ankle
            6,           // 9 spine3
            7,           // 10 left foot
            8,           // 11 right foot
            9,           // 12 neck
            9,           // 13 left collar
            9,           // 14 right collar
            12,          // 15 head
            13,          // 16 left shoulder
            14,          // 17 right shoulder
            16,          // 18 left elbow
            17,          // 19 right elbow
            18,          // 20 left wrist
            19,          // 21 right wrist
        ];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.09, -0.05, 0.0],
            [-0.09, -0.05, 0.0],
            [0.0, 0.11, 0.0],
            [0.0, -0.38, 0.0],
            [0.0, -0.38, 0.0],
            [0.0, 0.14, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, -0.40, 0.0],
            [0.0, 0.06, 0.0],
            [0.0, -0.06, 0.12],
            [0.0, -0.06, 0.12],
            [0.0, 0.21, 0.0],
            [0.08, 0.12, 0.0],
            [-0.08, 0.12, 0.0],
            [0.0, 0.07, 0.0],
            [0.11, 0.0, 0.0],
            [-0.11, 0.0, 0.0],
            [0.26, 0.0, 0.0],
            [-0.26, 0.0, 0.0],
            [0.25, 0.0, 0.0],
            [-0.25, 0.0, 0.0],
        ];
        Self { parents, offsets }
    }
}

/// Forward kinematics: world position of every joint.
///
/// The root sits at `root_translation` with world rotation
/// `root_orientation * local_rotations[0]`; each child is its parent's
/// position plus the parent's world rotation applied to the rest offset.
pub fn forward_kinematics(
    skeleton: &Skeleton,
    root_translation: Vec3,
    root_orientation: &RotationMatrix,
    local_rotations: &[RotationMatrix],
) -> Result<Vec<Vec3>, GeomError> {
    let n = skeleton.joint_count();
    if local_rotations.len() != n {
        return Err(GeomError::ShapeMismatch {
            expected: n,
            got: local_rotations.len(),
        });
    }
    let mut world_rot = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    world_rot.push(root_orientation.mul(&local_rotations[0]));
    positions.push(root_translation);
    for j in 1..n {
        let p = skeleton.parents[j];
        let parent_rot: &RotationMatrix = &world_rot[p];
        positions.push(vec_add(positions[p], parent_rot.apply(skeleton.offset(j))));
        world_rot.push(parent_rot.mul(&local_rotations[j]));
    }
    Ok(positions)
}

/// Haar-uniform random rotation drawn from a random unit quaternion.
pub fn random_rotation(rng: &mut impl rand::Rng) -> RotationMatrix {
    loop {
        let q: [f64; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return RotationMatrix::from_quaternion(q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Independent oracle: axis-angle through the quaternion path.
    fn quat_axis_angle(r: &RotationMatrix) -> AxisAngle {
        let q = r.to_quaternion();
        let (w, v) = (
            q[0].abs(),
            if q[0] < 0.0 {
                [-q[1], -q[2], -q[3]]
            } else {
                [q[1], q[2], q[3]]
            },
        );
        let vn = vec_norm(v);
        let angle = 2.0 * vn.atan2(w);
        if vn < 1e-12 {
            AxisAngle {
                axis: [1.0, 0.0, 0.0],
                angle: 0.0,
            }
        } else {
            AxisAngle {
                axis: vec_scale(v, 1.0 / vn),
                angle,
            }
        }
    }

    #[test]
    fn identity_has_zero_angle() {
        let aa = matrix_to_axis_angle(&RotationMatrix::IDENTITY).unwrap();
        assert_eq!(aa.angle, 0.0);
        assert_eq!(aa.axis, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = RotationMatrix::rot_z(PI / 2.0);
        let aa = matrix_to_axis_angle(&r).unwrap();
        assert_abs_diff_eq!(aa.angle, PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aa.axis[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn axis_angle_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let r = random_rotation(&mut rng);
            let got = matrix_to_axis_angle(&r).unwrap();
            let want = quat_axis_angle(&r);
            assert_abs_diff_eq!(got.angle, want.angle, epsilon = 1e-7);
            if want.angle > 1e-6 {
                assert_abs_diff_eq!(vec_dot(got.axis, want.axis).abs(), 1.0, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn near_pi_axis_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let axis = {
                let v = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                vec_scale(v, 1.0 / vec_norm(v))
            };
            let angle = PI - rng.gen_range(0.0..1e-6);
            let r = RotationMatrix::from_axis_angle(axis, angle);
            let aa = matrix_to_axis_angle(&r).unwrap();
            assert_abs_diff_eq!(aa.angle, angle, epsilon = 1e-7);
            assert_abs_diff_eq!(vec_dot(aa.axis, axis).abs(), 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let bad = RotationMatrix([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(
            matrix_to_axis_angle(&bad),
            Err(GeomError::InvalidRotation(_))
        ));
    }

    #[test]
    fn geodesic_zero_for_equal_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            assert!(geodesic_delta(&r, &r).unwrap() < 1e-7);
        }
    }

    #[test]
    fn geodesic_half_turn() {
        let r = RotationMatrix::rot_x(PI);
        let d = geodesic_delta(&RotationMatrix::IDENTITY, &r).unwrap();
        assert_abs_diff_eq!(d, PI, epsilon = 1e-9);
    }

    #[test]
    fn geodesic_matches_quaternion_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let got = geodesic_delta(&a, &b).unwrap();
            // Oracle: angle between unit quaternions, 2*acos(|<qa, qb>|).
            let qa = a.to_quaternion();
            let qb = b.to_quaternion();
            let dot: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
            let want = 2.0 * dot.abs().clamp(0.0, 1.0).acos();
            assert_abs_diff_eq!(got, want, epsilon = 1e-7);
        }
    }

    #[test]
    fn rot6d_identity_columns() {
        let r6 = rot6d_encode(&RotationMatrix::IDENTITY);
        assert_eq!(r6.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rot6d_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_decode(&rot6d_encode(&r)).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(back.0[i][j], r.0[i][j], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn rot6d_decode_gram_schmidt_hand_case() {
        // Hand Gram-Schmidt on a1 = (2,0,0), a2 = (1,1,0):
        // b1 = (1,0,0); a2 - (a2.b1)b1 = (0,1,0); b3 = (0,0,1) -> identity.
        let r = rot6d_decode(&Rotation6D([2.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r.0[i][j], RotationMatrix::IDENTITY.0[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rot6d_degenerate_inputs_rejected() {
        assert!(matches!(
            rot6d_decode(&Rotation6D([0.0; 6])),
            Err(GeomError::Degenerate6d(_))
        ));
        assert!(matches!(
            rot6d_decode(&Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])),
            Err(GeomError::Degenerate6d(_))
        ));
    }

    #[test]
    fn fk_rest_pose_accumulates_offsets() {
        let sk = Skeleton::chain(3, [0.0, 1.0, 0.0]);
        let rots = vec![RotationMatrix::IDENTITY; 3];
        let pos = forward_kinematics(&sk, [0.0; 3], &RotationMatrix::IDENTITY, &rots).unwrap();
        assert_eq!(pos[0], [0.0, 0.0, 0.0]);
        assert_eq!(pos[1], [0.0, 1.0, 0.0]);
        assert_eq!(pos[2], [0.0, 2.0, 0.0]);
    }

    #[test]
    fn fk_rigid_translation() {
        let sk = Skeleton::default_body();
        let rots = vec![RotationMatrix::IDENTITY; sk.joint_count()];
        let base = forward_kinematics(&sk, [0.0; 3], &RotationMatrix::IDENTITY, &rots).unwrap();
        let t = [1.5, -2.0, 0.25];
        let moved = forward_kinematics(&sk, t, &RotationMatrix::IDENTITY, &rots).unwrap();
        for (b, m) in base.iter().zip(&moved) {
            for k in 0..3 {
                assert_abs_diff_eq!(m[k], b[k] + t[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fk_two_bone_planar_arm() {
        // Chain of 3 along +X, middle joint bent pi/2 about +Z:
        // joint 1 at (1,0,0), the bend sends joint 2 to (1,1,0).
        let sk = Skeleton::chain(3, [1.0, 0.0, 0.0]);
        let rots = vec![
            RotationMatrix::IDENTITY,
            RotationMatrix::rot_z(PI / 2.0),
            RotationMatrix::IDENTITY,
        ];
        let pos = forward_kinematics(&sk, [0.0; 3], &RotationMatrix::IDENTITY, &rots).unwrap();
        assert_abs_diff_eq!(pos[1][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pos[2][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pos[2][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_length_mismatch_rejected() {
        let sk = Skeleton::chain(3, [1.0, 0.0, 0.0]);
        let rots = vec![RotationMatrix::IDENTITY; 2];
        assert!(matches!(
            forward_kinematics(&sk, [0.0; 3], &RotationMatrix::IDENTITY, &rots),
            Err(GeomError::ShapeMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn fk_equivariant_under_root_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sk = Skeleton::default_body();
        for _ in 0..20 {
            let rots: Vec<_> = (0..sk.joint_count())
                .map(|_| random_rotation(&mut rng))
                .collect();
            let root = random_rotation(&mut rng);
            let g = random_rotation(&mut rng);
            let t = [0.3, 1.1, -0.7];
            let base = forward_kinematics(&sk, t, &root, &rots).unwrap();
            let turned = forward_kinematics(&sk, t, &g.mul(&root), &rots).unwrap();
            for (b, m) in base.iter().zip(&turned) {
                let want = vec_add(t, g.apply(vec_sub(*b, t)));
                for k in 0..3 {
                    assert_abs_diff_eq!(m[k], want[k], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn heading_decompose_recomposes_and_is_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let r = random_rotation(&mut rng);
            let (h, t) = r.heading_decompose();
            // A pure Y rotation fixes the Y axis.
            let up = h.apply([0.0, 1.0, 0.0]);
            assert_abs_diff_eq!(up[0], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(up[1], 1.0, epsilon = 1e-9);
            let back = h.mul(&t);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(back.0[i][j], r.0[i][j], epsilon = 1e-9);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn geodesic_is_symmetric_bounded_metric(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            let dab = geodesic_delta(&a, &b).unwrap();
            let dba = geodesic_delta(&b, &a).unwrap();
            prop_assert!((0.0..=PI + 1e-12).contains(&dab));
            prop_assert!((dab - dba).abs() < 1e-9);
            let dac = geodesic_delta(&a, &c).unwrap();
            let dcb = geodesic_delta(&c, &b).unwrap();
            prop_assert!(dab <= dac + dcb + 1e-6);
        }

        #[test]
        fn rot6d_decode_is_orthonormal(v in proptest::array::uniform6(-3.0f64..3.0)) {
            if let Ok(r) = rot6d_decode(&Rotation6D(v)) {
                let rt = r.transpose().mul(&r);
                for i in 0..3 {
                    for j in 0..3 {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        prop_assert!((rt.0[i][j] - expect).abs() < 1e-9);
                    }
                }
                prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }
}
