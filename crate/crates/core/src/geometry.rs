//! Rigid poses: quaternion algebra, pose error metrics and the tangent-space
//! retraction used by refinement.
//!
//! Quaternions are stored `(w, x, y, z)` and kept on the `w >= 0`
//! hemisphere. A [`Pose`] maps camera coordinates to world coordinates, so
//! its translation is the camera centre in the world frame.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: Vec3) -> Vec3 {
    [dot3(a[0], v), dot3(a[1], v), dot3(a[2], v)]
}

/// A quaternion `(w, x, y, z)`. Not necessarily unit length; see
/// [`quat_normalize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Quaternion::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn neg(self) -> Self {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Quaternion) -> Self {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Exponential map from an axis-angle vector (radians).
    pub fn from_rotation_vector(omega: Vec3) -> Self {
        let angle = norm3(omega);
        if angle < 1e-12 {
            // second-order accurate near zero
            let q = Quaternion::new(1.0, 0.5 * omega[0], 0.5 * omega[1], 0.5 * omega[2]);
            let n = q.norm();
            return Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n);
        }
        let half = 0.5 * angle;
        let s = half.sin() / angle;
        Quaternion::new(half.cos(), omega[0] * s, omega[1] * s, omega[2] * s)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> Mat3 {
        let Quaternion { w, x, y, z } = self;
        [
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
        ]
    }

    /// Unit quaternion from a proper rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Mat3) -> Self {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        quat_normalize(q.to_array()).unwrap_or(Quaternion::IDENTITY)
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        mat3_vec(&self.to_matrix(), v)
    }
}

/// Normalizes `q` to unit length and moves it onto the canonical hemisphere
/// (`w > 0`, or the first nonzero of `x, y, z` positive when `w == 0`).
pub fn quat_normalize(q: [f64; 4]) -> Result<Quaternion> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateQuaternion);
    }
    // unit to rounding: keep as is so that normalizing is exactly idempotent
    let mut u = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        q
    } else {
        q.map(|v| v / n)
    };
    let lead = u.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
    if lead < 0.0 {
        u = u.map(|v| -v);
    }
    Ok(Quaternion::from_array(u))
}

/// Rigid transform from camera to world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: Quaternion::IDENTITY,
        translation: [0.0; 3],
    };

    /// Builds a pose, normalizing and canonicalizing the rotation.
    pub fn new(rotation: [f64; 4], translation: Vec3) -> Result<Self> {
        Ok(Pose {
            rotation: quat_normalize(rotation)?,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`, with the camera's `-y` axis as
    /// close to world `+z` as possible. Camera axes: `x` right, `y` down,
    /// `z` forward.
    pub fn look_at(eye: Vec3, target: Vec3) -> Result<Self> {
        let fwd = sub3(target, eye);
        let n = norm3(fwd);
        if !(n > 0.0) {
            return Err(Error::config("look_at target coincides with eye"));
        }
        let fwd = scale3(fwd, 1.0 / n);
        let mut right = cross3(fwd, [0.0, 0.0, 1.0]);
        if norm3(right) < 1e-9 {
            right = [1.0, 0.0, 0.0];
        }
        let right = scale3(right, 1.0 / norm3(right));
        let down = cross3(fwd, right);
        let m = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        Ok(Pose {
            rotation: Quaternion::from_matrix(&m),
            translation: eye,
        })
    }

    /// Camera with horizontal optical axis at heading `yaw` (radians,
    /// measured from world `+x` towards `+y`).
    pub fn from_yaw(eye: Vec3, yaw: f64) -> Self {
        let target = [eye[0] + yaw.cos(), eye[1] + yaw.sin(), eye[2]];
        Pose::look_at(eye, target).expect("unit offset is never degenerate")
    }

    /// World-to-camera rotation matrix.
    pub fn world_to_camera_rotation(&self) -> Mat3 {
        mat3_transpose(&self.rotation.to_matrix())
    }

    /// Maps a world point into camera coordinates.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        mat3_vec(&self.world_to_camera_rotation(), sub3(p, self.translation))
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.rotate([0.0, 0.0, 1.0])
    }
}

/// 7-component flattened pose `(qw, qx, qy, qz, tx, ty, tz)`; translations
/// are in whatever frame the producer chose (normalized scene coordinates
/// inside the diffusion model).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseVector(pub [f64; 7]);

impl PoseVector {
    pub fn rotation_part(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn translation_part(&self) -> Vec3 {
        [self.0[4], self.0[5], self.0[6]]
    }
}

/// Local pose perturbation: axis-angle `omega` (radians, world frame) and a
/// translation `v` (world units).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TangentDelta {
    pub omega: Vec3,
    pub v: Vec3,
}

impl TangentDelta {
    pub const ZERO: TangentDelta = TangentDelta {
        omega: [0.0; 3],
        v: [0.0; 3],
    };

    pub fn from_array(d: [f64; 6]) -> Self {
        TangentDelta {
            omega: [d[0], d[1], d[2]],
            v: [d[3], d[4], d[5]],
        }
    }

    pub fn neg(self) -> Self {
        TangentDelta {
            omega: scale3(self.omega, -1.0),
            v: scale3(self.v, -1.0),
        }
    }
}

/// Geodesic angle between two rotations in degrees, in `[0, 180]`.
///
/// Uses `4 atan2(|a - b|, |a + b|)` after aligning signs, which equals
/// `2 acos(|<a, b>|)` for unit quaternions but stays exact near zero.
pub fn rotation_error_deg(a: &Pose, b: &Pose) -> f64 {
    let (p, mut q) = (a.rotation, b.rotation);
    if p.dot(q) < 0.0 {
        q = q.neg();
    }
    let diff = Quaternion::new(p.w - q.w, p.x - q.x, p.y - q.y, p.z - q.z).norm();
    let sum = Quaternion::new(p.w + q.w, p.x + q.x, p.y + q.y, p.z + q.z).norm();
    (4.0 * diff.atan2(sum)).to_degrees().clamp(0.0, 180.0)
}

/// Euclidean distance between camera centres.
pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    norm3(sub3(a.translation, b.translation))
}

/// `rotation = exp(omega) * p.rotation`, `translation = p.translation + v`.
pub fn retract(p: &Pose, d: &TangentDelta) -> Pose {
    if *d == TangentDelta::ZERO {
        return *p;
    }
    let r = Quaternion::from_rotation_vector(d.omega).mul(p.rotation);
    Pose {
        rotation: quat_normalize(r.to_array()).unwrap_or(p.rotation),
        translation: add3(p.translation, d.v),
    }
}

/// Rotation drawn uniformly from SO(3) (Shoemake's subgroup algorithm),
/// returned on the canonical hemisphere.
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = [a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos()];
    quat_normalize(q).unwrap_or(Quaternion::IDENTITY)
}

/// Standard-normal 3-vector.
pub fn gaussian3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}
