//! 3D Gaussian scenes: storage, PLY interchange, synthetic landmark scenes
//! and a CPU rasterizer.
//!
//! Opacities and scales are stored activated (in `[0, 1]` and world units);
//! the PLY layer converts to and from the usual logit / log encoding.

mod ply;
mod render;
mod synthetic;

pub use ply::{load_ply, save_ply};
pub use render::{
    class_coverage, render, render_with, visible_landmark_histogram, write_png, write_ppm,
    Coverage, RenderSettings, RenderedImage,
};
pub use synthetic::{make_synthetic_scene, ClassSpec, SceneSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat3_mul, mat3_transpose, sub3, Mat3, Pose, Quaternion, Vec3};

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Anisotropic Gaussians with optional per-Gaussian landmark tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    pub centroids: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub scales: Vec<Vec3>,
    pub rotations: Vec<Quaternion>,
    /// Degree-0 SH coefficient per channel.
    pub sh_dc: Vec<[f64; 3]>,
    /// Higher-order coefficients, `[coeff][channel]`, `(degree+1)^2 - 1`
    /// per Gaussian. Empty for degree-0 scenes.
    pub sh_rest: Vec<Vec<[f64; 3]>>,
    pub landmark_class: Option<Vec<u32>>,
    /// Names for the landmark class indices, if known.
    pub class_names: Vec<String>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// SH degree implied by `sh_rest` (0 when absent).
    pub fn sh_degree(&self) -> usize {
        let k = self.sh_rest.first().map_or(0, |r| r.len()) + 1;
        (k as f64).sqrt().round() as usize - 1
    }

    /// Number of landmark classes (names or largest tag + 1).
    pub fn class_count(&self) -> usize {
        let from_tags = self
            .landmark_class
            .as_ref()
            .and_then(|c| c.iter().max())
            .map_or(0, |m| *m as usize + 1);
        from_tags.max(self.class_names.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.opacities.len(),
            self.scales.len(),
            self.rotations.len(),
            self.sh_dc.len(),
        ];
        if lens.iter().any(|l| *l != n) {
            return Err(Error::data("scene arrays differ in length"));
        }
        if !self.sh_rest.is_empty() {
            if self.sh_rest.len() != n {
                return Err(Error::data("sh_rest length differs from Gaussian count"));
            }
            let k = self.sh_rest[0].len();
            if self.sh_rest.iter().any(|r| r.len() != k) || !matches!(k, 3 | 8 | 15) {
                return Err(Error::data(format!("unsupported SH coefficient count {k}")));
            }
        }
        if let Some(c) = &self.landmark_class {
            if c.len() != n {
                return Err(Error::data(
                    "landmark_class length differs from Gaussian count",
                ));
            }
        }
        for i in 0..n {
            let o = self.opacities[i];
            if !(0.0..=1.0).contains(&o) {
                return Err(Error::data(format!(
                    "gaussian {i}: opacity {o} outside [0, 1]"
                )));
            }
            if self.scales[i].iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(Error::data(format!(
                    "gaussian {i}: scales must be positive"
                )));
            }
            if self.centroids[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("gaussian {i}: non-finite centroid")));
            }
            if (self.rotations[i].norm() - 1.0).abs() > 1e-6 {
                return Err(Error::data(format!(
                    "gaussian {i}: rotation not unit length"
                )));
            }
        }
        Ok(())
    }
}

/// Pinhole camera. Pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)` and
/// the principal point sits at the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub fov_x: f64,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Square pixels: `fov_y` follows from `fov_x` and the aspect ratio.
    pub fn new(pose: Pose, fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let fov_y = 2.0 * ((0.5 * fov_x).tan() * height as f64 / width.max(1) as f64).atan();
        let cam = Camera {
            pose,
            fov_x,
            fov_y,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Camera { pose, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < std::f64::consts::PI;
        if !ok(self.fov_x) || !ok(self.fov_y) {
            return Err(Error::config("field of view must lie in (0, pi)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be at least 1x1"));
        }
        Ok(())
    }

    pub fn focal(&self) -> (f64, f64) {
        (
            0.5 * self.width as f64 / (0.5 * self.fov_x).tan(),
            0.5 * self.height as f64 / (0.5 * self.fov_y).tan(),
        )
    }

    /// Pixel coordinates and depth of a world point (`None` behind the
    /// camera).
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.pose.world_to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        let (fx, fy) = self.focal();
        Some((
            fx * c[0] / c[2] + 0.5 * self.width as f64,
            fy * c[1] / c[2] + 0.5 * self.height as f64,
            c[2],
        ))
    }
}

/// `R S S^T R^T` for a diagonal scale `S` and rotation `R`.
pub fn covariance3d(scale: Vec3, rot: Quaternion) -> Mat3 {
    let r = rot.to_matrix();
    let mut rs = r;
    for row in rs.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= scale[j];
        }
    }
    mat3_mul(&rs, &mat3_transpose(&rs))
}

/// `O exp(-1/2 (q - c)^T cov_inv (q - c))`.
pub fn gaussian_influence(q: Vec3, center: Vec3, cov_inv: &Mat3, opacity: f64) -> f64 {
    let d = sub3(q, center);
    let mut m = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            m += d[i] * cov_inv[i][j] * d[j];
        }
    }
    opacity * (-0.5 * m.max(0.0)).exp()
}

/// Inverse of a 3x3 matrix via the adjugate (`None` when singular).
pub fn invert3(m: &Mat3) -> Option<Mat3> {
    let c =
        |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = cof[j][i] / det;
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mat3_vec, uniform_rotation};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariance_examples() {
        let c = covariance3d([1.0, 1.0, 1.0], Quaternion::IDENTITY);
        assert_eq!(c, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let c = covariance3d([2.0, 1.0, 1.0], Quaternion::IDENTITY);
        assert_eq!(c, [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn covariance_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s: Vec3 = std::array::from_fn(|_| rng.random_range(0.1..3.0));
            let q = uniform_rotation(&mut rng);
            let r = q.to_matrix();
            let sm = [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]];
            let rs = mat3_mul(&r, &sm);
            let oracle = mat3_mul(&rs, &mat3_transpose(&rs));
            let got = covariance3d(s, q);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(got[i][j], oracle[i][j], epsilon = 1e-9);
                    assert_eq!(got[i][j], got[j][i]);
                }
            }
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        // R^T Sigma R is diagonal with entries s_i^2 exactly when the
        // eigen-decomposition is the one we built.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s: Vec3 = std::array::from_fn(|_| rng.random_range(0.1..3.0));
            let q = uniform_rotation(&mut rng);
            let sigma = covariance3d(s, q);
            let r = q.to_matrix();
            for (k, sk) in s.iter().enumerate() {
                let axis = [r[0][k], r[1][k], r[2][k]];
                let img = mat3_vec(&sigma, axis);
                for i in 0..3 {
                    assert_abs_diff_eq!(img[i], sk * sk * axis[i], epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn influence_examples() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(
            gaussian_influence([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], &id, 0.7),
            0.7
        );
        let h = gaussian_influence([1.0, 1.0, 0.0], [0.0; 3], &id, 1.0);
        assert_abs_diff_eq!(h, (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.3679, epsilon = 1e-4);
    }

    #[test]
    fn influence_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let s: Vec3 = std::array::from_fn(|_| rng.random_range(0.3..2.0));
            let q = uniform_rotation(&mut rng);
            let inv = invert3(&covariance3d(s, q)).unwrap();
            let c: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let p: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let o: f64 = rng.random_range(0.1..1.0);
            // oracle: rotate into the principal frame and use the scales
            let local = mat3_vec(&mat3_transpose(&q.to_matrix()), sub3(p, c));
            let m: f64 = (0..3).map(|i| (local[i] / s[i]).powi(2)).sum();
            let oracle = o * (-0.5 * m).exp();
            let got = gaussian_influence(p, c, &inv, o);
            assert!((got - oracle).abs() <= 1e-9 * oracle.max(1e-300));
            assert!(got <= o);
        }
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        assert!(Camera::new(Pose::IDENTITY, 0.0, 10, 10).is_err());
        assert!(Camera::new(Pose::IDENTITY, 1.0, 0, 10).is_err());
        let c = Camera::new(Pose::IDENTITY, 1.0, 20, 10).unwrap();
        assert!(c.fov_y < c.fov_x);
        let (u, v, z) = c.project([0.0, 0.0, 2.0]).unwrap();
        assert_eq!((u, v, z), (10.0, 5.0, 2.0));
        assert!(c.project([0.0, 0.0, -1.0]).is_none());
    }
}
