//! Rotation, covariance and pinhole projection math.
//!
//! Conventions: quaternions are `(w, x, y, z)`; cameras follow the
//! x-right / y-down / z-forward pinhole model, and a camera pose is the
//! world-from-camera rigid transform.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x4, Vector3};
use thiserror::Error;

/// Camera-space depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Diagonal low-pass dilation added to every projected covariance (px²).
pub const COV2D_DILATION: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate quaternion (zero norm)")]
    DegenerateQuaternion,
    #[error("scale components must be positive, got {0:?}")]
    NonPositiveScale([f64; 3]),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self, GeomError> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeomError::DegenerateQuaternion);
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Rotation matrix of a unit quaternion (no normalization).
fn unit_quat_to_rotmat(q: Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of `q`, normalizing first.
pub fn quat_to_rotmat(q: Quaternion) -> Result<Matrix3<f64>, GeomError> {
    Ok(unit_quat_to_rotmat(q.normalized()?))
}

/// Vector-Jacobian product of [`quat_to_rotmat`]: given `dL/dR`, returns
/// `dL/dq` with respect to the raw (unnormalized) quaternion components.
pub fn quat_to_rotmat_vjp(q: Quaternion, d_rot: &Matrix3<f64>) -> Result<[f64; 4], GeomError> {
    let n = q.norm();
    let u = q.normalized()?;
    let Quaternion { w, x, y, z } = u;
    let d = d_rot;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g = [d.dot(&dw), d.dot(&dx), d.dot(&dy), d.dot(&dz)];
    Ok(normalize_vjp(u.to_array(), n, g))
}

/// VJP of `q -> q / |q|` given the unit result `u` and the norm `n`.
pub fn normalize_vjp<const N: usize>(u: [f64; N], n: f64, g: [f64; N]) -> [f64; N] {
    let ug: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
    let mut out = [0.0; N];
    for i in 0..N {
        out[i] = (g[i] - u[i] * ug) / n;
    }
    out
}

fn check_scale(s: [f64; 3]) -> Result<(), GeomError> {
    if s.iter().all(|v| *v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(GeomError::NonPositiveScale(s))
    }
}

/// World-space covariance `R S Sᵀ Rᵀ` for rotation `q` and per-axis scales `s`.
pub fn covariance_3d(q: Quaternion, s: [f64; 3]) -> Result<Matrix3<f64>, GeomError> {
    check_scale(s)?;
    let m = quat_to_rotmat(q)? * Matrix3::from_diagonal(&Vector3::from(s));
    Ok(m * m.transpose())
}

/// Pinhole camera with a world-from-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-from-camera rotation (columns are the camera axes in world frame).
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates.
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeomError> {
        let cam = Self { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down +z.
    pub fn identity_pose(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self { fx, fy, cx, cy, width, height, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `eye` looking at `target`, with `up` giving the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: [f64; 4],
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeomError::InvalidCamera("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        // y points down in image space
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let [fx, fy, cx, cy] = intrinsics;
        Self::new(fx, fy, cx, cy, width, height, rotation, eye)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidCamera(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeomError::InvalidCamera("zero resolution".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(GeomError::InvalidCamera(format!("pose rotation not orthonormal (err {err:e})")));
        }
        Ok(())
    }

    /// Camera-from-world rotation `W`.
    pub fn view_rotation(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K [W | -W t]`, mapping homogeneous world points to homogeneous pixels.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let w = self.view_rotation();
        let t = -(w * self.translation);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
        rt.set_column(3, &t);
        self.intrinsics() * rt
    }

    /// Pose as a row-major 3×4 `[R | t]` (world-from-camera).
    pub fn pose_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn with_pose_rows(&self, rows: &[f64; 12]) -> Self {
        let mut cam = self.clone();
        for r in 0..3 {
            for c in 0..3 {
                cam.rotation[(r, c)] = rows[r * 4 + c];
            }
            cam.translation[r] = rows[r * 4 + 3];
        }
        cam
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Pixel coordinates plus camera-space depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Projects a world point; `None` when the point is at or behind the camera plane.
pub fn project_point(x: &Vector3<f64>, cam: &Camera) -> Option<ProjectedPoint> {
    let p = cam.world_to_camera(x);
    if p.z <= MIN_DEPTH {
        return None;
    }
    Some(ProjectedPoint { u: cam.fx * p.x / p.z + cam.cx, v: cam.fy * p.y / p.z + cam.cy, depth: p.z })
}

/// Inverse of [`project_point`] for a pixel coordinate and camera-space depth.
pub fn unproject_pixel(u: f64, v: f64, depth: f64, cam: &Camera) -> Vector3<f64> {
    let p = Vector3::new((u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth);
    cam.camera_to_world(&p)
}

/// Jacobian of the pinhole projection at camera-space point `p`.
pub fn projection_jacobian(p: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz2, 0.0, fy * iz, -fy * p.y * iz2)
}

/// Result of projecting a 3D covariance onto the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedCov {
    /// `J W Σ Wᵀ Jᵀ + 0.3·I`.
    pub cov: Matrix2<f64>,
    /// Determinant before dilation.
    pub raw_det: f64,
}

impl ProjectedCov {
    pub fn is_degenerate(&self) -> bool {
        !(self.raw_det > 0.0)
    }
}

/// Projects a covariance through an explicit Jacobian `J` and view rotation `W`.
pub fn project_covariance_with(sigma: &Matrix3<f64>, j: &Matrix2x3<f64>, w: &Matrix3<f64>) -> ProjectedCov {
    let t = j * w;
    let raw = t * sigma * t.transpose();
    // symmetrize against round-off
    let off = 0.5 * (raw[(0, 1)] + raw[(1, 0)]);
    let raw = Matrix2::new(raw[(0, 0)], off, off, raw[(1, 1)]);
    ProjectedCov { cov: raw + Matrix2::identity() * COV2D_DILATION, raw_det: raw.determinant() }
}

/// Screen-space covariance of a Gaussian with world covariance `sigma` centered at `x`.
pub fn project_covariance(sigma: &Matrix3<f64>, x: &Vector3<f64>, cam: &Camera) -> ProjectedCov {
    let p = cam.world_to_camera(x);
    let j = projection_jacobian(&p, cam.fx, cam.fy);
    project_covariance_with(sigma, &j, &cam.view_rotation())
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
pub fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}
