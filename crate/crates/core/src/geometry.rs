//! Projective primitives shared by every pipeline stage.
//!
//! Conventions: the reference camera looks down +Z, pixel coordinates are
//! `u = fx * x + cx`, `v = fy * y + cy`, and poses map reference-frame points
//! into camera `i` as `y_i = R_i * y_0 + r_i`.

use nalgebra::{Matrix2x3, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Guard on the third homogeneous component.
pub const DEPTH_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate depth: third component {0:e} is too close to zero or negative")]
    DegenerateDepth(f64),
    #[error("non-positive inverse depth {0:e}")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Pinhole intrinsics and image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera whose horizontal field of view spans `fov_deg`,
    /// principal point at the image center.
    pub fn from_fov(fov_deg: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::InvalidCamera(format!("fov {fov_deg} outside (0, 180)")));
        }
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidCamera("non-finite intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u <= self.width as f64 && p.v <= self.height as f64
    }

    /// Projects a camera-frame vector `q` to pixels, `K <q>`, with the 2x3
    /// Jacobian of the pixel coordinates with respect to `q`.
    pub fn project_with_jacobian(&self, q: &Vector3<f64>) -> Result<(PixelPoint, Matrix2x3<f64>), GeometryError> {
        if q.z <= 1e-9 {
            return Err(GeometryError::DegenerateDepth(q.z));
        }
        let iz = 1.0 / q.z;
        let x = q.x * iz;
        let y = q.y * iz;
        let jac = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x * iz,
            0.0,
            self.fy * iz,
            -self.fy * y * iz,
        );
        Ok((camera_to_pixel(self, NormalizedPoint { x, y }), jac))
    }
}

/// Pixel measurement `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Normalized camera coordinates; the homogeneous third component is 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, 1.0)
    }
}

/// Rotation vector (axis times angle, radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn new(t1: f64, t2: f64, t3: f64) -> Self {
        Self(Vector3::new(t1, t2, t3))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform from the reference frame into a camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn transform(&self, y0: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * y0 + self.translation
    }

    /// `R^T r`, the quantity compared by the translation error metric.
    pub fn rotated_translation(&self) -> Vector3<f64> {
        self.rotation.transpose() * self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }
}

/// Sharpness of the soft-plus reparameterization of inverse depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftPlusParams {
    pub alpha: f64,
}

impl SoftPlusParams {
    pub fn new(alpha: f64) -> Result<Self, GeometryError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(GeometryError::InvalidParameter(format!("soft-plus alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

impl Default for SoftPlusParams {
    fn default() -> Self {
        Self { alpha: 10.0 }
    }
}

pub fn normalize_homogeneous(v: &Vector3<f64>) -> Result<NormalizedPoint, GeometryError> {
    if v.z.abs() <= DEPTH_EPS {
        return Err(GeometryError::DegenerateDepth(v.z));
    }
    Ok(NormalizedPoint::new(v.x / v.z, v.y / v.z))
}

pub fn pixel_to_camera(cam: &CameraModel, p: PixelPoint) -> NormalizedPoint {
    NormalizedPoint::new((p.u - cam.cx) / cam.fx, (p.v - cam.cy) / cam.fy)
}

pub fn camera_to_pixel(cam: &CameraModel, x: NormalizedPoint) -> PixelPoint {
    PixelPoint::new(cam.fx * x.x + cam.cx, cam.fy * x.y + cam.cy)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// First-order rotation `I + [theta]x`. Not orthonormal.
pub fn small_rotation_matrix(theta: &RotationVector) -> Matrix3<f64> {
    Matrix3::identity() + skew(&theta.0)
}

/// Exponential map of a rotation vector.
pub fn exact_rotation(theta: &RotationVector) -> Rotation3<f64> {
    Rotation3::new(theta.0)
}

/// Logarithm map, inverse of [`exact_rotation`] for angles below pi.
///
/// Uses `atan2` on the antisymmetric part so that rotations a rounding error
/// away from the identity do not produce NaN.
pub fn rotation_log(r: &Rotation3<f64>) -> RotationVector {
    let m = r.matrix();
    let v = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5;
    let s = v.norm();
    let c = (m.trace() - 1.0) * 0.5;
    let angle = s.atan2(c);
    if angle > 3.0 {
        // Near pi the antisymmetric part vanishes; fall back to the axis form.
        return RotationVector(r.scaled_axis());
    }
    if s < 1e-300 {
        return RotationVector(Vector3::zeros());
    }
    RotationVector(v * (angle / s))
}

/// `max(0, w) + log1p(exp(-|alpha w|)) / alpha`.
///
/// The result is floored at the smallest normal double so that it stays
/// strictly positive where the true value underflows.
pub fn softplus(omega: f64, sp: SoftPlusParams) -> f64 {
    let a = sp.alpha;
    let value = omega.max(0.0) + (-(a * omega).abs()).exp().ln_1p() / a;
    value.max(f64::MIN_POSITIVE)
}

/// Derivative of [`softplus`], the logistic function of `alpha * omega`.
pub fn softplus_derivative(omega: f64, sp: SoftPlusParams) -> f64 {
    let t = sp.alpha * omega;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_inverse(w: f64, sp: SoftPlusParams) -> Result<f64, GeometryError> {
    if !(w > 0.0) {
        return Err(GeometryError::NonPositiveDepth(w));
    }
    let a = sp.alpha;
    if a * w > 30.0 {
        Ok(w)
    } else {
        Ok((a * w).exp_m1().ln() / a)
    }
}

/// Unit bearing `[cos(phi) sin(psi), -sin(phi), cos(phi) cos(psi)]`.
pub fn direction_vector(psi: f64, phi: f64) -> Vector3<f64> {
    let (sp, cp) = psi.sin_cos();
    let (sf, cf) = phi.sin_cos();
    Vector3::new(cf * sp, -sf, cf * cp)
}

/// Partial derivatives of [`direction_vector`] with respect to `psi` and `phi`.
pub fn direction_vector_partials(psi: f64, phi: f64) -> (Vector3<f64>, Vector3<f64>) {
    let (sp, cp) = psi.sin_cos();
    let (sf, cf) = phi.sin_cos();
    (Vector3::new(cf * cp, 0.0, -cf * sp), Vector3::new(-sf * sp, -cf, -sf * cp))
}

/// Azimuth, elevation and inverse distance of a reference-frame point.
pub fn point_to_azel(y: &Vector3<f64>) -> Result<(f64, f64, f64), GeometryError> {
    let n = y.norm();
    if y.z <= 0.0 || n <= DEPTH_EPS {
        return Err(GeometryError::DegenerateDepth(y.z));
    }
    let psi = (y.x / y.z).atan();
    let phi = (-y.y / (y.x * y.x + y.z * y.z).sqrt()).atan();
    Ok((psi, phi, 1.0 / n))
}
