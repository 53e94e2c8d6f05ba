//! Pinhole cameras, fundamental matrices, epipolar distances and two-view
//! triangulation.
//!
//! Convention: for a point `x` in view A and its partner `x'` in view B the
//! fundamental matrix satisfies `x̃'ᵀ F x̃ = 0`. Pixel `(c, r)` has its centre
//! at image coordinate `(c, r)`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, Unit, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `RᵀR = I` and `det R = 1`.
const ROTATION_TOL: f64 = 1e-9;
/// Below this magnitude of `((Fx̃)₁, (Fx̃)₂)` the epipolar line is undefined.
pub const DEGENERATE_LINE_TOL: f64 = 1e-12;
/// Minimum angle (radians) between the two viewing rays for triangulation.
const MIN_RAY_ANGLE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("intrinsics must be upper-triangular with positive focal lengths")]
    InvalidIntrinsics,
    #[error("image size must be positive, got {0}x{1}")]
    InvalidImageSize(u32, u32),
    #[error("point has non-positive depth {0} in the camera frame")]
    DegenerateProjection(f64),
    #[error("camera centres coincide (baseline {0:e} m)")]
    DegenerateBaseline(f64),
    #[error("epipolar line undefined: point is the epipole")]
    DegenerateLine,
    #[error("viewing rays are nearly parallel (angle {0:e} rad)")]
    IllConditionedTriangulation(f64),
}

/// A calibrated pinhole camera: `x̃ ∝ K (R X + t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: u32,
    height: u32,
}

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidImageSize(width, height));
        }
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper || !(k[(0, 0)] > 0.0) || !(k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(GeometryError::InvalidIntrinsics);
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        let det = (r.determinant() - 1.0).abs();
        let dev = ortho.max(det);
        if !(dev <= ROTATION_TOL) {
            return Err(GeometryError::InvalidRotation(dev));
        }
        Ok(Self {
            k,
            r,
            t,
            width,
            height,
        })
    }

    /// Intrinsics with square pixels and zero skew.
    pub fn intrinsics(focal: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0)
    }

    /// Camera at `eye` looking at `target`; image y points away from `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let down = -(up - forward * up.dot(&forward)).normalize();
        let right = down.cross(&forward);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let k = Self::intrinsics(
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
        );
        Self::new(k, r, -r * eye, width, height)
    }

    pub fn k(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Optical centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.r.transpose() * self.t
    }

    /// The 3×4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &self.t);
        self.k * rt
    }

    pub fn to_camera_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.r * world + self.t
    }

    /// Depth (camera-frame z) of a world point.
    pub fn depth(&self, world: &Vector3<f64>) -> f64 {
        self.to_camera_frame(world).z
    }

    pub fn project(&self, world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let cam = self.to_camera_frame(world);
        if !(cam.z > 0.0) {
            return Err(GeometryError::DegenerateProjection(cam.z));
        }
        let h = self.k * cam;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Unit world-frame direction of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let k_inv = self.k_inverse();
        let local = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        (self.r.transpose() * local).normalize()
    }

    /// Whether `pixel` rounds to a pixel inside the image.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    /// The same camera rotated by `angle` radians about `axis` through its
    /// optical centre (a calibration error that keeps the centre fixed).
    pub fn with_rotation_error(&self, axis: Vector3<f64>, angle: f64) -> Self {
        let delta = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        let center = self.center();
        let r = self.r * delta.matrix();
        Self {
            k: self.k,
            r,
            t: -r * center,
            width: self.width,
            height: self.height,
        }
    }

    fn k_inverse(&self) -> Matrix3<f64> {
        // Upper-triangular with positive diagonal, always invertible.
        self.k
            .try_inverse()
            .expect("validated intrinsics are invertible")
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: u32,
    height: u32,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CameraRecord {
            k: row_major(&self.k),
            r: row_major(&self.r),
            t: [self.t.x, self.t.y, self.t.z],
            width: self.width,
            height: self.height,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = CameraRecord::deserialize(d)?;
        Camera::new(
            Matrix3::from_row_slice(&rec.k),
            Matrix3::from_row_slice(&rec.r),
            Vector3::from(rec.t),
            rec.width,
            rec.height,
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Two cameras and the fundamental matrix relating A to B.
#[derive(Debug, Clone)]
pub struct CalibratedPair {
    pub cam_a: Camera,
    pub cam_b: Camera,
    f: Matrix3<f64>,
}

impl CalibratedPair {
    pub fn new(cam_a: Camera, cam_b: Camera) -> Result<Self, GeometryError> {
        let f = fundamental_from_pair(&cam_a, &cam_b)?;
        Ok(Self { cam_a, cam_b, f })
    }

    /// A pair with an externally supplied fundamental matrix, e.g. one
    /// derived from miscalibrated cameras.
    pub fn with_fundamental(cam_a: Camera, cam_b: Camera, f: Matrix3<f64>) -> Self {
        Self { cam_a, cam_b, f }
    }

    pub fn fundamental(&self) -> &Matrix3<f64> {
        &self.f
    }

    /// The same pair seen from B: cameras swapped, `F` transposed.
    pub fn swapped(&self) -> Self {
        Self {
            cam_a: self.cam_b.clone(),
            cam_b: self.cam_a.clone(),
            f: self.f.transpose(),
        }
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `F = K_B⁻ᵀ [t_rel]ₓ R_rel K_A⁻¹`, scaled to unit Frobenius norm.
pub fn fundamental_from_pair(
    cam_a: &Camera,
    cam_b: &Camera,
) -> Result<Matrix3<f64>, GeometryError> {
    let baseline = (cam_a.center() - cam_b.center()).norm();
    if !(baseline > 1e-12) {
        return Err(GeometryError::DegenerateBaseline(baseline));
    }
    let r_rel = cam_b.r * cam_a.r.transpose();
    let t_rel = cam_b.t - r_rel * cam_a.t;
    let f = cam_b.k_inverse().transpose() * skew(&t_rel) * r_rel * cam_a.k_inverse();
    Ok(f / f.norm())
}

/// Epipolar line `F x̃` in view B as coefficients `(a, b, c)` of `a x + b y + c = 0`.
pub fn epipolar_line(x: &Vector2<f64>, f: &Matrix3<f64>) -> Vector3<f64> {
    f * Vector3::new(x.x, x.y, 1.0)
}

/// Distance in pixels from `x'` (view B) to the epipolar line of `x` (view A).
pub fn epipolar_distance(
    x: &Vector2<f64>,
    x_prime: &Vector2<f64>,
    f: &Matrix3<f64>,
) -> Result<f64, GeometryError> {
    let line = epipolar_line(x, f);
    let norm = line.x.hypot(line.y);
    if line.x.abs() < DEGENERATE_LINE_TOL && line.y.abs() < DEGENERATE_LINE_TOL {
        return Err(GeometryError::DegenerateLine);
    }
    let residual = line.x * x_prime.x + line.y * x_prime.y + line.z;
    Ok(residual.abs() / norm)
}

/// Linear (DLT) triangulation of a correspondence `x ↔ x'`.
///
/// The 4×4 system is built in normalized image coordinates with unit-norm
/// rows; the solution is the right singular vector of the smallest singular
/// value.
pub fn triangulate(
    x: &Vector2<f64>,
    x_prime: &Vector2<f64>,
    pair: &CalibratedPair,
) -> Result<Vector3<f64>, GeometryError> {
    let ray_a = pair.cam_a.ray_direction(x);
    let ray_b = pair.cam_b.ray_direction(x_prime);
    let angle = ray_a.cross(&ray_b).norm().atan2(ray_a.dot(&ray_b));
    if !(angle > MIN_RAY_ANGLE) {
        return Err(GeometryError::IllConditionedTriangulation(angle));
    }

    let mut a = Matrix4::zeros();
    for (row_base, (cam, px)) in [(&pair.cam_a, x), (&pair.cam_b, x_prime)]
        .into_iter()
        .enumerate()
    {
        let n = cam.k_inverse() * Vector3::new(px.x, px.y, 1.0);
        let (nx, ny) = (n.x / n.z, n.y / n.z);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.r);
        rt.set_column(3, &cam.t);
        let rows = [rt.row(2) * nx - rt.row(0), rt.row(2) * ny - rt.row(1)];
        for (k, row) in rows.iter().enumerate() {
            let row = row / row.norm();
            a.set_row(2 * row_base + k, &row);
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (min_idx, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (i, &s)| if s < best.1 { (i, s) } else { best },
            );
    let h: Vector4<f64> = v_t.row(min_idx).transpose();
    if h.w.abs() < 1e-15 {
        return Err(GeometryError::IllConditionedTriangulation(angle));
    }
    Ok(Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}
