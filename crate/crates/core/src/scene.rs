//! Synthetic ground truth: parametric surface patches with closed-form
//! geodesics, a procedural texture, and exact ray-cast rendering and
//! cross-view visibility.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DenseField, Keypoint, PixelCoord, DEFAULT_PART_COUNT};
use crate::geometry::{Camera, GeometryError};

/// Depth agreement required for a point to count as visible from a camera.
pub const DEPTH_MATCH_TOL: f64 = 1e-4;

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("uv ({0}, {1}) is outside the unit chart")]
    OutOfChart(f64, f64),
    #[error("no surface with part index {0}")]
    UnknownPart(u8),
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("camera index {0} out of range ({1} cameras)")]
    UnknownCamera(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    Cylinder,
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseConfig {
    /// Rotation about the world x, y and z axes, in degrees.
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            translation: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceConfig {
    pub kind: SurfaceKind,
    pub radius: f64,
    /// Cylinder: axial height. Sphere: meridian arc length of the band.
    pub height: f64,
    pub extent_deg: f64,
    #[serde(default)]
    pub pose: PoseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub seed: u64,
    /// Spatial frequencies in cycles per chart unit.
    pub frequencies: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub w: u32,
    pub h: u32,
}

/// Scene description as read from and echoed to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub surface: SurfaceConfig,
    /// Further disjoint patches, assigned part indices 1, 2, …
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_surfaces: Vec<SurfaceConfig>,
    pub texture: TextureConfig,
    pub cameras: Vec<Camera>,
    pub resolution: Resolution,
}

/// Cameras on a ring around the world y axis, all looking at the origin.
/// Azimuth 0 is the `-z` direction.
pub fn ring_cameras(
    azimuths_deg: &[f64],
    heights: &[f64],
    distance: f64,
    focal: f64,
    resolution: Resolution,
) -> Vec<Camera> {
    azimuths_deg
        .iter()
        .zip(heights)
        .map(|(&az, &h)| {
            let a = az.to_radians();
            let eye = Vector3::new(distance * a.sin(), h, -distance * a.cos());
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::y(),
                focal,
                resolution.w,
                resolution.h,
            )
            .expect("ring camera is valid")
        })
        .collect()
}

impl SurfaceConfig {
    /// Torso-scale cylinder patch whose chart centre faces `-z`.
    pub fn default_cylinder() -> Self {
        Self {
            kind: SurfaceKind::Cylinder,
            radius: 0.3,
            height: 1.2,
            extent_deg: 300.0,
            pose: PoseConfig {
                rotation_deg: [0.0, -120.0, 0.0],
                translation: [0.0; 3],
            },
        }
    }
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            frequencies: vec![1.3, 2.9],
        }
    }
}

impl Default for SceneConfig {
    /// Two-view default scene.
    fn default() -> Self {
        let resolution = Resolution { w: 88, h: 100 };
        Self {
            surface: SurfaceConfig::default_cylinder(),
            extra_surfaces: Vec::new(),
            texture: TextureConfig::default(),
            cameras: ring_cameras(&[-20.0, 20.0], &[0.3, -0.2], 2.5, 160.0, resolution),
            resolution,
        }
    }
}

impl SceneConfig {
    /// The four-camera benchmark rig used for refinement experiments.
    pub fn four_view_rig() -> Self {
        let resolution = Resolution { w: 48, h: 56 };
        Self {
            surface: SurfaceConfig::default_cylinder(),
            extra_surfaces: Vec::new(),
            texture: TextureConfig::default(),
            cameras: ring_cameras(
                &[-35.0, -12.0, 12.0, 35.0],
                &[0.45, -0.35, 0.35, -0.45],
                2.5,
                90.0,
                resolution,
            ),
            resolution,
        }
    }

    /// Two cylinder patches side by side, parts 0 and 1.
    pub fn two_part() -> Self {
        let mut left = SurfaceConfig::default_cylinder();
        left.radius = 0.2;
        left.height = 0.8;
        left.pose.translation = [-0.3, 0.0, 0.0];
        let mut right = left.clone();
        right.pose.translation = [0.3, 0.0, 0.0];
        let resolution = Resolution { w: 64, h: 48 };
        Self {
            surface: left,
            extra_surfaces: vec![right],
            texture: TextureConfig::default(),
            cameras: ring_cameras(&[-15.0, 15.0], &[0.2, -0.1], 2.5, 70.0, resolution),
            resolution,
        }
    }

    pub fn build(&self) -> Result<SyntheticScene, SceneError> {
        SyntheticScene::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SurfacePatch {
    pub kind: SurfaceKind,
    pub radius: f64,
    pub height: f64,
    /// Angular extent in radians.
    pub extent: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

struct LocalHit {
    t: f64,
    uv: Vector2<f64>,
}

impl SurfacePatch {
    fn from_config(c: &SurfaceConfig) -> Result<Self, SceneError> {
        if !(c.radius > 0.0 && c.radius.is_finite()) {
            return Err(SceneError::Config(format!(
                "radius must be positive, got {}",
                c.radius
            )));
        }
        if !(c.height > 0.0 && c.height.is_finite()) {
            return Err(SceneError::Config(format!(
                "height must be positive, got {}",
                c.height
            )));
        }
        if !(c.extent_deg > 0.0 && c.extent_deg <= 360.0) {
            return Err(SceneError::Config(format!(
                "extent_deg must lie in (0, 360], got {}",
                c.extent_deg
            )));
        }
        if c.kind == SurfaceKind::Sphere && c.height / c.radius > PI {
            return Err(SceneError::Config(
                "sphere band exceeds a half meridian".into(),
            ));
        }
        let [rx, ry, rz] = c.pose.rotation_deg.map(f64::to_radians);
        Ok(Self {
            kind: c.kind,
            radius: c.radius,
            height: c.height,
            extent: c.extent_deg.to_radians(),
            rotation: *Rotation3::from_euler_angles(rx, ry, rz).matrix(),
            translation: Vector3::from(c.pose.translation),
        })
    }

    fn closed(&self) -> bool {
        self.extent >= TAU - 1e-12
    }

    fn local_point(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        let theta = uv.x * self.extent;
        match self.kind {
            SurfaceKind::Cylinder => Vector3::new(
                self.radius * theta.cos(),
                self.height * (uv.y - 0.5),
                self.radius * theta.sin(),
            ),
            SurfaceKind::Sphere => {
                let phi = (uv.y - 0.5) * self.height / self.radius;
                self.radius
                    * Vector3::new(phi.cos() * theta.cos(), phi.sin(), phi.cos() * theta.sin())
            }
        }
    }

    pub fn point(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        self.rotation * self.local_point(uv) + self.translation
    }

    /// Outward unit normal at `uv`.
    pub fn normal(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        let theta = uv.x * self.extent;
        let local = match self.kind {
            SurfaceKind::Cylinder => Vector3::new(theta.cos(), 0.0, theta.sin()),
            SurfaceKind::Sphere => self.local_point(uv) / self.radius,
        };
        self.rotation * local
    }

    pub fn geodesic(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        match self.kind {
            SurfaceKind::Cylinder => {
                let mut dtheta = (a.x - b.x).abs() * self.extent;
                if self.closed() {
                    dtheta = dtheta.min(TAU - dtheta);
                }
                (self.radius * dtheta).hypot(self.height * (a.y - b.y))
            }
            // Great-circle distance; exact while the arc stays on the band.
            SurfaceKind::Sphere => {
                let na = self.local_point(a) / self.radius;
                let nb = self.local_point(b) / self.radius;
                self.radius * na.cross(&nb).norm().atan2(na.dot(&nb))
            }
        }
    }

    fn chart_angle(&self, x: f64, z: f64) -> Option<f64> {
        let theta = z.atan2(x).rem_euclid(TAU);
        if self.closed() {
            Some(theta / TAU)
        } else if theta <= self.extent {
            Some(theta / self.extent)
        } else {
            None
        }
    }

    /// Nearest intersection with `t > 0` of the world ray `origin + t dir`.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<LocalHit> {
        let o = self.rotation.transpose() * (origin - self.translation);
        let d = self.rotation.transpose() * dir;
        let (a, b, c) = match self.kind {
            SurfaceKind::Cylinder => (
                d.x * d.x + d.z * d.z,
                2.0 * (o.x * d.x + o.z * d.z),
                o.x * o.x + o.z * o.z - self.radius * self.radius,
            ),
            SurfaceKind::Sphere => (
                d.norm_squared(),
                2.0 * o.dot(&d),
                o.norm_squared() - self.radius * self.radius,
            ),
        };
        if a < 1e-300 {
            return None;
        }
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        // Numerically stable pair of roots.
        let q = -0.5 * (b + b.signum() * sq);
        let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { -b / (2.0 * a) });
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        for t in [t0, t1] {
            if t <= RAY_EPS {
                continue;
            }
            let p = o + d * t;
            let hit = match self.kind {
                SurfaceKind::Cylinder => {
                    let v = p.y / self.height + 0.5;
                    if !(0.0..=1.0).contains(&v) {
                        continue;
                    }
                    self.chart_angle(p.x, p.z).map(|u| Vector2::new(u, v))
                }
                SurfaceKind::Sphere => {
                    let phi = (p.y / self.radius).clamp(-1.0, 1.0).asin();
                    let v = phi * self.radius / self.height + 0.5;
                    if !(0.0..=1.0).contains(&v) {
                        continue;
                    }
                    self.chart_angle(p.x, p.z).map(|u| Vector2::new(u, v))
                }
            };
            if let Some(uv) = hit {
                return Some(LocalHit { t, uv });
            }
        }
        None
    }
}

/// Sum-of-sinusoids RGB texture over the chart.
#[derive(Debug, Clone)]
pub struct Texture {
    /// Per channel: (direction · frequency, phase, amplitude) per wave.
    waves: [Vec<(Vector2<f64>, f64, f64)>; 3],
}

impl Texture {
    pub fn new(config: &TextureConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = [0.0f64, 90.0, 45.0];
        let waves = base.map(|b| {
            config
                .frequencies
                .iter()
                .enumerate()
                .map(|(k, &f)| {
                    let angle = (b + 37.0 * k as f64 + rng.random_range(-15.0..15.0)).to_radians();
                    let dir = Vector2::new(angle.cos(), angle.sin()) * f * TAU;
                    (dir, rng.random_range(0.0..TAU), 1.0 / (k as f64 + 1.0))
                })
                .collect()
        });
        Self { waves }
    }

    /// Colour in `[0, 1]³`.
    pub fn rgb(&self, uv: &Vector2<f64>) -> [f64; 3] {
        self.waves.clone().map(|ws| {
            let total: f64 = ws.iter().map(|w| w.2).sum();
            let s: f64 = ws.iter().map(|(d, p, a)| a * (d.dot(uv) + p).sin()).sum();
            0.5 + 0.5 * s / total.max(f64::MIN_POSITIVE)
        })
    }

    pub fn rgb8(&self, uv: &Vector2<f64>) -> [u8; 3] {
        self.rgb(uv)
            .map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

/// Intersection of a ray with the scene.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub part: u8,
    pub uv: Vector2<f64>,
    pub point: Vector3<f64>,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    config: SceneConfig,
    patches: Vec<SurfacePatch>,
    texture: Texture,
}

/// One rendered camera: ground-truth field, depth and colour.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub camera_index: usize,
    pub field: DenseField,
    /// Camera-frame depth in metres; `NaN` on background.
    pub depth: Vec<f64>,
    pub rgb: Vec<[u8; 3]>,
}

impl RenderedView {
    pub fn width(&self) -> u32 {
        self.field.width()
    }

    pub fn height(&self) -> u32 {
        self.field.height()
    }

    pub fn rgb_at(&self, p: PixelCoord) -> [u8; 3] {
        self.rgb[p.y as usize * self.width() as usize + p.x as usize]
    }

    /// Foreground colours in row-major order, scaled to `[0, 1]`.
    pub fn foreground_colors(&self) -> Vec<[f64; 3]> {
        self.field
            .foreground()
            .map(|(p, _)| self.rgb_at(p).map(|c| c as f64 / 255.0))
            .collect()
    }
}

impl SyntheticScene {
    pub fn new(config: SceneConfig) -> Result<Self, SceneError> {
        let patches = std::iter::once(&config.surface)
            .chain(&config.extra_surfaces)
            .map(SurfacePatch::from_config)
            .collect::<Result<Vec<_>, _>>()?;
        if patches.len() > DEFAULT_PART_COUNT as usize {
            return Err(SceneError::Config("too many surface patches".into()));
        }
        if config.cameras.is_empty() {
            return Err(SceneError::Config("scene needs at least one camera".into()));
        }
        for (i, cam) in config.cameras.iter().enumerate() {
            if cam.width() != config.resolution.w || cam.height() != config.resolution.h {
                return Err(SceneError::Config(format!(
                    "camera {i} is {}x{} but the resolution is {}x{}",
                    cam.width(),
                    cam.height(),
                    config.resolution.w,
                    config.resolution.h
                )));
            }
        }
        if config
            .texture
            .frequencies
            .iter()
            .any(|f| !(f.is_finite() && *f > 0.0))
        {
            return Err(SceneError::Config(
                "texture frequencies must be positive".into(),
            ));
        }
        let texture = Texture::new(&config.texture);
        Ok(Self {
            config,
            patches,
            texture,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.config.cameras
    }

    pub fn camera(&self, index: usize) -> Result<&Camera, SceneError> {
        self.config
            .cameras
            .get(index)
            .ok_or(SceneError::UnknownCamera(index, self.config.cameras.len()))
    }

    pub fn patches(&self) -> &[SurfacePatch] {
        &self.patches
    }

    pub fn texture(&self) -> &Texture {
        &self.texture
    }

    /// Replaces the camera list (e.g. to inject calibration error).
    pub fn with_cameras(&self, cameras: Vec<Camera>) -> Result<Self, SceneError> {
        let mut config = self.config.clone();
        config.cameras = cameras;
        Self::new(config)
    }

    fn patch(&self, part: u8) -> Result<&SurfacePatch, SceneError> {
        self.patches
            .get(part as usize)
            .ok_or(SceneError::UnknownPart(part))
    }

    pub fn surface_point(&self, part: u8, uv: &Vector2<f64>) -> Result<Vector3<f64>, SceneError> {
        if !((0.0..=1.0).contains(&uv.x) && (0.0..=1.0).contains(&uv.y)) {
            return Err(SceneError::OutOfChart(uv.x, uv.y));
        }
        Ok(self.patch(part)?.point(uv))
    }

    /// Closed-form geodesic distance in metres; infinite across parts.
    pub fn geodesic(&self, part_a: u8, a: &Vector2<f64>, part_b: u8, b: &Vector2<f64>) -> f64 {
        if part_a != part_b {
            return f64::INFINITY;
        }
        match self.patch(part_a) {
            Ok(p) => p.geodesic(a, b),
            Err(_) => f64::INFINITY,
        }
    }

    /// Nearest intersection of a world ray with any patch.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let dir = dir.normalize();
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.intersect(origin, &dir).map(|h| Hit {
                    part: i as u8,
                    uv: h.uv,
                    point: origin + dir * h.t,
                    t: h.t,
                })
            })
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    pub fn render(&self, camera_index: usize) -> Result<RenderedView, SceneError> {
        let cam = self.camera(camera_index)?;
        let (w, h) = (cam.width(), cam.height());
        let center = cam.center();
        let parts = DEFAULT_PART_COUNT.max(self.patches.len() as u32);
        let rows: Vec<Vec<Option<Hit>>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let dir = cam.ray_direction(&Vector2::new(x as f64, y as f64));
                        self.intersect(&center, &dir)
                    })
                    .collect()
            })
            .collect();

        let mut field = DenseField::with_part_count(w, h, parts);
        let mut depth = vec![f64::NAN; (w * h) as usize];
        let mut rgb = vec![[0u8; 3]; (w * h) as usize];
        for (y, row) in rows.into_iter().enumerate() {
            for (x, hit) in row.into_iter().enumerate() {
                let Some(hit) = hit else { continue };
                let idx = y * w as usize + x;
                field
                    .set(
                        PixelCoord::new(x as u32, y as u32),
                        Some(Keypoint {
                            part: hit.part,
                            uv: hit.uv,
                        }),
                    )
                    .expect("pixel in range");
                depth[idx] = cam.depth(&hit.point);
                rgb[idx] = self.texture.rgb8(&hit.uv);
            }
        }
        Ok(RenderedView {
            camera_index,
            field,
            depth,
            rgb,
        })
    }

    /// Whether world point `x` is inside `cam`'s frame and unoccluded.
    pub fn point_visible(&self, cam: &Camera, x: &Vector3<f64>) -> bool {
        let Ok(px) = cam.project(x) else { return false };
        if !cam.contains(&px) {
            return false;
        }
        let center = cam.center();
        match self.intersect(&center, &(x - center)) {
            Some(hit) => (cam.depth(&hit.point) - cam.depth(x)).abs() <= DEPTH_MATCH_TOL,
            None => false,
        }
    }

    /// `v(x, B)` for every foreground pixel of `view_a`, row-major.
    pub fn visibility(
        &self,
        view_a: &RenderedView,
        view_b: &RenderedView,
    ) -> Result<Vec<bool>, SceneError> {
        let cam_b = self.camera(view_b.camera_index)?;
        view_a
            .field
            .foreground()
            .map(|(_, k)| Ok(self.point_visible(cam_b, &self.surface_point(k.part, &k.uv)?)))
            .collect()
    }
}
