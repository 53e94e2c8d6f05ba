//! Evaluation: epipolar consistency, keypoint accuracy (GPS, RCP, RCI) and
//! reconstruction accuracy (MPVPE, VS, MVS).

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::PairTerms;
use crate::field::{DenseField, FieldError, PixelCoord};
use crate::geometry::{epipolar_distance, triangulate, CalibratedPair, Camera, GeometryError};
use crate::scene::{SceneError, SyntheticScene};

/// GPS kernel width in metres of geodesic.
pub const GPS_KAPPA: f64 = 0.255;
/// VS kernel width in metres.
pub const VS_KAPPA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no mutually visible pixels; the metric is undefined")]
    NoMutualVisibility,
    #[error("reconstruction cloud is empty")]
    EmptyCloud,
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Foreground data of one view in row-major order.
struct Samples {
    pixels: Vec<Vector2<f64>>,
    parts: Vec<u8>,
    uvs: Vec<Vector2<f64>>,
}

impl Samples {
    fn of(field: &DenseField) -> Self {
        let (pixels, (parts, uvs)) = field
            .foreground()
            .map(|(p, k)| (p.to_image(), (k.part, k.uv)))
            .unzip();
        Self { pixels, parts, uvs }
    }
}

/// For each visible query, the visible candidate of the same part with the
/// nearest UV (exact search; ties go to the lowest index).
pub fn nearest_uv_matches(
    query_uv: &[Vector2<f64>],
    query_parts: &[u8],
    query_vis: &[bool],
    cand_uv: &[Vector2<f64>],
    cand_parts: &[u8],
    cand_vis: &[bool],
) -> Vec<Option<usize>> {
    query_uv
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            if !query_vis[i] {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, v) in cand_uv.iter().enumerate() {
                if !cand_vis[j] || cand_parts[j] != query_parts[i] {
                    continue;
                }
                let d = (u - v).norm_squared();
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

fn check_len(field: &DenseField, vis: &[bool]) -> Result<(), MetricError> {
    if field.foreground_count() != vis.len() {
        return Err(MetricError::Dimension(format!(
            "{} foreground pixels but {} visibility flags",
            field.foreground_count(),
            vis.len()
        )));
    }
    Ok(())
}

/// Mean nearest-neighbour epipolar distance, pooled over both directions:
/// each visible pixel of A is matched to the nearest-UV visible pixel of B
/// and measured against `F`, and vice versa with `Fᵀ`.
pub fn eval_epipolar(
    field_a: &DenseField,
    field_b: &DenseField,
    pair: &CalibratedPair,
    vis_a: &[bool],
    vis_b: &[bool],
) -> Result<f64, MetricError> {
    check_len(field_a, vis_a)?;
    check_len(field_b, vis_b)?;
    let (a, b) = (Samples::of(field_a), Samples::of(field_b));
    let f = pair.fundamental();
    let ft = f.transpose();
    let ab = nearest_uv_matches(&a.uvs, &a.parts, vis_a, &b.uvs, &b.parts, vis_b);
    let ba = nearest_uv_matches(&b.uvs, &b.parts, vis_b, &a.uvs, &a.parts, vis_a);
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, j) in ab.iter().enumerate() {
        if let Some(j) = j {
            sum += epipolar_distance(&a.pixels[i], &b.pixels[*j], f)?;
            count += 1;
        }
    }
    for (j, i) in ba.iter().enumerate() {
        if let Some(i) = i {
            sum += epipolar_distance(&b.pixels[j], &a.pixels[*i], &ft)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::NoMutualVisibility);
    }
    Ok(sum / count as f64)
}

/// Per-pixel A→B nearest-neighbour epipolar distance; `None` for pixels
/// that are invisible in B or have no candidate.
pub fn pixel_epipolar_errors(
    field_a: &DenseField,
    field_b: &DenseField,
    pair: &CalibratedPair,
    vis_a: &[bool],
    vis_b: &[bool],
) -> Result<Vec<Option<f64>>, MetricError> {
    check_len(field_a, vis_a)?;
    check_len(field_b, vis_b)?;
    let (a, b) = (Samples::of(field_a), Samples::of(field_b));
    let f = pair.fundamental();
    nearest_uv_matches(&a.uvs, &a.parts, vis_a, &b.uvs, &b.parts, vis_b)
        .iter()
        .enumerate()
        .map(|(i, j)| {
            j.map(|j| epipolar_distance(&a.pixels[i], &b.pixels[j], f))
                .transpose()
                .map_err(MetricError::from)
        })
        .collect()
}

/// [`eval_epipolar`] on precomputed pair terms, for use inside optimization
/// loops where the fields' masks and parts are fixed.
pub fn pair_epipolar_error(
    terms: &PairTerms,
    uv_a: &[Vector2<f64>],
    uv_b: &[Vector2<f64>],
) -> Result<f64, MetricError> {
    let (vis_a, vis_b) = terms.visibility();
    let (parts_a, parts_b) = terms.parts();
    let ab = nearest_uv_matches(uv_a, parts_a, vis_a, uv_b, parts_b, vis_b);
    let ba = nearest_uv_matches(uv_b, parts_b, vis_b, uv_a, parts_a, vis_a);
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, j) in ab.iter().enumerate() {
        if let Some(j) = j {
            sum += terms.epipolar(i, *j);
            count += 1;
        }
    }
    for (j, i) in ba.iter().enumerate() {
        if let Some(i) = i {
            sum += terms.epipolar_reverse(*i, j);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::NoMutualVisibility);
    }
    Ok(sum / count as f64)
}

/// Per-pixel geodesic error; infinite where parts disagree.
pub fn geodesic_errors(
    pred: &DenseField,
    gt: &DenseField,
    scene: &SyntheticScene,
) -> Result<Vec<f64>, MetricError> {
    pred.same_mask(gt)?;
    Ok(pred
        .foreground()
        .zip(gt.foreground())
        .map(|((_, p), (_, g))| scene.geodesic(p.part, &clamp_uv(&p.uv), g.part, &g.uv))
        .collect())
}

// Geodesics are defined on the chart; predictions may leave it slightly.
fn clamp_uv(uv: &Vector2<f64>) -> Vector2<f64> {
    uv.map(|c| c.clamp(0.0, 1.0))
}

/// Mean of `exp(−g²/2κ²)` over `errors`.
pub fn gps_from_errors(errors: &[f64], kappa: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors
        .iter()
        .map(|g| (-g * g / (2.0 * kappa * kappa)).exp())
        .sum::<f64>()
        / errors.len() as f64
}

pub fn gps(
    pred: &DenseField,
    gt: &DenseField,
    scene: &SyntheticScene,
    kappa: f64,
) -> Result<f64, MetricError> {
    Ok(gps_from_errors(&geodesic_errors(pred, gt, scene)?, kappa))
}

/// Ratio of points with error `≤ t` for each threshold (metres).
pub fn rcp_from_errors(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let n = errors.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| (t, errors.iter().filter(|&&e| e <= t).count() as f64 / n))
        .collect()
}

pub fn rcp(
    pred: &DenseField,
    gt: &DenseField,
    scene: &SyntheticScene,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>, MetricError> {
    Ok(rcp_from_errors(
        &geodesic_errors(pred, gt, scene)?,
        thresholds,
    ))
}

/// `steps + 1` uniform thresholds on `[0, cap]`.
pub fn uniform_thresholds(cap: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| cap * k as f64 / steps as f64).collect()
}

/// Area under an RCP curve by the trapezoid rule, normalized by `cap`.
pub fn auc(curve: &[(f64, f64)], cap: f64) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum::<f64>()
        / cap
}

/// AUC of the RCP curve on a 100-step grid up to `cap`.
pub fn auc_at(errors: &[f64], cap: f64) -> f64 {
    auc(&rcp_from_errors(errors, &uniform_thresholds(cap, 100)), cap)
}

/// Default RCI grid: 20 uniform thresholds in `[0.5, 0.95]`.
pub fn rci_thresholds() -> Vec<f64> {
    (0..20).map(|k| 0.5 + 0.45 * k as f64 / 19.0).collect()
}

/// Ratio of instances with GPS `≥ t` per threshold, and its mean (mRCI).
pub fn rci(gps_values: &[f64], thresholds: &[f64]) -> Result<(Vec<(f64, f64)>, f64), MetricError> {
    if gps_values.is_empty() || thresholds.is_empty() {
        return Err(MetricError::NoInstances);
    }
    let n = gps_values.len() as f64;
    let curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (t, gps_values.iter().filter(|&&g| g >= t).count() as f64 / n))
        .collect();
    let mean = curve.iter().map(|c| c.1).sum::<f64>() / curve.len() as f64;
    Ok((curve, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconPoint {
    pub part: u8,
    /// Mean UV of the matched pixels.
    pub uv: Vector2<f64>,
    pub point: Vector3<f64>,
    pub pixel_a: PixelCoord,
    pub pixel_b: PixelCoord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconCloud {
    pub points: Vec<ReconPoint>,
}

/// Triangulates every visible pixel of A with its nearest-UV visible partner
/// in B. Ill-conditioned pairs are skipped.
pub fn reconstruct(
    field_a: &DenseField,
    field_b: &DenseField,
    pair: &CalibratedPair,
    vis_a: &[bool],
    vis_b: &[bool],
) -> Result<ReconCloud, MetricError> {
    check_len(field_a, vis_a)?;
    check_len(field_b, vis_b)?;
    let (a, b) = (Samples::of(field_a), Samples::of(field_b));
    let px_a: Vec<PixelCoord> = field_a.foreground().map(|(p, _)| p).collect();
    let px_b: Vec<PixelCoord> = field_b.foreground().map(|(p, _)| p).collect();
    let matches = nearest_uv_matches(&a.uvs, &a.parts, vis_a, &b.uvs, &b.parts, vis_b);
    let points = matches
        .iter()
        .enumerate()
        .filter_map(|(i, j)| {
            let j = (*j)?;
            let point = triangulate(&a.pixels[i], &b.pixels[j], pair).ok()?;
            Some(ReconPoint {
                part: a.parts[i],
                uv: (a.uvs[i] + b.uvs[j]) * 0.5,
                point,
                pixel_a: px_a[i],
                pixel_b: px_b[j],
            })
        })
        .collect();
    Ok(ReconCloud { points })
}

fn point_error(p: &ReconPoint, scene: &SyntheticScene) -> Result<f64, MetricError> {
    Ok((p.point - scene.surface_point(p.part, &clamp_uv(&p.uv))?).norm())
}

/// Mean distance between triangulated points and the surface at their tags.
pub fn mpvpe(cloud: &ReconCloud, scene: &SyntheticScene) -> Result<f64, MetricError> {
    if cloud.points.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let mut sum = 0.0;
    for p in &cloud.points {
        sum += point_error(p, scene)?;
    }
    Ok(sum / cloud.points.len() as f64)
}

/// A regular grid of chart samples standing in for mesh vertices, with the
/// ground-truth visibility of each sample from both cameras of a pair.
#[derive(Debug, Clone)]
pub struct ChartSamples {
    pub n: usize,
    pub samples: Vec<(u8, Vector2<f64>)>,
    pub visible: Vec<bool>,
}

impl ChartSamples {
    /// `n × n` cell centres per part.
    pub fn new(
        scene: &SyntheticScene,
        cam_a: &Camera,
        cam_b: &Camera,
        n: usize,
    ) -> Result<Self, MetricError> {
        let mut samples = Vec::new();
        for part in 0..scene.patches().len() as u8 {
            for a in 0..n {
                for b in 0..n {
                    samples.push((
                        part,
                        Vector2::new((a as f64 + 0.5) / n as f64, (b as f64 + 0.5) / n as f64),
                    ));
                }
            }
        }
        let visible = samples
            .iter()
            .map(|(part, uv)| {
                let x = scene.surface_point(*part, uv)?;
                Ok(scene.point_visible(cam_a, &x) && scene.point_visible(cam_b, &x))
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        Ok(Self {
            n,
            samples,
            visible,
        })
    }

    /// Sample index of the cell containing `uv`.
    fn cell(&self, part: u8, uv: &Vector2<f64>) -> Option<usize> {
        let idx =
            |c: f64| ((c * self.n as f64).floor() as i64).clamp(0, self.n as i64 - 1) as usize;
        let base = part as usize * self.n * self.n;
        let i = base + idx(uv.x) * self.n + idx(uv.y);
        (i < self.samples.len()).then_some(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VertexSimilarity {
    pub vs: f64,
    pub iou: f64,
    pub mvs: f64,
}

/// VS: mean over ground-truth-visible samples of `exp(−d²/2κ²)`, where `d`
/// is the error of the cloud point tagged nearest to the sample within its
/// cell (infinite if the cell holds no point). MVS = `sqrt(VS · IoU)` of the
/// covered and the visible sample sets.
pub fn vertex_similarity(
    cloud: &ReconCloud,
    scene: &SyntheticScene,
    kappa: f64,
    gt: &ChartSamples,
) -> Result<VertexSimilarity, MetricError> {
    let mut best: Vec<Option<(f64, f64)>> = vec![None; gt.samples.len()];
    for p in &cloud.points {
        let Some(s) = gt.cell(p.part, &p.uv) else {
            continue;
        };
        let tag_dist = (p.uv - gt.samples[s].1).norm_squared();
        if best[s].is_none_or(|(d, _)| tag_dist < d) {
            best[s] = Some((tag_dist, point_error(p, scene)?));
        }
    }
    let visible = gt.visible.iter().filter(|v| **v).count();
    if visible == 0 {
        return Ok(VertexSimilarity {
            vs: 0.0,
            iou: 0.0,
            mvs: 0.0,
        });
    }
    let vs = best
        .iter()
        .zip(&gt.visible)
        .filter(|(_, v)| **v)
        .map(|(b, _)| b.map_or(0.0, |(_, d)| (-d * d / (2.0 * kappa * kappa)).exp()))
        .sum::<f64>()
        / visible as f64;
    let inter = best
        .iter()
        .zip(&gt.visible)
        .filter(|(b, v)| b.is_some() && **v)
        .count();
    let union = best
        .iter()
        .zip(&gt.visible)
        .filter(|(b, v)| b.is_some() || **v)
        .count();
    let iou = inter as f64 / union as f64;
    Ok(VertexSimilarity {
        vs,
        iou,
        mvs: (vs * iou).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub gps_kappa: f64,
    pub vs_kappa: f64,
    pub rci_thresholds: Vec<f64>,
    /// Chart samples per axis and part for VS.
    pub chart_grid: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            gps_kappa: GPS_KAPPA,
            vs_kappa: VS_KAPPA,
            rci_thresholds: rci_thresholds(),
            chart_grid: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epipolar_error: f64,
    /// GPS of each view (instance).
    pub gps: Vec<f64>,
    pub m_gps: f64,
    pub rcp_curve: Vec<(f64, f64)>,
    pub auc_10: f64,
    pub auc_30: f64,
    pub rci_curve: Vec<(f64, f64)>,
    pub m_rci: f64,
    pub mpvpe: f64,
    pub vs: f64,
    pub mvs: f64,
    pub m_mvs: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "epipolar_error,m_gps,auc_10,auc_30,m_rci,mpvpe,vs,mvs,m_mvs";

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epipolar_error,
            self.m_gps,
            self.auc_10,
            self.auc_30,
            self.m_rci,
            self.mpvpe,
            self.vs,
            self.mvs,
            self.m_mvs
        )
    }
}

/// Inputs of one evaluated view.
pub struct ViewEval<'a> {
    pub pred: &'a DenseField,
    pub gt: &'a DenseField,
    pub camera: usize,
}

/// Full metric suite over views and the listed pairs (indices into `views`).
/// Epipolar error, MPVPE and VS are averaged over pairs; keypoint metrics
/// pool all pixels of all views.
pub fn evaluate(
    scene: &SyntheticScene,
    views: &[ViewEval],
    pairs: &[(usize, usize)],
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    if views.is_empty() {
        return Err(MetricError::NoInstances);
    }
    let mut all_errors = Vec::new();
    let mut gps_values = Vec::new();
    for v in views {
        let errors = geodesic_errors(v.pred, v.gt, scene)?;
        gps_values.push(gps_from_errors(&errors, cfg.gps_kappa));
        all_errors.extend(errors);
    }
    let rcp_curve = rcp_from_errors(&all_errors, &uniform_thresholds(0.3, 30));
    let (rci_curve, m_rci) = rci(&gps_values, &cfg.rci_thresholds)?;

    let (mut epi, mut mpv, mut vs, mut mvs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &(a, b) in pairs {
        let (va, vb) = (&views[a], &views[b]);
        let cam_a = scene.camera(va.camera)?;
        let cam_b = scene.camera(vb.camera)?;
        let pair = CalibratedPair::new(cam_a.clone(), cam_b.clone())?;
        let vis_a = field_visibility(scene, va.gt, cam_b)?;
        let vis_b = field_visibility(scene, vb.gt, cam_a)?;
        epi.push(eval_epipolar(va.pred, vb.pred, &pair, &vis_a, &vis_b)?);
        let cloud = reconstruct(va.pred, vb.pred, &pair, &vis_a, &vis_b)?;
        let samples = ChartSamples::new(scene, cam_a, cam_b, cfg.chart_grid)?;
        let sim = vertex_similarity(&cloud, scene, cfg.vs_kappa, &samples)?;
        mpv.push(mpvpe(&cloud, scene).unwrap_or(f64::INFINITY));
        vs.push(sim.vs);
        mvs.push(sim.mvs);
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricReport {
        epipolar_error: mean(&epi),
        m_gps: mean(&gps_values),
        gps: gps_values,
        auc_10: auc_at(&all_errors, 0.1),
        auc_30: auc_at(&all_errors, 0.3),
        rcp_curve,
        rci_curve,
        m_rci,
        mpvpe: mean(&mpv),
        vs: mean(&vs),
        mvs: mvs.first().copied().unwrap_or(f64::NAN),
        m_mvs: mean(&mvs),
    })
}

/// `v(x, cam)` for each foreground pixel of a ground-truth field.
pub fn field_visibility(
    scene: &SyntheticScene,
    gt: &DenseField,
    cam: &Camera,
) -> Result<Vec<bool>, MetricError> {
    gt.foreground()
        .map(|(_, k)| Ok(scene.point_visible(cam, &scene.surface_point(k.part, &k.uv)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{perturb_field, Keypoint};
    use crate::scene::SceneConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        scene: SyntheticScene,
        gt_a: DenseField,
        gt_b: DenseField,
        pair: CalibratedPair,
        vis_a: Vec<bool>,
        vis_b: Vec<bool>,
    }

    fn fixture(cfg: SceneConfig) -> Fixture {
        let scene = cfg.build().unwrap();
        let a = scene.render(0).unwrap();
        let b = scene.render(1).unwrap();
        let pair =
            CalibratedPair::new(scene.cameras()[0].clone(), scene.cameras()[1].clone()).unwrap();
        let vis_a = scene.visibility(&a, &b).unwrap();
        let vis_b = scene.visibility(&b, &a).unwrap();
        Fixture {
            scene,
            gt_a: a.field,
            gt_b: b.field,
            pair,
            vis_a,
            vis_b,
        }
    }

    #[test]
    fn gps_examples() {
        let f = fixture(SceneConfig::default());
        assert_eq!(gps(&f.gt_a, &f.gt_a, &f.scene, GPS_KAPPA).unwrap(), 1.0);
        // A constant offset of 0.05 along v is a geodesic of 0.05 · H.
        let g0 = 0.05 * 1.2;
        let with_v = |v: f64| {
            let uvs: Vec<_> = f
                .gt_a
                .foreground_uvs()
                .iter()
                .map(|u| Vector2::new(u.x, v))
                .collect();
            f.gt_a.with_foreground_uvs(&uvs)
        };
        let expected = (-g0 * g0 / (2.0 * GPS_KAPPA * GPS_KAPPA)).exp();
        assert!(
            (gps(&with_v(0.9), &with_v(0.85), &f.scene, GPS_KAPPA).unwrap() - expected).abs()
                < 1e-12
        );
        assert!(gps(&with_v(1.0), &with_v(0.0), &f.scene, 0.01).unwrap() < 1e-100);
    }

    #[test]
    fn rcp_examples() {
        let errors = vec![0.0; 10];
        let curve = rcp_from_errors(&errors, &uniform_thresholds(0.3, 30));
        assert!(curve.iter().all(|c| c.1 == 1.0));
        assert_eq!(auc_at(&errors, 0.1), 1.0);
        assert_eq!(auc_at(&errors, 0.3), 1.0);
        let bimodal: Vec<f64> = (0..10)
            .map(|i| if i % 2 == 0 { 0.0 } else { 0.5 })
            .collect();
        let curve = rcp_from_errors(&bimodal, &uniform_thresholds(0.3, 30));
        assert!(curve.iter().all(|c| c.1 == 0.5));
        assert!((auc_at(&bimodal, 0.3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_loop_oracle() {
        let f = fixture(SceneConfig::default());
        let pred = perturb_field(&f.gt_a, 0.05, 3);
        let errors = geodesic_errors(&pred, &f.gt_a, &f.scene).unwrap();
        // Oracle: per-pixel loop, trapezoid by hand on the same grid.
        let ts: Vec<f64> = (0..=100).map(|k| 0.3 * k as f64 / 100.0).collect();
        let mut ratios = Vec::new();
        for t in &ts {
            let mut c = 0;
            let mut n = 0;
            for ((_, p), (_, g)) in pred.foreground().zip(f.gt_a.foreground()) {
                n += 1;
                let uv = Vector2::new(p.uv.x.clamp(0.0, 1.0), p.uv.y.clamp(0.0, 1.0));
                if f.scene.geodesic(p.part, &uv, g.part, &g.uv) <= *t {
                    c += 1;
                }
            }
            ratios.push(c as f64 / n as f64);
        }
        let mut area = 0.0;
        for k in 0..100 {
            area += (ts[k + 1] - ts[k]) * (ratios[k] + ratios[k + 1]) / 2.0;
        }
        assert!((auc_at(&errors, 0.3) - area / 0.3).abs() < 1e-9);
        let curve = rcp(&pred, &f.gt_a, &f.scene, &[0.1]).unwrap();
        assert!(curve[0].1 > 0.0 && curve[0].1 < 1.0);
    }

    #[test]
    fn rci_examples() {
        let (_, m) = rci(&[1.0, 1.0, 1.0], &rci_thresholds()).unwrap();
        assert_eq!(m, 1.0);
        let (curve, m) = rci(&[0.5], &[0.25, 0.75]).unwrap();
        assert_eq!(curve, vec![(0.25, 1.0), (0.75, 0.0)]);
        assert_eq!(m, 0.5);
        assert!(rci(&[], &[0.5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let ts = rci_thresholds();
        let (_, m) = rci(&values, &ts).unwrap();
        let mut oracle = 0.0;
        for t in &ts {
            let mut c = 0.0;
            for v in &values {
                if v >= t {
                    c += 1.0;
                }
            }
            oracle += c / 50.0;
        }
        assert!((m - oracle / 20.0).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_epipolar_error_is_subpixel() {
        let f = fixture(SceneConfig::default());
        let e = eval_epipolar(&f.gt_a, &f.gt_b, &f.pair, &f.vis_a, &f.vis_b).unwrap();
        assert!(e < 1.0, "{e}");
    }

    #[test]
    fn epipolar_error_grows_with_noise() {
        let f = fixture(SceneConfig::default());
        let mut wins = 0;
        for seed in 0..20 {
            let e = |s| {
                eval_epipolar(
                    &perturb_field(&f.gt_a, s, seed),
                    &perturb_field(&f.gt_b, s, seed + 100),
                    &f.pair,
                    &f.vis_a,
                    &f.vis_b,
                )
                .unwrap()
            };
            wins += (e(0.05) > e(0.02)) as usize;
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn near_identical_cameras_give_near_zero_error() {
        let mut cfg = SceneConfig::default();
        let c0 = cfg.cameras[0].clone();
        let eye = c0.center() + Vector3::new(0.01, 0.0, 0.0);
        let c1 = Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::y(),
            c0.k()[(0, 0)],
            c0.width(),
            c0.height(),
        )
        .unwrap();
        cfg.cameras = vec![c0, c1];
        let f = fixture(cfg);
        let e = eval_epipolar(&f.gt_a, &f.gt_b, &f.pair, &f.vis_a, &f.vis_b).unwrap();
        assert!(e < 0.1, "{e}");
    }

    #[test]
    fn no_mutual_visibility_is_signalled() {
        let f = fixture(SceneConfig::default());
        let none_a = vec![false; f.vis_a.len()];
        let none_b = vec![false; f.vis_b.len()];
        assert!(matches!(
            eval_epipolar(&f.gt_a, &f.gt_b, &f.pair, &none_a, &none_b),
            Err(MetricError::NoMutualVisibility)
        ));
        let cloud = reconstruct(&f.gt_a, &f.gt_b, &f.pair, &none_a, &none_b).unwrap();
        assert!(cloud.points.is_empty());
        assert!(matches!(
            mpvpe(&cloud, &f.scene),
            Err(MetricError::EmptyCloud)
        ));
    }

    #[test]
    fn single_exact_correspondence_is_recovered() {
        let f = fixture(SceneConfig::default());
        let x = f.scene.surface_point(0, &Vector2::new(0.5, 0.5)).unwrap();
        let (pa, pb) = (
            f.pair.cam_a.project(&x).unwrap(),
            f.pair.cam_b.project(&x).unwrap(),
        );
        // Place the two pixels at the exact projections by shifting the
        // cameras' principal points.
        let shift = |cam: &Camera, p: Vector2<f64>| {
            let mut k = *cam.k();
            k[(0, 2)] += p.x.round() - p.x;
            k[(1, 2)] += p.y.round() - p.y;
            Camera::new(
                k,
                *cam.rotation(),
                *cam.translation(),
                cam.width(),
                cam.height(),
            )
            .unwrap()
        };
        let pair = CalibratedPair::new(shift(&f.pair.cam_a, pa), shift(&f.pair.cam_b, pb)).unwrap();
        let one = |p: Vector2<f64>| {
            let mut field = DenseField::new(f.gt_a.width(), f.gt_a.height());
            let kp = Keypoint {
                part: 0,
                uv: Vector2::new(0.5, 0.5),
            };
            field
                .set(
                    PixelCoord::new(p.x.round() as u32, p.y.round() as u32),
                    Some(kp),
                )
                .unwrap();
            field
        };
        let cloud = reconstruct(&one(pa), &one(pb), &pair, &[true], &[true]).unwrap();
        assert_eq!(cloud.points.len(), 1);
        assert!((cloud.points[0].point - x).norm() < 1e-9);
        assert!(mpvpe(&cloud, &f.scene).unwrap() < 1e-9);
    }

    #[test]
    fn ground_truth_cloud_is_near_the_surface() {
        let f = fixture(SceneConfig::default());
        let cloud = reconstruct(&f.gt_a, &f.gt_b, &f.pair, &f.vis_a, &f.vis_b).unwrap();
        assert!(cloud.points.len() > 500);
        let worst = cloud
            .points
            .iter()
            .map(|p| point_error(p, &f.scene).unwrap())
            .fold(0.0, f64::max);
        assert!(worst < 0.06, "{worst}");
        let base = mpvpe(&cloud, &f.scene).unwrap();
        assert!(base < 0.01, "{base}");
    }

    #[test]
    fn uniform_shift_adds_to_mpvpe() {
        // Exact cloud: surface points at their own tags.
        let f = fixture(SceneConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let points: Vec<ReconPoint> = (0..200)
            .map(|_| {
                let uv = Vector2::new(rng.random_range(0.3..0.7), rng.random_range(0.2..0.8));
                ReconPoint {
                    part: 0,
                    uv,
                    point: f.scene.surface_point(0, &uv).unwrap(),
                    pixel_a: PixelCoord::new(0, 0),
                    pixel_b: PixelCoord::new(0, 0),
                }
            })
            .collect();
        let exact = ReconCloud { points };
        assert!(mpvpe(&exact, &f.scene).unwrap() < 1e-12);
        let shifted = ReconCloud {
            points: exact
                .points
                .iter()
                .map(|p| ReconPoint {
                    point: p.point + Vector3::new(0.0, 0.01, 0.0),
                    ..p.clone()
                })
                .collect(),
        };
        assert!((mpvpe(&shifted, &f.scene).unwrap() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn vertex_similarity_examples() {
        let f = fixture(SceneConfig::default());
        let samples = ChartSamples::new(&f.scene, &f.pair.cam_a, &f.pair.cam_b, 20).unwrap();
        let exact_at = |keep: &dyn Fn(usize) -> bool| ReconCloud {
            points: samples
                .samples
                .iter()
                .zip(&samples.visible)
                .enumerate()
                .filter(|(k, (_, v))| **v && keep(*k))
                .map(|(_, ((part, uv), _))| ReconPoint {
                    part: *part,
                    uv: *uv,
                    point: f.scene.surface_point(*part, uv).unwrap(),
                    pixel_a: PixelCoord::new(0, 0),
                    pixel_b: PixelCoord::new(0, 0),
                })
                .collect(),
        };
        let full = vertex_similarity(&exact_at(&|_| true), &f.scene, VS_KAPPA, &samples).unwrap();
        assert_eq!((full.vs, full.iou, full.mvs), (1.0, 1.0, 1.0));
        let empty =
            vertex_similarity(&ReconCloud::default(), &f.scene, VS_KAPPA, &samples).unwrap();
        assert_eq!((empty.vs, empty.mvs), (0.0, 0.0));
        // Keep every other visible sample.
        let visible_idx: Vec<usize> = (0..samples.samples.len())
            .filter(|&k| samples.visible[k])
            .collect();
        let keep: std::collections::HashSet<usize> =
            visible_idx.iter().step_by(2).copied().collect();
        let half = vertex_similarity(
            &exact_at(&|k| keep.contains(&k)),
            &f.scene,
            VS_KAPPA,
            &samples,
        )
        .unwrap();
        let ratio = keep.len() as f64 / visible_idx.len() as f64;
        assert!((half.vs - ratio).abs() < 1e-12 && (half.iou - ratio).abs() < 1e-12);
        assert!((half.mvs - ratio).abs() < 1e-12);
    }

    #[test]
    fn report_fixed_point_and_ranges() {
        let f = fixture(SceneConfig::default());
        let views = [
            ViewEval {
                pred: &f.gt_a,
                gt: &f.gt_a,
                camera: 0,
            },
            ViewEval {
                pred: &f.gt_b,
                gt: &f.gt_b,
                camera: 1,
            },
        ];
        let r = evaluate(&f.scene, &views, &[(0, 1)], &MetricConfig::default()).unwrap();
        assert_eq!((r.m_gps, r.auc_10, r.auc_30, r.m_rci), (1.0, 1.0, 1.0, 1.0));
        let pa = perturb_field(&f.gt_a, 0.05, 1);
        let pb = perturb_field(&f.gt_b, 0.05, 2);
        let views = [
            ViewEval {
                pred: &pa,
                gt: &f.gt_a,
                camera: 0,
            },
            ViewEval {
                pred: &pb,
                gt: &f.gt_b,
                camera: 1,
            },
        ];
        let p = evaluate(&f.scene, &views, &[(0, 1)], &MetricConfig::default()).unwrap();
        for v in [p.m_gps, p.auc_10, p.auc_30, p.m_rci, p.vs, p.mvs] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(p.m_gps < 1.0 && p.epipolar_error > r.epipolar_error && p.mpvpe > r.mpvpe);
        assert_eq!(
            p.csv_row().split(',').count(),
            MetricReport::CSV_HEADER.split(',').count()
        );
    }
}
