//! Supervised and distillation losses, the weighted total objective over a
//! set of views, and a central-difference gradient validator.

use nalgebra::Vector2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{ConsistencyError, EvalOptions, MatchabilityConfig, PairTerms};
use crate::field::{DenseField, FieldError, PART_MISMATCH_PENALTY};
use crate::rng;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("view {0} referenced by a pair does not exist")]
    UnknownView(usize),
    #[error("view {view}: expected {expected} uvs, got {got}")]
    Length {
        view: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_r: f64,
    pub lambda_t: f64,
}

impl Default for LossWeights {
    /// The training weights `λ_M = 1`, `λ_R = 2000`, `λ_T = 10`.
    fn default() -> Self {
        Self {
            lambda_m: 1.0,
            lambda_r: 2000.0,
            lambda_t: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_m: f64, lambda_r: f64, lambda_t: f64) -> Result<Self, LossError> {
        let w = Self {
            lambda_m,
            lambda_r,
            lambda_t,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_r", self.lambda_r),
            ("lambda_t", self.lambda_t),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::Weights(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How per-pixel terms of `L_L` and `L_R` are aggregated within a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    /// Divide by the view's foreground count, matching the `1/V`
    /// normalization of the multiview terms.
    #[default]
    Mean,
}

impl Reduction {
    fn scale(self, count: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean if count == 0 => 0.0,
            Reduction::Mean => 1.0 / count as f64,
        }
    }
}

/// Per-pixel expectation maps of one pair, in foreground order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairMaps {
    pub view_a: usize,
    pub view_b: usize,
    pub expected_a: Vec<f64>,
    pub expected_b: Vec<f64>,
    pub photometric_a: Vec<f64>,
    pub photometric_b: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_L")]
    pub l_l: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_T")]
    pub l_t: f64,
    pub total: f64,
    #[serde(skip)]
    pub maps: Vec<PairMaps>,
}

impl LossReport {
    fn assemble(
        l_l: f64,
        l_m: f64,
        l_r: f64,
        l_t: f64,
        w: &LossWeights,
        maps: Vec<PairMaps>,
    ) -> Self {
        Self {
            l_l,
            l_m,
            l_r,
            l_t,
            total: l_l + w.lambda_m * l_m + w.lambda_r * l_r + w.lambda_t * l_t,
            maps,
        }
    }

    /// JSON object with the scalar breakdown and an echo of `config`.
    pub fn to_json(&self, config: &impl Serialize) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["config"] = serde_json::to_value(config).expect("config serializes");
        v
    }
}

/// d(loss)/d(uv) for each foreground pixel of one view, in row-major
/// foreground order. Background pixels carry no entry (their gradient is 0).
pub type FieldGradient = Vec<Vector2<f64>>;

/// `Σ ‖U_x − φ(x)‖₁` with the part-mismatch penalty of
/// [`crate::field::field_l1`]; subgradient `sign(φ − U)`, 0 at ties and on
/// mismatched parts.
pub fn supervised_loss(
    pred: &DenseField,
    gt: &DenseField,
) -> Result<(f64, FieldGradient), LossError> {
    pred.same_mask(gt)?;
    let mut loss = 0.0;
    let grad = pred
        .foreground()
        .zip(gt.foreground())
        .map(|((_, p), (_, g))| {
            if p.part != g.part {
                loss += PART_MISMATCH_PENALTY;
                return Vector2::zeros();
            }
            let d = p.uv - g.uv;
            loss += d.abs().sum();
            d.map(sign)
        })
        .collect();
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ ‖φ₀(x) − φ(x)‖²`, gradient `2(φ − φ₀)`.
pub fn distillation_loss(
    pred: &DenseField,
    frozen: &DenseField,
) -> Result<(f64, FieldGradient), LossError> {
    pred.same_mask(frozen)?;
    let mut loss = 0.0;
    let grad = pred
        .foreground()
        .zip(frozen.foreground())
        .map(|((_, p), (_, f))| {
            let d = p.uv - f.uv;
            loss += d.norm_squared();
            d * 2.0
        })
        .collect();
    Ok((loss, grad))
}

/// Gradients of `L_M` (and its value) for one pair, with respect to both
/// views' UVs.
pub fn grad_multiview(
    terms: &PairTerms,
    uv_a: &[Vector2<f64>],
    uv_b: &[Vector2<f64>],
    cfg: &MatchabilityConfig,
) -> Result<(f64, FieldGradient, FieldGradient), LossError> {
    let opts = EvalOptions {
        lambda_m: 1.0,
        lambda_t: 0.0,
        gradient: true,
        maps: false,
    };
    let eval = terms.evaluate(uv_a, uv_b, cfg, opts)?;
    Ok((eval.l_m, eval.grad_a, eval.grad_b))
}

/// Labels of one view for `L_L`; `None` entries are pixels whose predicted
/// part disagrees with the label (constant penalty, no gradient).
#[derive(Debug, Clone)]
pub struct Labels {
    pub uv: Vec<Option<Vector2<f64>>>,
}

impl Labels {
    pub fn from_fields(pred: &DenseField, gt: &DenseField) -> Result<Self, LossError> {
        pred.same_mask(gt)?;
        Ok(Self {
            uv: pred
                .foreground()
                .zip(gt.foreground())
                .map(|((_, p), (_, g))| (p.part == g.part).then_some(g.uv))
                .collect(),
        })
    }
}

/// The full objective over a set of views linked by calibrated pairs:
/// `L = L_L + λ_M Σ L_M + λ_R L_R + λ_T Σ L_T`.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    /// `(view_a, view_b, terms)`; terms are built with A = `view_a`.
    pub pairs: Vec<(usize, usize, &'a PairTerms)>,
    /// `φ₀` per view.
    pub frozen: Vec<Vec<Vector2<f64>>>,
    pub labels: Vec<Option<Labels>>,
    pub weights: LossWeights,
    pub matchability: MatchabilityConfig,
    pub reduction: Reduction,
}

impl Objective<'_> {
    fn check(&self, uvs: &[Vec<Vector2<f64>>]) -> Result<(), LossError> {
        self.weights.validate()?;
        for (view, (u, f)) in uvs.iter().zip(&self.frozen).enumerate() {
            if u.len() != f.len() {
                return Err(LossError::Length {
                    view,
                    expected: f.len(),
                    got: u.len(),
                });
            }
        }
        if uvs.len() != self.frozen.len() {
            return Err(LossError::UnknownView(uvs.len().min(self.frozen.len())));
        }
        for &(a, b, _) in &self.pairs {
            if a >= uvs.len() || b >= uvs.len() {
                return Err(LossError::UnknownView(a.max(b)));
            }
        }
        Ok(())
    }

    /// Report plus, when `gradient` is set, per-view gradients of the total.
    pub fn evaluate(
        &self,
        uvs: &[Vec<Vector2<f64>>],
        gradient: bool,
        maps: bool,
    ) -> Result<(LossReport, Vec<FieldGradient>), LossError> {
        self.check(uvs)?;
        let w = self.weights;
        let mut grads: Vec<FieldGradient> = uvs
            .iter()
            .map(|u| vec![Vector2::zeros(); if gradient { u.len() } else { 0 }])
            .collect();

        let (mut l_l, mut l_r) = (0.0, 0.0);
        for (view, u) in uvs.iter().enumerate() {
            let scale = self.reduction.scale(u.len());
            for (k, (x, f)) in u.iter().zip(&self.frozen[view]).enumerate() {
                let d = x - f;
                l_r += scale * d.norm_squared();
                if gradient {
                    grads[view][k] += d * (2.0 * scale * w.lambda_r);
                }
            }
            if let Some(labels) = &self.labels[view] {
                for (k, (x, g)) in u.iter().zip(&labels.uv).enumerate() {
                    match g {
                        Some(g) => {
                            let d = x - g;
                            l_l += scale * d.abs().sum();
                            if gradient {
                                grads[view][k] += d.map(sign) * scale;
                            }
                        }
                        None => l_l += scale * PART_MISMATCH_PENALTY,
                    }
                }
            }
        }

        let (mut l_m, mut l_t) = (0.0, 0.0);
        let mut all_maps = Vec::new();
        let opts = EvalOptions {
            lambda_m: w.lambda_m,
            lambda_t: w.lambda_t,
            gradient,
            maps,
        };
        for &(a, b, terms) in &self.pairs {
            let eval = terms.evaluate(&uvs[a], &uvs[b], &self.matchability, opts)?;
            l_m += eval.l_m;
            l_t += eval.l_t;
            if gradient {
                for (g, e) in grads[a].iter_mut().zip(&eval.grad_a) {
                    *g += e;
                }
                for (g, e) in grads[b].iter_mut().zip(&eval.grad_b) {
                    *g += e;
                }
            }
            if maps {
                all_maps.push(PairMaps {
                    view_a: a,
                    view_b: b,
                    expected_a: eval.expected_a,
                    expected_b: eval.expected_b,
                    photometric_a: eval.photometric_a,
                    photometric_b: eval.photometric_b,
                });
            }
        }
        Ok((
            LossReport::assemble(l_l, l_m, l_r, l_t, &w, all_maps),
            grads,
        ))
    }
}

/// Gradient of the total loss and the report, for a list of views.
pub fn grad_total(
    objective: &Objective,
    uvs: &[Vec<Vector2<f64>>],
) -> Result<(Vec<FieldGradient>, LossReport), LossError> {
    let (report, grads) = objective.evaluate(uvs, true, true)?;
    Ok((grads, report))
}

/// Result of a central-difference check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// Flat index of the worst pixel in the stacked variable vector.
    pub worst_pixel: usize,
    pub worst_component: usize,
    pub checked: usize,
}

/// Relative error `|fd − an| / max(|fd|, |an|, floor)`. The floor is
/// `1e-3 · max|an|` over the whole gradient so that components that are
/// zero up to roundoff are judged against the gradient's scale.
///
/// `skip(pixel, component)` excludes components, e.g. near L1 ties.
pub fn finite_difference_check(
    loss: impl Fn(&[Vector2<f64>]) -> f64,
    uvs: &[Vector2<f64>],
    analytic: &[Vector2<f64>],
    epsilon: f64,
    samples: usize,
    seed: u64,
    skip: impl Fn(usize, usize) -> bool,
) -> FdReport {
    assert!(epsilon > 0.0, "finite-difference step must be positive");
    assert_eq!(uvs.len(), analytic.len());
    let scale = analytic.iter().map(|g| g.amax()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut rng = rng::stream(seed, "fd-check");
    let count = uvs.len() * 2;
    let chosen = sample(&mut rng, count, samples.min(count)).into_vec();
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst_pixel: 0,
        worst_component: 0,
        checked: 0,
    };
    let mut probe = uvs.to_vec();
    for flat in chosen {
        let (pixel, c) = (flat / 2, flat % 2);
        if skip(pixel, c) {
            continue;
        }
        let x = uvs[pixel][c];
        probe[pixel][c] = x + epsilon;
        let plus = loss(&probe);
        probe[pixel][c] = x - epsilon;
        let minus = loss(&probe);
        probe[pixel][c] = x;
        let fd = (plus - minus) / (2.0 * epsilon);
        let an = analytic[pixel][c];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_relative_error || !rel.is_finite() {
            report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_pixel = pixel;
            report.worst_component = c;
        }
    }
    report
}
