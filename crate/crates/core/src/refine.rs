//! Direct gradient refinement of per-pixel UV fields over a set of views
//! linked by calibrated pairs. Masks and part labels stay fixed; only UVs
//! move.

use std::io::Write;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{MatchabilityConfig, PairTerms};
use crate::field::{DenseField, FieldError};
use crate::losses::{Labels, LossError, LossReport, LossWeights, Objective, Reduction};
use crate::metrics::pair_epipolar_error;

/// Loss growth over the initial value that aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refine config: {0}")]
    Config(String),
    #[error("empty pair list")]
    NoPairs,
    #[error("diverged at iteration {iteration}: loss {loss:e} exceeds {factor}× the initial {initial:e}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        factor: f64,
        trace: Box<RefineTrace>,
    },
    #[error("non-finite loss at iteration {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Gradient,
    Momentum {
        beta: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Chart units per unit (preconditioned) gradient.
    pub step: f64,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    #[serde(default)]
    pub reduction: Reduction,
    pub matchability: MatchabilityConfig,
    /// `(iteration, σ)`: from `iteration` on, use `σ`. Empty = constant.
    #[serde(default)]
    pub sigma_schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step: 1e-3,
            optimizer: Optimizer::adam(),
            weights: LossWeights::default(),
            reduction: Reduction::default(),
            matchability: MatchabilityConfig::default(),
            sigma_schedule: Vec::new(),
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(RefineError::Config(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        self.weights.validate()?;
        self.matchability.validate().map_err(LossError::from)?;
        for w in self.sigma_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(RefineError::Config(
                    "sigma schedule iterations must increase".into(),
                ));
            }
        }
        if self
            .sigma_schedule
            .iter()
            .any(|(_, s)| !(*s > 0.0 && s.is_finite()))
        {
            return Err(RefineError::Config(
                "sigma schedule values must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The coarse-to-fine schedule 0.1 → 0.03 over `iterations`.
    pub fn coarse_to_fine(iterations: usize) -> Vec<(usize, f64)> {
        vec![(0, 0.1), (iterations / 2, 0.03)]
    }

    fn sigma_at(&self, iteration: usize) -> f64 {
        self.sigma_schedule
            .iter()
            .rev()
            .find(|(k, _)| *k <= iteration)
            .map_or(self.matchability.sigma, |(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub report: LossReport,
    /// Mean nearest-neighbour epipolar error over pairs (pixels).
    pub epi_error: f64,
    /// Mean UV distance to ground truth over all views, when known.
    pub uv_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RefineTrace {
    pub rows: Vec<TraceRow>,
}

impl RefineTrace {
    pub fn first(&self) -> &TraceRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace holds the initial state")
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,L_L,L_M,L_R,L_T,total,epi_error,uv_error")?;
        for r in &self.rows {
            let uv = r.uv_error.map_or(String::new(), |u| format!("{u:?}"));
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{}",
                r.iteration,
                r.report.l_l,
                r.report.l_m,
                r.report.l_r,
                r.report.l_t,
                r.report.total,
                r.epi_error,
                uv
            )?;
        }
        Ok(())
    }
}

/// Per-view inputs: starting field, frozen reference `φ₀`, optional labels
/// for `L_L` and optional ground truth for the trace.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub init: DenseField,
    pub frozen: DenseField,
    pub labels: Option<DenseField>,
    pub gt: Option<DenseField>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub fields: Vec<DenseField>,
    pub trace: RefineTrace,
    /// Final UV error is still ≥ 90% of the initial one.
    pub uv_regression: bool,
}

struct OptimizerState {
    m: Vec<Vec<Vector2<f64>>>,
    v: Vec<Vec<Vector2<f64>>>,
    t: i32,
}

impl OptimizerState {
    fn new(uvs: &[Vec<Vector2<f64>>]) -> Self {
        let zeros: Vec<Vec<Vector2<f64>>> = uvs
            .iter()
            .map(|u| vec![Vector2::zeros(); u.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(
        &mut self,
        opt: Optimizer,
        lr: f64,
        uvs: &mut [Vec<Vector2<f64>>],
        grads: &[Vec<Vector2<f64>>],
    ) {
        self.t += 1;
        for (view, g_view) in grads.iter().enumerate() {
            for (k, g) in g_view.iter().enumerate() {
                let u = &mut uvs[view][k];
                match opt {
                    Optimizer::Gradient => *u -= g * lr,
                    Optimizer::Momentum { beta } => {
                        let m = &mut self.m[view][k];
                        *m = *m * beta + g;
                        *u -= *m * lr;
                    }
                    Optimizer::Adam {
                        beta1,
                        beta2,
                        epsilon,
                    } => {
                        let m = &mut self.m[view][k];
                        let v = &mut self.v[view][k];
                        *m = *m * beta1 + g * (1.0 - beta1);
                        *v = *v * beta2 + g.component_mul(g) * (1.0 - beta2);
                        let mh = *m / (1.0 - beta1.powi(self.t));
                        let vh = *v / (1.0 - beta2.powi(self.t));
                        *u -= mh.zip_map(&vh, |a, b| lr * a / (b.sqrt() + epsilon));
                    }
                }
            }
        }
    }
}

fn mean_uv_distance(uvs: &[Vec<Vector2<f64>>], gt: &[Vec<Vector2<f64>>]) -> f64 {
    let (sum, n) = uvs
        .iter()
        .zip(gt)
        .flat_map(|(u, g)| u.iter().zip(g))
        .fold((0.0, 0usize), |(s, n), (u, g)| (s + (u - g).norm(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Gradient refinement of all views at once; per-step gradients sum the
/// contributions of every listed pair.
pub fn refine_viewset(
    views: &[ViewInput],
    pairs: &[(usize, usize, &PairTerms)],
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(RefineError::NoPairs);
    }
    for v in views {
        v.init.same_mask(&v.frozen)?;
        if let Some(l) = &v.labels {
            v.init.same_mask(l)?;
        }
        if let Some(g) = &v.gt {
            v.init.same_mask(g)?;
        }
    }
    let labels = views
        .iter()
        .map(|v| {
            v.labels
                .as_ref()
                .map(|l| Labels::from_fields(&v.init, l))
                .transpose()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gt: Option<Vec<Vec<Vector2<f64>>>> = views
        .iter()
        .map(|v| v.gt.as_ref().map(|g| g.foreground_uvs()))
        .collect();
    let mut objective = Objective {
        pairs: pairs.to_vec(),
        frozen: views.iter().map(|v| v.frozen.foreground_uvs()).collect(),
        labels,
        weights: cfg.weights,
        matchability: cfg.matchability.clone(),
        reduction: cfg.reduction,
    };
    let mut uvs: Vec<Vec<Vector2<f64>>> = views.iter().map(|v| v.init.foreground_uvs()).collect();
    let mut state = OptimizerState::new(&uvs);
    let mut trace = RefineTrace::default();
    let epi = |uvs: &[Vec<Vector2<f64>>]| {
        let errs: Vec<f64> = pairs
            .iter()
            .map(|(a, b, t)| pair_epipolar_error(t, &uvs[*a], &uvs[*b]).unwrap_or(f64::NAN))
            .collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    };

    let mut initial = f64::NAN;
    for iteration in 0..=cfg.iterations {
        objective.matchability.sigma = cfg.sigma_at(iteration);
        let last = iteration == cfg.iterations;
        let (report, grads) = objective.evaluate(&uvs, !last, false)?;
        if !report.total.is_finite() {
            return Err(RefineError::NonFinite(iteration));
        }
        if iteration == 0 {
            initial = report.total;
        }
        let loss = report.total;
        trace.rows.push(TraceRow {
            iteration,
            report,
            epi_error: epi(&uvs),
            uv_error: gt.as_ref().map(|g| mean_uv_distance(&uvs, g)),
        });
        if loss > DIVERGENCE_FACTOR * initial.abs().max(f64::MIN_POSITIVE) {
            log::warn!("refinement diverged at iteration {iteration}");
            return Err(RefineError::Diverged {
                iteration,
                loss,
                initial,
                factor: DIVERGENCE_FACTOR,
                trace: Box::new(trace),
            });
        }
        if last {
            break;
        }
        state.step(cfg.optimizer, cfg.step, &mut uvs, &grads);
        if iteration % 50 == 0 {
            log::debug!("iteration {iteration}: loss {loss:.6e}");
        }
    }

    let fields = views
        .iter()
        .zip(&uvs)
        .map(|(v, u)| v.init.with_foreground_uvs(u))
        .collect();
    let uv_regression = match (trace.first().uv_error, trace.last().uv_error) {
        (Some(a), Some(b)) => b >= 0.9 * a,
        _ => false,
    };
    Ok(RefineOutcome {
        fields,
        trace,
        uv_regression,
    })
}

/// Two-view refinement; `terms` must be built with A = view 0.
pub fn refine_pair(
    a: ViewInput,
    b: ViewInput,
    terms: &PairTerms,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    refine_viewset(&[a, b], &[(0, 1, terms)], cfg)
}
