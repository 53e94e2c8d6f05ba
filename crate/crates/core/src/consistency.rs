//! Matchability kernel, affinity matrices and the symmetric probabilistic
//! epipolar / photometric losses, with their exact gradients.
//!
//! Two normalizations of the kernel are supported:
//!
//! * [`OmegaMode::Partner`] (default): the softmax runs over the other view's
//!   predicted UVs of the same part, so every row of `M` sums to one and the
//!   σ → 0 limit is the nearest-neighbour match.
//! * [`OmegaMode::Lattice`]: the denominator sums over a fixed
//!   `omega_grid × omega_grid` lattice on the unit chart.

use nalgebra::{DMatrix, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DenseField, FieldError, UvTransform};
use crate::geometry::{epipolar_distance, CalibratedPair, GeometryError};

/// Rows per parallel work unit. Fixed, so results do not depend on the
/// number of worker threads.
const ROW_BLOCK: usize = 64;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("invalid matchability config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaMode {
    Lattice,
    #[default]
    Partner,
}

fn default_omega_grid() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchabilityConfig {
    pub sigma: f64,
    #[serde(default = "default_omega_grid")]
    pub omega_grid: usize,
    #[serde(default)]
    pub cross_part_matching: bool,
    #[serde(default)]
    pub omega: OmegaMode,
    /// Applied to the lattice points in [`OmegaMode::Lattice`].
    #[serde(default = "UvTransform::identity")]
    pub omega_transform: UvTransform,
    /// Reuse `M ⊙ E` for the reverse term, as in the compact matrix form.
    #[serde(default)]
    pub single_e: bool,
    /// Drop the `1/V`, `1/V′` visible-count normalization.
    #[serde(default)]
    pub unnormalized: bool,
}

impl Default for MatchabilityConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            omega_grid: default_omega_grid(),
            cross_part_matching: false,
            omega: OmegaMode::default(),
            omega_transform: UvTransform::identity(),
            single_e: false,
            unnormalized: false,
        }
    }
}

impl MatchabilityConfig {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConsistencyError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(ConsistencyError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.omega_grid < 2 {
            return Err(ConsistencyError::Config(format!(
                "omega_grid must be at least 2, got {}",
                self.omega_grid
            )));
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// The Ω lattice: `n × n` points `(a/(n−1), b/(n−1))`, optionally mapped
/// through a UV transform.
#[derive(Debug, Clone)]
pub struct Lattice {
    n: usize,
    transform: UvTransform,
    inverse: Option<UvTransform>,
}

impl Lattice {
    pub fn new(n: usize, transform: UvTransform) -> Self {
        // Rigid transforms keep the kernel separable in the lattice frame.
        let inverse = (transform != UvTransform::identity() && transform.is_rigid()).then(|| {
            let a_inv = transform
                .a
                .try_inverse()
                .expect("rigid transform is invertible");
            UvTransform {
                a: a_inv,
                b: -(a_inv * transform.b),
            }
        });
        Self {
            n,
            transform,
            inverse,
        }
    }

    pub fn from_config(cfg: &MatchabilityConfig) -> Self {
        Self::new(cfg.omega_grid, cfg.omega_transform)
    }

    fn coord(&self, k: usize) -> f64 {
        k as f64 / (self.n - 1) as f64
    }

    pub fn points(&self) -> Vec<Vector2<f64>> {
        (0..self.n)
            .flat_map(|a| (0..self.n).map(move |b| (a, b)))
            .map(|(a, b)| {
                self.transform
                    .apply(&Vector2::new(self.coord(a), self.coord(b)))
            })
            .collect()
    }

    /// `(log Σ_v k(u, v), Σ_v k(u, v) v / Σ_v k(u, v))`.
    pub fn log_partition(&self, u: &Vector2<f64>, sigma: f64) -> (f64, Vector2<f64>) {
        let inv = -0.5 / (sigma * sigma);
        let separable = |p: Vector2<f64>| {
            let axis = |x: f64| {
                let logs = (0..self.n).map(move |k| inv * (x - self.coord(k)).powi(2));
                let lz = log_sum_exp(logs.clone());
                let mean: f64 = logs
                    .zip(0..self.n)
                    .map(|(l, k)| (l - lz).exp() * self.coord(k))
                    .sum();
                (lz, mean)
            };
            let (lx, mx) = axis(p.x);
            let (ly, my) = axis(p.y);
            (lx + ly, Vector2::new(mx, my))
        };
        if self.transform == UvTransform::identity() {
            return separable(*u);
        }
        if let Some(inverse) = &self.inverse {
            let (lz, mean) = separable(inverse.apply(u));
            return (lz, self.transform.apply(&mean));
        }
        let pts = self.points();
        let lz = log_sum_exp(pts.iter().map(|v| inv * (u - v).norm_squared()));
        let mean = pts.iter().fold(Vector2::zeros(), |acc, v| {
            acc + v * (inv * (u - v).norm_squared() - lz).exp()
        });
        (lz, mean)
    }
}

/// `P(u, u′)` normalized over the configured Ω lattice.
pub fn matchability(u: &Vector2<f64>, u_prime: &Vector2<f64>, cfg: &MatchabilityConfig) -> f64 {
    let (lz, _) = Lattice::from_config(cfg).log_partition(u, cfg.sigma);
    (-0.5 * (u - u_prime).norm_squared() / (cfg.sigma * cfg.sigma) - lz).exp()
}

/// `P(u, u′)` normalized over an explicit set of Ω points.
pub fn matchability_over(
    u: &Vector2<f64>,
    u_prime: &Vector2<f64>,
    sigma: f64,
    omega: &[Vector2<f64>],
) -> f64 {
    let inv = -0.5 / (sigma * sigma);
    let lz = log_sum_exp(omega.iter().map(|v| inv * (u - v).norm_squared()));
    (inv * (u - u_prime).norm_squared() - lz).exp()
}

/// Field-independent data of one ordered image pair: pixel geometry,
/// epipolar and photometric matrices, and visibility.
///
/// Matrices are row-major. The reverse-direction matrices are stored
/// pre-transposed (rows indexed by pixels of view B).
#[derive(Debug, Clone)]
pub struct PairTerms {
    n: usize,
    m: usize,
    parts_a: Vec<u8>,
    parts_b: Vec<u8>,
    /// Columns of B per part, and all columns.
    groups_b: Vec<Vec<usize>>,
    groups_a: Vec<Vec<usize>>,
    all_b: Vec<usize>,
    all_a: Vec<usize>,
    /// `E_ij = d(x_i, x′_j; F)`.
    e: Vec<f64>,
    /// `(E′)ᵀ_ji = d(x′_j, x_i; Fᵀ)`.
    ep_t: Vec<f64>,
    t: Option<Vec<f64>>,
    t_t: Option<Vec<f64>>,
    vis_a: Vec<bool>,
    vis_b: Vec<bool>,
}

/// Loss values, per-pixel expected errors and (optionally) gradients of one
/// pair evaluation.
#[derive(Debug, Clone, Default)]
pub struct PairEval {
    pub l_m: f64,
    pub l_t: f64,
    /// `𝔼(x)` per foreground pixel of A / of B.
    pub expected_a: Vec<f64>,
    pub expected_b: Vec<f64>,
    /// `𝕋(x)` per foreground pixel of A / of B.
    pub photometric_a: Vec<f64>,
    pub photometric_b: Vec<f64>,
    /// Gradient of `λ_M L_M + λ_T L_T`; empty unless requested.
    pub grad_a: Vec<Vector2<f64>>,
    pub grad_b: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub gradient: bool,
    /// Fill the per-pixel expectation maps (also for invisible pixels).
    pub maps: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            lambda_m: 1.0,
            lambda_t: 1.0,
            gradient: false,
            maps: true,
        }
    }
}

fn group_by_part(parts: &[u8]) -> Vec<Vec<usize>> {
    let count = parts.iter().map(|&p| p as usize + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); count];
    for (j, &p) in parts.iter().enumerate() {
        groups[p as usize].push(j);
    }
    groups
}

fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl PairTerms {
    /// `colors_*` and `vis_*` are per foreground pixel in row-major order;
    /// colors are in `[0, 1]`, and `None` disables the photometric term.
    pub fn new(
        field_a: &DenseField,
        field_b: &DenseField,
        pair: &CalibratedPair,
        colors: Option<(&[[f64; 3]], &[[f64; 3]])>,
        vis_a: &[bool],
        vis_b: &[bool],
    ) -> Result<Self, ConsistencyError> {
        let px_a: Vec<Vector2<f64>> = field_a.foreground().map(|(p, _)| p.to_image()).collect();
        let px_b: Vec<Vector2<f64>> = field_b.foreground().map(|(p, _)| p.to_image()).collect();
        let (n, m) = (px_a.len(), px_b.len());
        if vis_a.len() != n || vis_b.len() != m {
            return Err(ConsistencyError::Dimension(format!(
                "visibility lengths {}/{} vs foreground counts {n}/{m}",
                vis_a.len(),
                vis_b.len()
            )));
        }
        if let Some((ca, cb)) = colors {
            if ca.len() != n || cb.len() != m {
                return Err(ConsistencyError::Dimension(format!(
                    "color lengths {}/{} vs foreground counts {n}/{m}",
                    ca.len(),
                    cb.len()
                )));
            }
        }
        let f = *pair.fundamental();
        let ft = f.transpose();
        let e = px_a
            .par_iter()
            .map(|xa| {
                px_b.iter()
                    .map(|xb| epipolar_distance(xa, xb, &f))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let ep_t = px_b
            .par_iter()
            .map(|xb| {
                px_a.iter()
                    .map(|xa| epipolar_distance(xb, xa, &ft))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?
            .concat();
        let (t, t_t) = match colors {
            Some((ca, cb)) => {
                let t: Vec<f64> = ca
                    .iter()
                    .flat_map(|a| cb.iter().map(move |b| color_distance(a, b)))
                    .collect();
                let t_t: Vec<f64> = cb
                    .iter()
                    .flat_map(|b| ca.iter().map(move |a| color_distance(a, b)))
                    .collect();
                (Some(t), Some(t_t))
            }
            None => (None, None),
        };
        let parts_a = field_a.foreground_parts();
        let parts_b = field_b.foreground_parts();
        Ok(Self {
            n,
            m,
            groups_a: group_by_part(&parts_a),
            groups_b: group_by_part(&parts_b),
            all_a: (0..n).collect(),
            all_b: (0..m).collect(),
            parts_a,
            parts_b,
            e,
            ep_t,
            t,
            t_t,
            vis_a: vis_a.to_vec(),
            vis_b: vis_b.to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn visibility(&self) -> (&[bool], &[bool]) {
        (&self.vis_a, &self.vis_b)
    }

    pub fn parts(&self) -> (&[u8], &[u8]) {
        (&self.parts_a, &self.parts_b)
    }

    /// `d(x_i, x′_j; F)`.
    pub fn epipolar(&self, i: usize, j: usize) -> f64 {
        self.e[i * self.m + j]
    }

    /// `d(x′_j, x_i; Fᵀ)`.
    pub fn epipolar_reverse(&self, i: usize, j: usize) -> f64 {
        self.ep_t[j * self.n + i]
    }

    /// The σ → 0 limit of `L_M`: every kernel row collapses onto its
    /// nearest-UV candidate among the same columns the loss sums over.
    pub fn nearest_neighbor_loss(
        &self,
        uv_a: &[Vector2<f64>],
        uv_b: &[Vector2<f64>],
        cfg: &MatchabilityConfig,
    ) -> f64 {
        let c_a = Self::weights(&self.vis_a, cfg.unnormalized);
        let c_b = Self::weights(&self.vis_b, cfg.unnormalized);
        let nearest = |u: &Vector2<f64>, cands: &[Vector2<f64>], cols: &[usize]| {
            cols.iter().copied().min_by(|&x, &y| {
                (u - cands[x])
                    .norm_squared()
                    .total_cmp(&(u - cands[y]).norm_squared())
            })
        };
        let groups = |g: &'_ [Vec<usize>], all: &'_ [usize], part: u8| -> Vec<usize> {
            if cfg.cross_part_matching {
                all.to_vec()
            } else {
                g.get(part as usize).cloned().unwrap_or_default()
            }
        };
        let mut total = 0.0;
        for i in 0..self.n {
            if c_a[i] != 0.0 {
                if let Some(j) = nearest(
                    &uv_a[i],
                    uv_b,
                    &groups(&self.groups_b, &self.all_b, self.parts_a[i]),
                ) {
                    total += c_a[i] * self.epipolar(i, j);
                }
            }
        }
        for j in 0..self.m {
            if c_b[j] != 0.0 {
                if let Some(i) = nearest(
                    &uv_b[j],
                    uv_a,
                    &groups(&self.groups_a, &self.all_a, self.parts_b[j]),
                ) {
                    total += c_b[j] * self.epipolar_reverse(i, j);
                }
            }
        }
        total
    }

    pub fn has_photometric(&self) -> bool {
        self.t.is_some()
    }

    /// Same pair seen from B; all losses are invariant under the swap.
    pub fn swapped(&self) -> Self {
        Self {
            n: self.m,
            m: self.n,
            parts_a: self.parts_b.clone(),
            parts_b: self.parts_a.clone(),
            groups_a: self.groups_b.clone(),
            groups_b: self.groups_a.clone(),
            all_a: self.all_b.clone(),
            all_b: self.all_a.clone(),
            e: self.ep_t.clone(),
            ep_t: self.e.clone(),
            t: self.t_t.clone(),
            t_t: self.t.clone(),
            vis_a: self.vis_b.clone(),
            vis_b: self.vis_a.clone(),
        }
    }

    fn weights(vis: &[bool], unnormalized: bool) -> Vec<f64> {
        let count = vis.iter().filter(|v| **v).count();
        let scale = match (count, unnormalized) {
            (0, _) => 0.0,
            (_, true) => 1.0,
            (c, false) => 1.0 / c as f64,
        };
        vis.iter().map(|&v| if v { scale } else { 0.0 }).collect()
    }

    /// Evaluates `L_M`, `L_T`, the expectation maps and optionally the
    /// gradient of `λ_M L_M + λ_T L_T` with respect to both UV fields.
    pub fn evaluate(
        &self,
        uv_a: &[Vector2<f64>],
        uv_b: &[Vector2<f64>],
        cfg: &MatchabilityConfig,
        opts: EvalOptions,
    ) -> Result<PairEval, ConsistencyError> {
        cfg.validate()?;
        if uv_a.len() != self.n || uv_b.len() != self.m {
            return Err(ConsistencyError::Dimension(format!(
                "uv lengths {}/{} vs foreground counts {}/{}",
                uv_a.len(),
                uv_b.len(),
                self.n,
                self.m
            )));
        }
        let c_a = Self::weights(&self.vis_a, cfg.unnormalized);
        let c_b = Self::weights(&self.vis_b, cfg.unnormalized);
        let lattice = (cfg.omega == OmegaMode::Lattice).then(|| Lattice::from_config(cfg));
        let kernel = Kernel {
            sigma: cfg.sigma,
            lattice: lattice.as_ref(),
            lambda_m: opts.lambda_m,
            lambda_t: opts.lambda_t,
            gradient: opts.gradient,
            maps: opts.maps,
        };
        let forward = kernel.run(&Direction {
            rows_uv: uv_a,
            rows_part: &self.parts_a,
            cols_uv: uv_b,
            groups: if cfg.cross_part_matching {
                None
            } else {
                Some(&self.groups_b)
            },
            all: &self.all_b,
            e: &self.e,
            t: self.t.as_deref(),
            c_rows: &c_a,
            d_cols: cfg.single_e.then_some(c_b.as_slice()),
        });
        let mut out = PairEval {
            l_m: forward.s_e,
            l_t: forward.s_t,
            expected_a: forward.row_e,
            photometric_a: forward.row_t,
            grad_a: forward.grad_rows,
            grad_b: forward.grad_cols,
            ..PairEval::default()
        };
        if cfg.single_e {
            return Ok(out);
        }
        let reverse = kernel.run(&Direction {
            rows_uv: uv_b,
            rows_part: &self.parts_b,
            cols_uv: uv_a,
            groups: if cfg.cross_part_matching {
                None
            } else {
                Some(&self.groups_a)
            },
            all: &self.all_a,
            e: &self.ep_t,
            t: self.t_t.as_deref(),
            c_rows: &c_b,
            d_cols: None,
        });
        out.l_m += reverse.s_e;
        out.l_t += reverse.s_t;
        out.expected_b = reverse.row_e;
        out.photometric_b = reverse.row_t;
        if opts.gradient {
            for (g, r) in out.grad_a.iter_mut().zip(&reverse.grad_cols) {
                *g += r;
            }
            for (g, r) in out.grad_b.iter_mut().zip(&reverse.grad_rows) {
                *g += r;
            }
        }
        Ok(out)
    }
}

/// One directional term `Σ_i Σ_j M_ij (c_i + d_j) W_ij` where `M` is
/// normalized per row.
struct Direction<'a> {
    rows_uv: &'a [Vector2<f64>],
    rows_part: &'a [u8],
    cols_uv: &'a [Vector2<f64>],
    groups: Option<&'a [Vec<usize>]>,
    all: &'a [usize],
    e: &'a [f64],
    t: Option<&'a [f64]>,
    c_rows: &'a [f64],
    d_cols: Option<&'a [f64]>,
}

struct Kernel<'a> {
    sigma: f64,
    lattice: Option<&'a Lattice>,
    lambda_m: f64,
    lambda_t: f64,
    gradient: bool,
    maps: bool,
}

#[derive(Default)]
struct DirOut {
    s_e: f64,
    s_t: f64,
    row_e: Vec<f64>,
    row_t: Vec<f64>,
    grad_rows: Vec<Vector2<f64>>,
    grad_cols: Vec<Vector2<f64>>,
}

struct BlockOut {
    s_e: f64,
    s_t: f64,
    row_e: Vec<f64>,
    row_t: Vec<f64>,
    grad_rows: Vec<Vector2<f64>>,
    grad_cols: Vec<Vector2<f64>>,
}

impl Kernel<'_> {
    fn run(&self, d: &Direction) -> DirOut {
        let n = d.rows_uv.len();
        let m = d.cols_uv.len();
        let blocks: Vec<BlockOut> = (0..n.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| self.block(d, b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n)))
            .collect();
        let mut out = DirOut {
            row_e: Vec::with_capacity(n),
            row_t: Vec::with_capacity(n),
            grad_cols: if self.gradient {
                vec![Vector2::zeros(); m]
            } else {
                Vec::new()
            },
            ..DirOut::default()
        };
        // Sequential merge in block order keeps the reduction deterministic.
        for blk in blocks {
            out.s_e += blk.s_e;
            out.s_t += blk.s_t;
            out.row_e.extend(blk.row_e);
            out.row_t.extend(blk.row_t);
            out.grad_rows.extend(blk.grad_rows);
            for (g, p) in out.grad_cols.iter_mut().zip(&blk.grad_cols) {
                *g += p;
            }
        }
        if !self.maps {
            out.row_e.clear();
            out.row_t.clear();
        }
        out
    }

    fn block(&self, d: &Direction, rows: std::ops::Range<usize>) -> BlockOut {
        let m = d.cols_uv.len();
        let inv = -0.5 / (self.sigma * self.sigma);
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let mut out = BlockOut {
            s_e: 0.0,
            s_t: 0.0,
            row_e: Vec::with_capacity(rows.len()),
            row_t: Vec::with_capacity(rows.len()),
            grad_rows: Vec::with_capacity(if self.gradient { rows.len() } else { 0 }),
            grad_cols: if self.gradient {
                vec![Vector2::zeros(); m]
            } else {
                Vec::new()
            },
        };
        let mut weights = vec![0.0; m];
        for i in rows {
            let u = d.rows_uv[i];
            let cols: &[usize] = match d.groups {
                Some(g) => g.get(d.rows_part[i] as usize).map_or(&[], Vec::as_slice),
                None => d.all,
            };
            let c = d.c_rows[i];
            let active = c != 0.0 || d.d_cols.is_some();
            if cols.is_empty() || (!active && !self.maps) {
                out.row_e.push(0.0);
                out.row_t.push(0.0);
                if self.gradient {
                    out.grad_rows.push(Vector2::zeros());
                }
                continue;
            }
            // Log-space normalization: M_ij = exp(s_ij − log Z_i).
            let (log_z, lattice_mean) = match self.lattice {
                Some(l) => {
                    let (lz, mean) = l.log_partition(&u, self.sigma);
                    (lz, Some(mean))
                }
                None => {
                    let mut max = f64::NEG_INFINITY;
                    for &j in cols {
                        let s = inv * (u - d.cols_uv[j]).norm_squared();
                        weights[j] = s;
                        max = max.max(s);
                    }
                    let z: f64 = cols.iter().map(|&j| (weights[j] - max).exp()).sum();
                    (max + z.ln(), None)
                }
            };
            let e_row = &d.e[i * m..(i + 1) * m];
            let t_row = d.t.map(|t| &t[i * m..(i + 1) * m]);
            let (mut row_e, mut row_t) = (0.0, 0.0);
            let (mut s_e, mut s_t) = (0.0, 0.0);
            let mut h_bar = 0.0;
            let mut u_bar = Vector2::zeros();
            let mut grad_u = Vector2::zeros();
            for &j in cols {
                let s = match self.lattice {
                    Some(_) => inv * (u - d.cols_uv[j]).norm_squared(),
                    None => weights[j],
                };
                let mij = (s - log_z).exp();
                weights[j] = mij;
                let w = c + d.d_cols.map_or(0.0, |dc| dc[j]);
                let e = e_row[j];
                let t = t_row.map_or(0.0, |t| t[j]);
                row_e += mij * e;
                row_t += mij * t;
                s_e += mij * w * e;
                s_t += mij * w * t;
                if self.gradient {
                    let h = w * (self.lambda_m * e + self.lambda_t * t);
                    h_bar += mij * h;
                    u_bar += d.cols_uv[j] * mij;
                    grad_u += d.cols_uv[j] * (mij * h);
                }
            }
            out.s_e += s_e;
            out.s_t += s_t;
            out.row_e.push(row_e);
            out.row_t.push(row_t);
            if !self.gradient {
                continue;
            }
            // ∂/∂u_i = Σ_j M_ij H_ij (u′_j − ū_i)/σ², with ū_i the
            // normalizer's mean (partner mean or lattice mean).
            let mean = lattice_mean.unwrap_or(u_bar);
            out.grad_rows.push((grad_u - mean * h_bar) * inv_s2);
            for &j in cols {
                let mij = weights[j];
                let w = c + d.d_cols.map_or(0.0, |dc| dc[j]);
                let h =
                    w * (self.lambda_m * e_row[j] + self.lambda_t * t_row.map_or(0.0, |t| t[j]));
                // Partner normalization also couples u′_j through Z_i.
                let coupling = if self.lattice.is_some() { h } else { h - h_bar };
                out.grad_cols[j] += (u - d.cols_uv[j]) * (mij * coupling * inv_s2);
            }
        }
        out
    }
}

/// Explicit matrices of one image pair, mainly for inspection and tests;
/// optimization uses [`PairTerms::evaluate`] directly.
#[derive(Debug, Clone)]
pub struct AffinitySet {
    /// `M_ij = P(u_i, u′_j)`, normalized over A's Ω.
    pub m: DMatrix<f64>,
    /// `P(u′_j, u_i)`, normalized over B's Ω, laid out like `m`.
    pub m_rev: DMatrix<f64>,
    pub e: DMatrix<f64>,
    /// `E′_ij = d(x′_j, x_i; Fᵀ)`.
    pub e_prime: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub v: Vec<bool>,
    pub v_prime: Vec<bool>,
}

fn normalized_kernel(
    rows_uv: &[Vector2<f64>],
    rows_part: &[u8],
    cols_uv: &[Vector2<f64>],
    cols_part: &[u8],
    cfg: &MatchabilityConfig,
) -> DMatrix<f64> {
    let inv = -0.5 / (cfg.sigma * cfg.sigma);
    let lattice = Lattice::from_config(cfg);
    let allowed = |i: usize, j: usize| cfg.cross_part_matching || rows_part[i] == cols_part[j];
    let mut out = DMatrix::zeros(rows_uv.len(), cols_uv.len());
    for (i, u) in rows_uv.iter().enumerate() {
        let log_z = match cfg.omega {
            OmegaMode::Lattice => lattice.log_partition(u, cfg.sigma).0,
            OmegaMode::Partner => log_sum_exp(
                (0..cols_uv.len())
                    .filter(|&j| allowed(i, j))
                    .map(|j| inv * (u - cols_uv[j]).norm_squared()),
            ),
        };
        for (j, v) in cols_uv.iter().enumerate() {
            if allowed(i, j) {
                out[(i, j)] = (inv * (u - v).norm_squared() - log_z).exp();
            }
        }
    }
    out
}

pub fn build_affinities(
    terms: &PairTerms,
    uv_a: &[Vector2<f64>],
    uv_b: &[Vector2<f64>],
    cfg: &MatchabilityConfig,
) -> Result<AffinitySet, ConsistencyError> {
    cfg.validate()?;
    let (n, m) = (terms.n, terms.m);
    if uv_a.len() != n || uv_b.len() != m {
        return Err(ConsistencyError::Dimension(
            "uv lengths do not match the pair".into(),
        ));
    }
    let m_mat = normalized_kernel(uv_a, &terms.parts_a, uv_b, &terms.parts_b, cfg);
    let m_rev = normalized_kernel(uv_b, &terms.parts_b, uv_a, &terms.parts_a, cfg).transpose();
    let zeros = vec![0.0; n * m];
    Ok(AffinitySet {
        m: m_mat,
        m_rev,
        e: DMatrix::from_row_slice(n, m, &terms.e),
        e_prime: DMatrix::from_row_slice(m, n, &terms.ep_t).transpose(),
        t: DMatrix::from_row_slice(n, m, terms.t.as_deref().unwrap_or(&zeros)),
        v: terms.vis_a.clone(),
        v_prime: terms.vis_b.clone(),
    })
}

/// `𝔼(x_i) = Σ_j M_ij E_ij`.
pub fn expected_geometric_error(aff: &AffinitySet, i: usize) -> f64 {
    aff.m
        .row(i)
        .iter()
        .zip(aff.e.row(i).iter())
        .map(|(m, e)| m * e)
        .sum()
}

fn count_scale(v: &[bool], unnormalized: bool) -> f64 {
    let c = v.iter().filter(|x| **x).count();
    match (c, unnormalized) {
        (0, _) => 0.0,
        (_, true) => 1.0,
        (c, false) => 1.0 / c as f64,
    }
}

fn symmetric_loss(
    aff: &AffinitySet,
    fwd: &DMatrix<f64>,
    rev: &DMatrix<f64>,
    cfg: &MatchabilityConfig,
) -> f64 {
    let sa = count_scale(&aff.v, cfg.unnormalized);
    let sb = count_scale(&aff.v_prime, cfg.unnormalized);
    let mut total = 0.0;
    for i in 0..aff.m.nrows() {
        for j in 0..aff.m.ncols() {
            let forward = if aff.v[i] {
                sa * aff.m[(i, j)] * fwd[(i, j)]
            } else {
                0.0
            };
            let reverse = if !aff.v_prime[j] {
                0.0
            } else if cfg.single_e {
                sb * aff.m[(i, j)] * fwd[(i, j)]
            } else {
                sb * aff.m_rev[(i, j)] * rev[(i, j)]
            };
            total += forward + reverse;
        }
    }
    total
}

/// `L_M = (1/V) Σ_i V_i 𝔼(x_i) + (1/V′) Σ_j V′_j 𝔼(x′_j)`.
pub fn multiview_loss(aff: &AffinitySet, cfg: &MatchabilityConfig) -> f64 {
    symmetric_loss(aff, &aff.e, &aff.e_prime, cfg)
}

/// `L_T`: as [`multiview_loss`] with photometric residuals in place of
/// epipolar distances.
pub fn photometric_loss(aff: &AffinitySet, cfg: &MatchabilityConfig) -> f64 {
    symmetric_loss(aff, &aff.t, &aff.t, cfg)
}
