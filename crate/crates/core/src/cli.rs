//! `depi` command line: scene generation, evaluation, refinement, gradient
//! checks and heatmaps. Every command echoes its effective config into the
//! output directory, and all outputs are byte-deterministic given the
//! config and seed, whatever the thread count.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::consistency::{MatchabilityConfig, PairTerms};
use crate::field::{
    apply_uv_transform, perturb_field_with, read_field_csv, write_field_csv, DenseField,
    FieldError, UvTransform,
};
use crate::geometry::{CalibratedPair, Camera, GeometryError};
use crate::imageio::{write_pfm, write_pgm8, write_ppm};
use crate::losses::{
    finite_difference_check, FdReport, Labels, LossError, LossWeights, Objective, Reduction,
};
use crate::metrics::{
    self, field_visibility, pixel_epipolar_errors, MetricConfig, MetricError, ViewEval,
};
use crate::refine::{
    refine_viewset, Optimizer, RefineConfig, RefineError, RefineOutcome, RefineTrace, ViewInput,
};
use crate::rng;
use crate::scene::{RenderedView, SceneConfig, SceneError, SyntheticScene};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::NotFound(_) | CliError::Io { .. } => 3,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::NotFound(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NoMutualVisibility | MetricError::EmptyCloud => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Diverged { .. } | RefineError::NonFinite(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn field_error(path: &Path, e: FieldError) -> CliError {
    match e {
        FieldError::Io(io) => CliError::io(path, io),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    /// Two cameras around a cylinder patch.
    #[default]
    Default,
    /// Four cameras, all six pairs.
    FourView,
    /// Two disjoint cylinder parts.
    TwoPart,
}

impl ScenePreset {
    pub fn config(self) -> SceneConfig {
        match self {
            ScenePreset::Default => SceneConfig::default(),
            ScenePreset::FourView => SceneConfig::four_view_rig(),
            ScenePreset::TwoPart => SceneConfig::two_part(),
        }
    }
}

/// Which field `L_R` anchors to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrozenReference {
    /// The starting field (the usual semi-supervised setting).
    #[default]
    Init,
    GroundTruth,
}

/// How the refinement start is derived from ground truth: rotate about the
/// chart centre, then add Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StartConfig {
    pub perturb_std: f64,
    pub rotation_deg: f64,
    /// Rotate the `Ω` lattice along with the field.
    pub rotate_omega: bool,
    pub frozen: FrozenReference,
    /// Add the supervised term against ground truth.
    pub supervised: bool,
}

impl Default for StartConfig {
    fn default() -> Self {
        Self {
            perturb_std: 0.05,
            rotation_deg: 0.0,
            rotate_omega: true,
            frozen: FrozenReference::Init,
            supervised: false,
        }
    }
}

/// Rotation error applied to one camera before the pair terms are built;
/// rendering and visibility keep the true cameras.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraErrorConfig {
    pub camera: usize,
    pub axis: [f64; 3],
    pub degrees: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSettings {
    pub iterations: usize,
    pub step: f64,
    pub optimizer: Optimizer,
    pub reduction: Reduction,
    pub sigma_schedule: Vec<(usize, f64)>,
}

impl Default for RefineSettings {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            iterations: d.iterations,
            step: d.step,
            optimizer: d.optimizer,
            reduction: d.reduction,
            sigma_schedule: d.sigma_schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// Foreground pixels kept in views A and B.
    pub pixels: (usize, usize),
    pub epsilon: f64,
    pub tolerance: f64,
    pub perturb_std: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            pixels: (50, 60),
            epsilon: 1e-6,
            tolerance: 1e-5,
            perturb_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene JSON path, relative to the experiment config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_config: Option<PathBuf>,
    /// Inline scene; used when no path is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
    pub preset: ScenePreset,
    /// Keep only the first `n` cameras of the scene.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_views: Option<usize>,
    pub weights: LossWeights,
    pub matchability: MatchabilityConfig,
    pub refine: RefineSettings,
    pub start: StartConfig,
    /// View pairs; all `a < b` pairs when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub camera_error: Option<CameraErrorConfig>,
    pub grad_check: GradCheckConfig,
    pub metrics: MetricConfig,
    /// Epipolar error (pixels) mapped to white in heatmaps.
    pub heatmap_cap: f64,
    /// Output directory; not echoed so outputs do not depend on it.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene_config: None,
            scene: None,
            preset: ScenePreset::Default,
            max_views: None,
            weights: LossWeights::default(),
            matchability: MatchabilityConfig::default(),
            refine: RefineSettings::default(),
            start: StartConfig::default(),
            pairs: None,
            camera_error: None,
            grad_check: GradCheckConfig::default(),
            metrics: MetricConfig::default(),
            heatmap_cap: 10.0,
            out: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if let Some(scene) = &cfg.scene_config {
            let resolved = path.parent().unwrap_or(Path::new(".")).join(scene);
            let text = fs::read_to_string(&resolved).map_err(|e| CliError::io(&resolved, e))?;
            let scene: SceneConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", resolved.display())))?;
            cfg.scene = Some(scene);
        }
        Ok(cfg)
    }

    pub fn scene_config(&self) -> SceneConfig {
        let mut scene = self.scene.clone().unwrap_or_else(|| self.preset.config());
        if let Some(n) = self.max_views {
            scene.cameras.truncate(n);
        }
        scene
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            iterations: self.refine.iterations,
            step: self.refine.step,
            optimizer: self.refine.optimizer,
            weights: self.weights,
            reduction: self.refine.reduction,
            matchability: self.matchability.clone(),
            sigma_schedule: self.refine.sigma_schedule.clone(),
            seed: self.seed,
        }
    }

    pub fn pair_list(&self, views: usize) -> Result<Vec<(usize, usize)>, CliError> {
        let pairs = match &self.pairs {
            Some(p) => p.clone(),
            None => (0..views)
                .flat_map(|a| (a + 1..views).map(move |b| (a, b)))
                .collect(),
        };
        for &(a, b) in &pairs {
            if a >= views || b >= views || a == b {
                return Err(CliError::Validation(format!(
                    "invalid pair ({a}, {b}) for {views} views"
                )));
            }
        }
        Ok(pairs)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.weights.validate()?;
        self.matchability
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.refine_config().validate()?;
        if !(self.start.perturb_std >= 0.0 && self.start.perturb_std.is_finite()) {
            return Err(CliError::Validation(
                "perturb_std must be non-negative".into(),
            ));
        }
        if !(self.heatmap_cap > 0.0) {
            return Err(CliError::Validation("heatmap_cap must be positive".into()));
        }
        let g = &self.grad_check;
        if g.pixels.0 == 0 || g.pixels.1 == 0 || !(g.epsilon > 0.0) || !(g.tolerance > 0.0) {
            return Err(CliError::Validation("invalid grad_check settings".into()));
        }
        Ok(())
    }

    /// The effective config as echoed into output directories, with the
    /// scene inlined so the echo is self-contained.
    pub fn echo(&self) -> Self {
        Self {
            scene_config: None,
            scene: Some(self.scene_config()),
            max_views: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "depi",
    version,
    about = "Multiview-consistent dense keypoint field experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Matchability σ (chart units).
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    #[arg(long = "lambda-m", global = true)]
    pub lambda_m: Option<f64>,
    #[arg(long = "lambda-r", global = true)]
    pub lambda_r: Option<f64>,
    #[arg(long = "lambda-t", global = true)]
    pub lambda_t: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the scene's views and write cameras, fields and images.
    SceneGen,
    /// Evaluate predicted fields against a generated scene.
    Eval {
        /// Directory written by `scene-gen`.
        #[arg(long)]
        scene: PathBuf,
        /// Directory holding `view_<i>/field.csv` predictions.
        #[arg(long)]
        pred: PathBuf,
    },
    /// Refine perturbed fields by gradient descent on the total loss.
    Refine,
    /// Check analytic gradients of every loss term by central differences.
    GradCheck {
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write epipolar-error heatmaps for predicted fields.
    Heatmap {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
}

impl Cli {
    /// Defaults, then the config file, then command-line flags.
    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(s) = self.sigma {
            cfg.matchability.sigma = s;
        }
        if let Some(v) = self.lambda_m {
            cfg.weights.lambda_m = v;
        }
        if let Some(v) = self.lambda_r {
            cfg.weights.lambda_r = v;
        }
        if let Some(v) = self.lambda_t {
            cfg.weights.lambda_t = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEPI_LOG", "warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.experiment()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let job = || match &cli.command {
        Command::SceneGen => cmd_scene_gen(&cfg, &out),
        Command::Eval { scene, pred } => cmd_eval(&cfg, scene, pred, &out),
        Command::Refine => cmd_refine(&cfg, &out).map(|_| ()),
        Command::GradCheck { corrupt_gradient } => {
            cmd_grad_check(&cfg, &out, *corrupt_gradient).map(|_| ())
        }
        Command::Heatmap { scene, pred } => cmd_heatmap(&cfg, scene, pred, &out),
    };
    match cli.threads {
        Some(0) => Err(CliError::Validation("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Validation(e.to_string()))?
            .install(job),
        None => job(),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_field(path: &Path, field: &DenseField) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_field_csv(field, &mut buf).map_err(|e| field_error(path, e))?;
    write_bytes(path, &buf)
}

fn read_field(path: &Path) -> Result<DenseField, CliError> {
    let mut file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_field_csv(&mut file).map_err(|e| field_error(path, e))
}

pub fn field_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view_{view}")).join("field.csv")
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_json(&out.join("config.json"), &cfg.echo())
}

fn render_all(scene: &SyntheticScene) -> Result<Vec<RenderedView>, CliError> {
    (0..scene.cameras().len())
        .map(|i| scene.render(i).map_err(CliError::from))
        .collect()
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Serialize)]
struct PairRecord {
    a: usize,
    b: usize,
    #[serde(rename = "F")]
    f: [[f64; 3]; 3],
}

pub fn cmd_scene_gen(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let scene = cfg.scene_config().build()?;
    let views = render_all(&scene)?;
    write_config(out, cfg)?;
    write_json(&out.join("scene.json"), scene.config())?;
    write_json(&out.join("cameras.json"), &scene.cameras())?;
    let n = views.len();
    let mut records = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let pair = CalibratedPair::new(scene.cameras()[a].clone(), scene.cameras()[b].clone())?;
            let f = pair.fundamental();
            records.push(PairRecord {
                a,
                b,
                f: [0, 1, 2].map(|r| [0, 1, 2].map(|c| f[(r, c)])),
            });
        }
    }
    write_json(&out.join("fundamental.json"), &records)?;

    for (i, v) in views.iter().enumerate() {
        let dir = out.join(format!("view_{i}"));
        let (w, h) = (v.width(), v.height());
        write_field(&dir.join("field.csv"), &v.field)?;
        let mut buf = Vec::new();
        write_ppm(&mut buf, w, h, &v.rgb).map_err(|e| CliError::io(&dir, e))?;
        write_bytes(&dir.join("rgb.ppm"), &buf)?;
        let depth: Vec<f32> = v.depth.iter().map(|&d| d as f32).collect();
        let mut buf = Vec::new();
        write_pfm(&mut buf, w, h, &depth).map_err(|e| CliError::io(&dir, e))?;
        write_bytes(&dir.join("depth.pfm"), &buf)?;
        for (j, other) in views.iter().enumerate() {
            if j == i {
                continue;
            }
            let vis = scene.visibility(v, other)?;
            let mut mask = vec![0u8; (w * h) as usize];
            for ((p, _), visible) in v.field.foreground().zip(&vis) {
                mask[(p.y * w + p.x) as usize] = if *visible { 255 } else { 128 };
            }
            let mut buf = Vec::new();
            write_pgm8(&mut buf, w, h, &mask).map_err(|e| CliError::io(&dir, e))?;
            write_bytes(&dir.join(format!("visibility_{j}.pgm")), &buf)?;
        }
    }
    log::info!("wrote {n} views to {}", out.display());
    Ok(())
}

/// A generated scene read back from disk: the rebuilt scene plus the
/// ground-truth fields as written.
pub struct SceneDir {
    pub scene: SyntheticScene,
    pub gt: Vec<DenseField>,
}

pub fn load_scene_dir(dir: &Path) -> Result<SceneDir, CliError> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let config: SceneConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let scene = config.build()?;
    let gt = (0..scene.cameras().len())
        .map(|i| read_field(&field_path(dir, i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SceneDir { scene, gt })
}

fn load_predictions(dir: &Path, gt: &[DenseField]) -> Result<Vec<DenseField>, CliError> {
    gt.iter()
        .enumerate()
        .map(|(i, g)| {
            let path = field_path(dir, i);
            let f = read_field(&path)?;
            f.same_mask(g).map_err(|e| field_error(&path, e))?;
            Ok(f)
        })
        .collect()
}

fn write_heatmaps(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    pred: &[DenseField],
    gt: &[DenseField],
    pairs: &[(usize, usize)],
    out: &Path,
) -> Result<(), CliError> {
    for &(a, b) in pairs {
        for (x, y) in [(a, b), (b, a)] {
            let (cx, cy) = (scene.camera(x)?, scene.camera(y)?);
            let pair = CalibratedPair::new(cx.clone(), cy.clone())?;
            let vis_x = field_visibility(scene, &gt[x], cy)?;
            let vis_y = field_visibility(scene, &gt[y], cx)?;
            let errors = pixel_epipolar_errors(&pred[x], &pred[y], &pair, &vis_x, &vis_y)?;
            let (w, h) = (pred[x].width(), pred[x].height());
            let mut gray = vec![0u8; (w * h) as usize];
            let mut raw = vec![f32::NAN; (w * h) as usize];
            for ((p, _), e) in pred[x].foreground().zip(&errors) {
                if let Some(e) = e {
                    let k = (p.y * w + p.x) as usize;
                    gray[k] = to_u8(e / cfg.heatmap_cap);
                    raw[k] = *e as f32;
                }
            }
            let stem = format!("heatmap_{x}_{y}");
            let mut buf = Vec::new();
            write_pgm8(&mut buf, w, h, &gray).map_err(|e| CliError::io(out, e))?;
            write_bytes(&out.join(format!("{stem}.pgm")), &buf)?;
            let mut buf = Vec::new();
            write_pfm(&mut buf, w, h, &raw).map_err(|e| CliError::io(out, e))?;
            write_bytes(&out.join(format!("{stem}.pfm")), &buf)?;
        }
    }
    Ok(())
}

fn metric_report(
    cfg: &ExperimentConfig,
    scene: &SyntheticScene,
    pred: &[DenseField],
    gt: &[DenseField],
    pairs: &[(usize, usize)],
) -> Result<metrics::MetricReport, CliError> {
    let views: Vec<ViewEval> = pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(camera, (pred, gt))| ViewEval { pred, gt, camera })
        .collect();
    Ok(metrics::evaluate(scene, &views, pairs, &cfg.metrics)?)
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    scene_dir: &Path,
    pred_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let SceneDir { scene, gt } = load_scene_dir(scene_dir)?;
    let pred = load_predictions(pred_dir, &gt)?;
    let pairs = cfg.pair_list(gt.len())?;
    let report = metric_report(cfg, &scene, &pred, &gt, &pairs)?;
    write_config(out, cfg)?;
    write_json(&out.join("metrics.json"), &report)?;
    let csv = format!(
        "{}\n{}\n",
        metrics::MetricReport::CSV_HEADER,
        report.csv_row()
    );
    write_bytes(&out.join("metrics.csv"), csv.as_bytes())?;
    write_heatmaps(cfg, &scene, &pred, &gt, &pairs, out)
}

pub fn cmd_heatmap(
    cfg: &ExperimentConfig,
    scene_dir: &Path,
    pred_dir: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let SceneDir { scene, gt } = load_scene_dir(scene_dir)?;
    let pred = load_predictions(pred_dir, &gt)?;
    let pairs = cfg.pair_list(gt.len())?;
    write_config(out, cfg)?;
    write_heatmaps(cfg, &scene, &pred, &gt, &pairs, out)
}

/// Pair terms for `(a, b)` using `cameras` for geometry but the scene's true
/// visibility.
fn pair_terms(
    scene: &SyntheticScene,
    cameras: &[Camera],
    views: &[RenderedView],
    a: usize,
    b: usize,
) -> Result<PairTerms, CliError> {
    let pair = CalibratedPair::new(cameras[a].clone(), cameras[b].clone())?;
    let (va, vb) = (&views[a], &views[b]);
    let (ca, cb) = (va.foreground_colors(), vb.foreground_colors());
    let vis_a = scene.visibility(va, vb)?;
    let vis_b = scene.visibility(vb, va)?;
    PairTerms::new(
        &va.field,
        &vb.field,
        &pair,
        Some((&ca, &cb)),
        &vis_a,
        &vis_b,
    )
    .map_err(|e| CliError::Validation(e.to_string()))
}

fn starting_fields(cfg: &ExperimentConfig, gt: &[DenseField]) -> Result<Vec<DenseField>, CliError> {
    let rotation =
        UvTransform::rotation_about(cfg.start.rotation_deg.to_radians(), Vector2::new(0.5, 0.5));
    gt.iter()
        .enumerate()
        .map(|(i, g)| {
            let rotated = if cfg.start.rotation_deg != 0.0 {
                apply_uv_transform(g, &rotation).map_err(|e| CliError::Validation(e.to_string()))?
            } else {
                g.clone()
            };
            let mut rng = rng::stream(cfg.seed, &format!("perturb/{i}"));
            Ok(perturb_field_with(
                &rotated,
                cfg.start.perturb_std,
                &mut rng,
            ))
        })
        .collect()
}

fn trace_csv(trace: &RefineTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).expect("writing to memory");
    buf
}

/// Runs a refinement experiment and writes its artifacts. The divergence
/// guard still writes the partial trace before failing.
pub fn cmd_refine(cfg: &ExperimentConfig, out: &Path) -> Result<RefineOutcome, CliError> {
    let scene = cfg.scene_config().build()?;
    let views = render_all(&scene)?;
    let gt: Vec<DenseField> = views.iter().map(|v| v.field.clone()).collect();
    let pairs = cfg.pair_list(views.len())?;

    let mut cameras = scene.cameras().to_vec();
    if let Some(err) = &cfg.camera_error {
        let cam = cameras.get(err.camera).ok_or_else(|| {
            CliError::Validation(format!("camera_error: no camera {}", err.camera))
        })?;
        let axis = Vector3::from(err.axis);
        if !(axis.norm() > 0.0) {
            return Err(CliError::Validation(
                "camera_error axis must be non-zero".into(),
            ));
        }
        cameras[err.camera] = cam.with_rotation_error(axis, err.degrees.to_radians());
    }
    let terms = pairs
        .iter()
        .map(|&(a, b)| pair_terms(&scene, &cameras, &views, a, b))
        .collect::<Result<Vec<_>, _>>()?;

    let init = starting_fields(cfg, &gt)?;
    let inputs: Vec<ViewInput> = (0..views.len())
        .map(|i| ViewInput {
            init: init[i].clone(),
            frozen: match cfg.start.frozen {
                FrozenReference::Init => init[i].clone(),
                FrozenReference::GroundTruth => gt[i].clone(),
            },
            labels: cfg.start.supervised.then(|| gt[i].clone()),
            gt: Some(gt[i].clone()),
        })
        .collect();
    let mut rcfg = cfg.refine_config();
    if cfg.start.rotate_omega && cfg.start.rotation_deg != 0.0 {
        let r = UvTransform::rotation_about(
            cfg.start.rotation_deg.to_radians(),
            Vector2::new(0.5, 0.5),
        );
        rcfg.matchability.omega_transform = r.compose(&rcfg.matchability.omega_transform);
    }
    let pair_refs: Vec<(usize, usize, &PairTerms)> = pairs
        .iter()
        .zip(&terms)
        .map(|(&(a, b), t)| (a, b, t))
        .collect();

    write_config(out, cfg)?;
    for (i, f) in init.iter().enumerate() {
        write_field(&field_path(&out.join("init"), i), f)?;
    }
    let outcome = match refine_viewset(&inputs, &pair_refs, &rcfg) {
        Ok(o) => o,
        Err(RefineError::Diverged {
            iteration,
            loss,
            initial,
            factor,
            trace,
        }) => {
            write_bytes(&out.join("trace.csv"), &trace_csv(&trace))?;
            write_json(
                &out.join("summary.json"),
                &json!({ "diverged": true, "iteration": iteration, "loss": loss, "initial_loss": initial }),
            )?;
            return Err(CliError::Numerical(format!(
                "diverged at iteration {iteration}: loss {loss:e} exceeds {factor}x the initial {initial:e}"
            )));
        }
        Err(e) => return Err(e.into()),
    };

    write_bytes(&out.join("trace.csv"), &trace_csv(&outcome.trace))?;
    for (i, f) in outcome.fields.iter().enumerate() {
        write_field(&field_path(out, i), f)?;
    }
    let before = metric_report(cfg, &scene, &init, &gt, &pairs)?;
    let after = metric_report(cfg, &scene, &outcome.fields, &gt, &pairs)?;
    let (first, last) = (outcome.trace.first(), outcome.trace.last());
    write_json(
        &out.join("report_before.json"),
        &json!({ "loss": first.report.to_json(&rcfg), "metrics": before, "uv_error": first.uv_error }),
    )?;
    write_json(
        &out.join("report_after.json"),
        &json!({
            "loss": last.report.to_json(&rcfg),
            "metrics": after,
            "uv_error": last.uv_error,
            "uv_regression": outcome.uv_regression,
        }),
    )?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "diverged": false,
            "iterations": rcfg.iterations,
            "initial_epi_error": first.epi_error,
            "final_epi_error": last.epi_error,
            "initial_uv_error": first.uv_error,
            "final_uv_error": last.uv_error,
            "uv_regression": outcome.uv_regression,
        }),
    )?;
    if outcome.uv_regression {
        log::warn!("final UV error is not below 90% of the initial one");
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct TermCheck {
    pub term: String,
    pub view: usize,
    pub pixel: usize,
    pub component: usize,
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub terms: Vec<TermCheck>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// Central-difference check of `L_L`, `L_R`, `L_M` and `L_T` on the first
/// pair, truncated to a small foreground. `corrupt` perturbs one analytic
/// `L_M` component so the failure path can be exercised.
pub fn grad_check(cfg: &ExperimentConfig, corrupt: bool) -> Result<GradCheckReport, CliError> {
    let g = &cfg.grad_check;
    let scene = cfg.scene_config().build()?;
    let &(a, b) = cfg
        .pair_list(scene.cameras().len())?
        .first()
        .ok_or_else(|| CliError::Validation("grad-check needs at least one pair".into()))?;
    let (va, vb) = (scene.render(a)?, scene.render(b)?);
    let vis_a = scene.visibility(&va, &vb)?;
    let vis_b = scene.visibility(&vb, &va)?;
    let (na, nb) = (
        g.pixels.0.min(va.field.foreground_count()),
        g.pixels.1.min(vb.field.foreground_count()),
    );
    let gt = [
        va.field.truncate_foreground(na),
        vb.field.truncate_foreground(nb),
    ];
    let (ca, cb) = (va.foreground_colors(), vb.foreground_colors());
    let pair = CalibratedPair::new(scene.cameras()[a].clone(), scene.cameras()[b].clone())?;
    let terms = PairTerms::new(
        &gt[0],
        &gt[1],
        &pair,
        Some((&ca[..na], &cb[..nb])),
        &vis_a[..na],
        &vis_b[..nb],
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let pred: Vec<DenseField> = gt
        .iter()
        .enumerate()
        .map(|(i, f)| {
            perturb_field_with(
                f,
                g.perturb_std,
                &mut rng::stream(cfg.seed, &format!("gradcheck/{i}")),
            )
        })
        .collect();
    let frozen = [
        perturb_field_with(
            &gt[0],
            g.perturb_std,
            &mut rng::stream(cfg.seed, "gradcheck/frozen/0"),
        ),
        perturb_field_with(
            &gt[1],
            g.perturb_std,
            &mut rng::stream(cfg.seed, "gradcheck/frozen/1"),
        ),
    ];
    let uvs: Vec<Vec<Vector2<f64>>> = pred.iter().map(|f| f.foreground_uvs()).collect();
    let flat: Vec<Vector2<f64>> = uvs.concat();
    let gt_flat: Vec<Vector2<f64>> = gt.iter().flat_map(|f| f.foreground_uvs()).collect();

    let objective = |weights: LossWeights, labels: bool| -> Result<Objective<'_>, CliError> {
        Ok(Objective {
            pairs: vec![(0, 1, &terms)],
            frozen: frozen.iter().map(|f| f.foreground_uvs()).collect(),
            labels: if labels {
                vec![
                    Some(Labels::from_fields(&pred[0], &gt[0])?),
                    Some(Labels::from_fields(&pred[1], &gt[1])?),
                ]
            } else {
                vec![None, None]
            },
            weights,
            matchability: cfg.matchability.clone(),
            reduction: cfg.refine.reduction,
        })
    };
    let split = |u: &[Vector2<f64>]| vec![u[..na].to_vec(), u[na..].to_vec()];
    let checks = [
        ("L_L", LossWeights::new(0.0, 0.0, 0.0)?, true),
        ("L_R", LossWeights::new(0.0, 1.0, 0.0)?, false),
        ("L_M", LossWeights::new(1.0, 0.0, 0.0)?, false),
        ("L_T", LossWeights::new(0.0, 0.0, 1.0)?, false),
    ];
    let mut report = GradCheckReport {
        tolerance: g.tolerance,
        terms: Vec::new(),
        warnings: Vec::new(),
        pass: true,
    };
    for (name, weights, labels) in checks {
        let obj = objective(weights, labels)?;
        let (_, grads) = obj.evaluate(&uvs, true, false)?;
        let mut analytic: Vec<Vector2<f64>> = grads.concat();
        if corrupt && name == "L_M" {
            let scale = analytic
                .iter()
                .map(|v| v.amax())
                .fold(0.0, f64::max)
                .max(1e-6);
            analytic[na + 3].y += scale;
        }
        let loss = |u: &[Vector2<f64>]| {
            obj.evaluate(&split(u), false, false)
                .map(|(r, _)| r.total)
                .unwrap_or(f64::NAN)
        };
        let eps = g.epsilon;
        let fd: FdReport = finite_difference_check(
            loss,
            &flat,
            &analytic,
            eps,
            flat.len() * 2,
            cfg.seed,
            |i, c| {
                // L1 kinks at label ties.
                labels && (flat[i][c] - gt_flat[i][c]).abs() <= 10.0 * eps
            },
        );
        let max_abs = analytic.iter().map(|v| v.amax()).fold(0.0, f64::max);
        if !fd.max_relative_error.is_finite() {
            return Err(CliError::Numerical(format!(
                "{name}: non-finite loss during the check"
            )));
        }
        if max_abs < 1e-12 && name != "L_L" {
            let msg = format!(
                "vanishing gradient for {name} (max |g| = {max_abs:e}) at sigma {}",
                cfg.matchability.sigma
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        let (view, pixel) = if fd.worst_pixel < na {
            (0, fd.worst_pixel)
        } else {
            (1, fd.worst_pixel - na)
        };
        let pass = fd.max_relative_error <= g.tolerance;
        report.pass &= pass;
        report.terms.push(TermCheck {
            term: name.to_string(),
            view,
            pixel,
            component: fd.worst_component,
            max_relative_error: fd.max_relative_error,
            max_abs_gradient: max_abs,
            checked: fd.checked,
            pass,
        });
    }
    Ok(report)
}

pub fn cmd_grad_check(
    cfg: &ExperimentConfig,
    out: &Path,
    corrupt: bool,
) -> Result<GradCheckReport, CliError> {
    let report = grad_check(cfg, corrupt)?;
    write_config(out, cfg)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    for t in &report.terms {
        log::info!("{}: max relative error {:e}", t.term, t.max_relative_error);
    }
    if let Some(bad) = report.terms.iter().find(|t| !t.pass) {
        return Err(CliError::Numerical(format!(
            "{} gradient check failed: relative error {:e} at view {} pixel {} component {}",
            bad.term, bad.max_relative_error, bad.view, bad.pixel, bad.component
        )));
    }
    Ok(report)
}
