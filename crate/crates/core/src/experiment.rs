//! Monte Carlo robustness sweeps over pose-noise levels.
//!
//! Every trial draws a fresh scene, detections and pose noise from streams
//! keyed by `(master seed, trial index)` only. All noise cells and all
//! methods therefore see the same scenes and the same standard-normal noise
//! draws, scaled by each cell's `σ`. AP is computed once per cell over the
//! pooled detections of all its trials.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{self, Detection, FusionError, PipelineConfig};
use crate::geometry::{relative_transform, OrientedBox, RigidTransform};
use crate::metrics::{self, FrameBox, FrameDetection, MetricsError, TransformError};
use crate::rng;
use crate::scenario::{self, Layout, NoiseSpec, ScenarioError, SensorSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid sweep config: {0}")]
    InvalidConfig(String),
    #[error("scene generation failed at sigma_p={sigma_p} m, sigma_phi={sigma_phi_deg} deg, trial {trial}: {source}")]
    Scene {
        sigma_p: f64,
        sigma_phi_deg: f64,
        trial: usize,
        #[source]
        source: ScenarioError,
    },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("methods cover different noise grids: {0}")]
    GridMismatch(String),
    #[error("failed to write results: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write results: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to write results: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Ego detections only.
    NoFusion,
    /// Late fusion with the pose-derived transform.
    Uncorrected,
    /// Late fusion after association and registration.
    Corrected,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NoFusion, Method::Uncorrected, Method::Corrected];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoFusion => "no-fusion",
            Method::Uncorrected => "uncorrected",
            Method::Corrected => "corrected",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected no-fusion, uncorrected or corrected)"))
    }
}

/// One noise level: position std in meters, heading std in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub sigma_p: f64,
    pub sigma_phi_deg: f64,
}

impl NoiseCell {
    pub fn new(sigma_p: f64, sigma_phi_deg: f64) -> Self {
        Self { sigma_p, sigma_phi_deg }
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_p == 0.0 && self.sigma_phi_deg == 0.0
    }

    fn key(&self) -> (u64, u64) {
        (self.sigma_p.to_bits(), self.sigma_phi_deg.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Meters.
    pub sigma_p_grid: Vec<f64>,
    /// Degrees.
    pub sigma_phi_grid_deg: Vec<f64>,
    pub trials_per_cell: usize,
    pub n_objects: usize,
    pub layout: Layout,
    pub sensor: SensorSpec,
    pub pipeline: PipelineConfig,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Full σ_p × σ_φ product instead of the two one-dimensional sweeps.
    pub joint: bool,
    pub iou_min: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigma_p_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            sigma_phi_grid_deg: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            trials_per_cell: 50,
            n_objects: 20,
            layout: Layout::Lane,
            sensor: SensorSpec::default(),
            pipeline: PipelineConfig::default(),
            methods: Method::ALL.to_vec(),
            seed: 0,
            joint: false,
            iou_min: 0.7,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::InvalidConfig(msg.to_string()));
        if self.sigma_p_grid.is_empty() || self.sigma_phi_grid_deg.is_empty() {
            return bad("noise grids must be nonempty");
        }
        if self
            .sigma_p_grid
            .iter()
            .chain(&self.sigma_phi_grid_deg)
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return bad("noise levels must be finite and >= 0");
        }
        if self.trials_per_cell == 0 {
            return bad("trials_per_cell must be >= 1");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if !(self.iou_min > 0.0 && self.iou_min < 1.0) {
            return bad("iou_min must lie in (0, 1)");
        }
        self.sensor
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.pipeline.validate()?;
        Ok(())
    }

    /// Noise cells in sweep order. Without `joint`, position levels come
    /// first (heading 0), then heading levels (position 0); duplicates drop.
    pub fn cells(&self) -> Vec<NoiseCell> {
        let candidates: Vec<NoiseCell> = if self.joint {
            self.sigma_p_grid
                .iter()
                .flat_map(|&p| self.sigma_phi_grid_deg.iter().map(move |&h| NoiseCell::new(p, h)))
                .collect()
        } else {
            self.sigma_p_grid
                .iter()
                .map(|&p| NoiseCell::new(p, 0.0))
                .chain(self.sigma_phi_grid_deg.iter().map(|&h| NoiseCell::new(0.0, h)))
                .collect()
        };
        let mut seen = BTreeSet::new();
        candidates.into_iter().filter(|c| seen.insert(c.key())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: Method,
    pub sigma_p: f64,
    pub sigma_phi_deg: f64,
    pub ap: f64,
    /// Radians.
    pub mean_rre: f64,
    /// Meters.
    pub mean_rte: f64,
    pub mean_inlier_ratio: f64,
    pub trials: usize,
}

impl ExperimentRecord {
    pub fn cell(&self) -> NoiseCell {
        NoiseCell::new(self.sigma_p, self.sigma_phi_deg)
    }
}

/// Per-method result of one simulated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub detections: Vec<Detection>,
    /// Estimated Ego-from-CAV transform error; `None` for no-fusion.
    pub transform_error: Option<TransformError>,
    pub inlier_ratio: Option<f64>,
    pub correction_applied: bool,
}

/// One simulated frame: ground truth plus every requested method's output.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    /// Objects seen by either vehicle, in the Ego frame.
    pub ground_truth: Vec<OrientedBox>,
    pub co_visible: usize,
    pub true_transform: RigidTransform,
    pub methods: Vec<MethodOutcome>,
}

impl TrialOutcome {
    pub fn method(&self, method: Method) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == method)
    }
}

/// Simulates trial `trial` of `cell`.
pub fn simulate_trial(config: &SweepConfig, cell: NoiseCell, trial: usize) -> Result<TrialOutcome, ExperimentError> {
    let t = trial as u64;
    let scene = scenario::generate_scene(
        config.n_objects,
        config.layout,
        rng::derive_seed(config.seed, "trial-scene", t),
    )
    .map_err(|source| ExperimentError::Scene {
        sigma_p: cell.sigma_p,
        sigma_phi_deg: cell.sigma_phi_deg,
        trial,
        source,
    })?;
    let ego_pose = scene.ego_pose;
    let cav_pose = scene.cav_pose;
    let ego_dets = scenario::observe(
        &scene,
        &ego_pose,
        &config.sensor,
        &mut rng::stream(config.seed, "ego-observe", t),
    );
    let cav_dets = scenario::observe(
        &scene,
        &cav_pose,
        &config.sensor,
        &mut rng::stream(config.seed, "cav-observe", t),
    );
    let noise = NoiseSpec {
        sigma_p: cell.sigma_p,
        sigma_phi: cell.sigma_phi_deg.to_radians(),
        seed: config.seed,
    };
    let noisy_cav = scenario::perturb_pose(&cav_pose, &noise, &mut rng::stream(config.seed, "pose-noise", t));

    let ego_visible = scenario::visible_objects(&scene, &ego_pose, &config.sensor);
    let cav_visible = scenario::visible_objects(&scene, &cav_pose, &config.sensor);
    let co_visible = ego_visible.iter().filter(|i| cav_visible.contains(i)).count();
    let mut union: Vec<usize> = ego_visible.iter().chain(&cav_visible).copied().collect();
    union.sort_unstable();
    union.dedup();
    let ground_truth = union
        .iter()
        .map(|&i| scenario::to_local(&ego_pose, &scene.objects[i]))
        .collect();
    let true_transform = relative_transform(&ego_pose, &cav_pose);

    let mut pipeline = config.pipeline;
    pipeline.registration.seed = rng::derive_seed(config.seed, "ransac", t);

    let mut methods = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        let outcome = match method {
            Method::NoFusion => MethodOutcome {
                method,
                detections: ego_dets.clone(),
                transform_error: None,
                inlier_ratio: None,
                correction_applied: false,
            },
            Method::Uncorrected | Method::Corrected => {
                let cfg = PipelineConfig {
                    correction_enabled: method == Method::Corrected,
                    ..pipeline
                };
                let out = fusion::fuse_frame(&ego_pose, &noisy_cav, &ego_dets, &cav_dets, &cfg)?;
                MethodOutcome {
                    method,
                    transform_error: Some(TransformError::between(&true_transform, &out.applied_transform)),
                    inlier_ratio: out.registration.as_ref().map(|r| r.inlier_ratio),
                    correction_applied: out.correction_applied,
                    detections: out.objects,
                }
            }
        };
        methods.push(outcome);
    }
    Ok(TrialOutcome {
        ground_truth,
        co_visible,
        true_transform,
        methods,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs every `(cell, trial)` and folds the trials into one record per
/// `(method, cell)`. Records are ordered by cell, then by the configured
/// method order. Trials run in parallel on the current rayon pool; the
/// result does not depend on the thread count.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<ExperimentRecord>, ExperimentError> {
    config.validate()?;
    let mut records = Vec::new();
    for cell in config.cells() {
        let trials: Vec<TrialOutcome> = (0..config.trials_per_cell)
            .into_par_iter()
            .map(|trial| simulate_trial(config, cell, trial))
            .collect::<Result<_, _>>()?;
        let ground_truth: Vec<FrameBox> = trials
            .iter()
            .enumerate()
            .flat_map(|(frame, t)| {
                t.ground_truth.iter().map(move |b| FrameBox {
                    frame: frame as u64,
                    bbox: *b,
                })
            })
            .collect();
        for &method in &config.methods {
            let outcomes: Vec<&MethodOutcome> = trials.iter().filter_map(|t| t.method(method)).collect();
            let detections: Vec<FrameDetection> = outcomes
                .iter()
                .enumerate()
                .flat_map(|(frame, o)| {
                    o.detections.iter().map(move |d| FrameDetection {
                        frame: frame as u64,
                        detection: *d,
                    })
                })
                .collect();
            let ap = if ground_truth.is_empty() {
                0.0
            } else {
                metrics::average_precision(&detections, &ground_truth, config.iou_min)?.ap
            };
            records.push(ExperimentRecord {
                method,
                sigma_p: cell.sigma_p,
                sigma_phi_deg: cell.sigma_phi_deg,
                ap,
                mean_rre: mean(outcomes.iter().filter_map(|o| o.transform_error.map(|e| e.rre))),
                mean_rte: mean(outcomes.iter().filter_map(|o| o.transform_error.map(|e| e.rte))),
                mean_inlier_ratio: mean(outcomes.iter().filter_map(|o| o.inlier_ratio)),
                trials: outcomes.len(),
            });
        }
    }
    Ok(records)
}

/// Method × noise-cell AP table with degradation relative to each method's
/// noiseless cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub cells: Vec<NoiseCell>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub ap: Vec<f64>,
    /// `(ap(0) − ap(σ)) / ap(0)`; `None` without a noiseless cell or when
    /// `ap(0) = 0`.
    pub degradation: Vec<Option<f64>>,
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn cell_index(&self, cell: NoiseCell) -> Option<usize> {
        self.cells.iter().position(|c| c.key() == cell.key())
    }

    pub fn degradation(&self, method: Method, cell: NoiseCell) -> Option<f64> {
        self.row(method)?.degradation[self.cell_index(cell)?]
    }
}

pub fn compare_methods(records: &[ExperimentRecord]) -> Result<ComparisonTable, ExperimentError> {
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let cells_of = |method: Method| -> Vec<NoiseCell> {
        records
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.cell())
            .collect()
    };
    let cells = methods.first().map(|&m| cells_of(m)).unwrap_or_default();
    for &method in &methods[1.min(methods.len())..] {
        let other = cells_of(method);
        let same = other.len() == cells.len() && other.iter().zip(&cells).all(|(a, b)| a.key() == b.key());
        if !same {
            return Err(ExperimentError::GridMismatch(format!(
                "{} has {} cells, {} has {}",
                methods[0],
                cells.len(),
                method,
                other.len()
            )));
        }
    }
    let rows = methods
        .iter()
        .map(|&method| {
            let ap: Vec<f64> = records.iter().filter(|r| r.method == method).map(|r| r.ap).collect();
            let baseline = cells.iter().position(NoiseCell::is_noiseless).map(|k| ap[k]);
            let degradation = ap
                .iter()
                .map(|&a| baseline.filter(|&b| b > 0.0).map(|b| (b - a) / b))
                .collect();
            ComparisonRow {
                method,
                ap,
                degradation,
            }
        })
        .collect();
    Ok(ComparisonTable { cells, rows })
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "AP@IoU")?;
        for c in &self.cells {
            write!(f, " {:>13}", format!("{:.1}m/{:.1}deg", c.sigma_p, c.sigma_phi_deg))?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<12}", row.method.name())?;
            for (ap, deg) in row.ap.iter().zip(&row.degradation) {
                match deg {
                    Some(d) => write!(f, " {:>13}", format!("{ap:.3} ({:+.0}%)", -100.0 * d))?,
                    None => write!(f, " {:>13}", format!("{ap:.3}"))?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "method",
    "sigma_p_m",
    "sigma_phi_deg",
    "ap",
    "mean_rre_deg",
    "mean_rte_m",
    "mean_inlier_ratio",
    "trials",
];

/// Comma-separated results, one record per row, header first.
pub fn write_csv<W: Write>(records: &[ExperimentRecord], writer: W) -> Result<(), ExperimentError> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record([
            r.method.name().to_string(),
            r.sigma_p.to_string(),
            r.sigma_phi_deg.to_string(),
            r.ap.to_string(),
            r.mean_rre.to_degrees().to_string(),
            r.mean_rte.to_string(),
            r.mean_inlier_ratio.to_string(),
            r.trials.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// JSON mirror of the CSV rows (same column names and units).
pub fn write_json<W: Write>(records: &[ExperimentRecord], writer: W) -> Result<(), ExperimentError> {
    #[derive(Serialize)]
    struct Row<'a> {
        method: &'a str,
        sigma_p_m: f64,
        sigma_phi_deg: f64,
        ap: f64,
        mean_rre_deg: f64,
        mean_rte_m: f64,
        mean_inlier_ratio: f64,
        trials: usize,
    }
    let rows: Vec<Row> = records
        .iter()
        .map(|r| Row {
            method: r.method.name(),
            sigma_p_m: r.sigma_p,
            sigma_phi_deg: r.sigma_phi_deg,
            ap: r.ap,
            mean_rre_deg: r.mean_rre.to_degrees(),
            mean_rte_m: r.mean_rte,
            mean_inlier_ratio: r.mean_inlier_ratio,
            trials: r.trials,
        })
        .collect();
    serde_json::to_writer_pretty(writer, &rows)?;
    Ok(())
}
