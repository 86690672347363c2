use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use coopfuse_core::association::{self, AssociationConfig};
use coopfuse_core::experiment::{self, Method, SweepConfig};
use coopfuse_core::fusion::{self, PipelineConfig};
use coopfuse_core::geometry;
use coopfuse_core::metrics::{self, BandwidthSpec};
use coopfuse_core::registration::{self, MatchedSet, RansacConfig};
use coopfuse_core::scenario::{self, Layout, NoiseSpec, SensorSpec};
use coopfuse_core::{io, rng};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::from(v)
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
}

fn matrix(rows: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

/// Vehicle pose: position in meters, angles (pitch, roll, yaw) in radians.
#[pyclass(name = "Pose", from_py_object, module = "coopfuse")]
#[derive(Clone, Copy)]
struct PyPose(geometry::Pose);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (position, angles = [0.0, 0.0, 0.0]))]
    fn new(position: [f64; 3], angles: [f64; 3]) -> PyResult<Self> {
        let pose = geometry::Pose::new(vec3(position), vec3(angles));
        pose.validate().map_err(value_error)?;
        Ok(Self(pose))
    }

    #[staticmethod]
    fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self(geometry::Pose::planar(x, y, z, yaw))
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        arr3(&self.0.position)
    }

    #[getter]
    fn angles(&self) -> [f64; 3] {
        arr3(&self.0.angles)
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw()
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        rows(&self.0.rotation())
    }

    fn __repr__(&self) -> String {
        format!("Pose(position={:?}, angles={:?})", self.position(), self.angles())
    }
}

/// Gravity-aligned box: center (m), yaw (rad), extent (length, width, height).
#[pyclass(name = "OrientedBox", from_py_object, module = "coopfuse")]
#[derive(Clone, Copy)]
struct PyBox(geometry::OrientedBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(center: [f64; 3], yaw: f64, extent: [f64; 3]) -> PyResult<Self> {
        let b = geometry::OrientedBox {
            center: vec3(center),
            yaw: geometry::wrap_angle(yaw),
            extent: vec3(extent),
        };
        b.validate().map_err(value_error)?;
        Ok(Self(b))
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        arr3(&self.0.center)
    }

    #[getter]
    fn yaw(&self) -> f64 {
        self.0.yaw
    }

    #[getter]
    fn extent(&self) -> [f64; 3] {
        arr3(&self.0.extent)
    }

    fn volume(&self) -> f64 {
        self.0.volume()
    }

    fn contains(&self, point: [f64; 3]) -> bool {
        self.0.contains(&vec3(point))
    }

    fn __repr__(&self) -> String {
        format!(
            "OrientedBox(center={:?}, yaw={}, extent={:?})",
            self.center(),
            self.0.yaw,
            self.extent()
        )
    }
}

#[pyclass(name = "Detection", from_py_object, module = "coopfuse")]
#[derive(Clone, Copy)]
struct PyDetection(fusion::Detection);

#[pymethods]
impl PyDetection {
    #[new]
    fn new(bbox: PyBox, confidence: f64) -> PyResult<Self> {
        let d = fusion::Detection::new(bbox.0, confidence);
        d.validate().map_err(value_error)?;
        Ok(Self(d))
    }

    #[getter(r#box)]
    fn bbox(&self) -> PyBox {
        PyBox(self.0.bbox)
    }

    #[getter]
    fn confidence(&self) -> f64 {
        self.0.confidence
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection({}, confidence={})",
            PyBox(self.0.bbox).__repr__(),
            self.0.confidence
        )
    }
}

/// Rigid transform `p -> R p + t`.
#[pyclass(name = "RigidTransform", from_py_object, module = "coopfuse")]
#[derive(Clone, Copy)]
struct PyTransform(geometry::RigidTransform);

#[pymethods]
impl PyTransform {
    #[new]
    #[pyo3(signature = (rotation = None, translation = [0.0, 0.0, 0.0]))]
    fn new(rotation: Option<[[f64; 3]; 3]>, translation: [f64; 3]) -> PyResult<Self> {
        let r = rotation.map_or_else(Matrix3::identity, matrix);
        geometry::RigidTransform::new(r, vec3(translation))
            .map(Self)
            .map_err(value_error)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(geometry::RigidTransform::identity())
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        rows(&self.0.rotation)
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        arr3(&self.0.translation)
    }

    fn apply_point(&self, point: [f64; 3]) -> [f64; 3] {
        arr3(&self.0.apply_point(&vec3(point)))
    }

    fn apply(&self, bbox: PyBox) -> PyBox {
        PyBox(self.0.apply(&bbox.0))
    }

    /// `self ∘ inner`.
    fn after(&self, inner: PyTransform) -> Self {
        Self(self.0.after(&inner.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn __repr__(&self) -> String {
        format!(
            "RigidTransform(rotation={:?}, translation={:?})",
            self.rotation(),
            self.translation()
        )
    }
}

/// Synthetic world: ground-truth boxes plus both vehicles' true poses.
#[pyclass(name = "Scene", skip_from_py_object, module = "coopfuse")]
#[derive(Clone)]
struct PyScene(scenario::Scene);

#[pymethods]
impl PyScene {
    #[getter]
    fn objects(&self) -> Vec<PyBox> {
        self.0.objects.iter().copied().map(PyBox).collect()
    }

    #[getter]
    fn ego_pose(&self) -> PyPose {
        PyPose(self.0.ego_pose)
    }

    #[getter]
    fn cav_pose(&self) -> PyPose {
        PyPose(self.0.cav_pose)
    }

    fn to_json(&self) -> String {
        io::scene_to_json(&self.0)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::scene_from_json(text).map(Self).map_err(value_error)
    }

    fn __len__(&self) -> usize {
        self.0.objects.len()
    }
}

fn boxes(items: &[PyBox]) -> Vec<geometry::OrientedBox> {
    items.iter().map(|b| b.0).collect()
}

fn detections(items: &[PyDetection]) -> Vec<fusion::Detection> {
    items.iter().map(|d| d.0).collect()
}

#[pyfunction]
fn rotation_from_euler(angles: [f64; 3]) -> [[f64; 3]; 3] {
    rows(&geometry::rotation_from_euler(&vec3(angles)))
}

#[pyfunction]
fn log_rotation(rotation: [[f64; 3]; 3]) -> f64 {
    geometry::log_rotation(&matrix(rotation))
}

/// Transform taking CAV-frame coordinates to the Ego frame.
#[pyfunction]
fn relative_transform(ego: PyPose, cav: PyPose) -> PyTransform {
    PyTransform(geometry::relative_transform(&ego.0, &cav.0))
}

#[pyfunction]
fn box_iou_3d(a: PyBox, b: PyBox) -> f64 {
    geometry::box_iou_3d(&a.0, &b.0)
}

/// Optimal-transport association of two box lists in a common frame.
#[pyfunction]
#[pyo3(signature = (ego_boxes, cav_boxes, epsilon = 0.1, iterations = 2000, dustbin_cost = 10.0))]
fn associate<'py>(
    py: Python<'py>,
    ego_boxes: Vec<PyBox>,
    cav_boxes: Vec<PyBox>,
    epsilon: f64,
    iterations: usize,
    dustbin_cost: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = AssociationConfig {
        epsilon,
        iterations,
        dustbin_cost,
    };
    let out = association::associate(&boxes(&ego_boxes), &boxes(&cav_boxes), &config).map_err(value_error)?;
    let plan = &out.result.transport_plan;
    let plan_rows: Vec<Vec<f64>> = (0..plan.nrows())
        .map(|r| plan.row(r).iter().copied().collect())
        .collect();
    let dict = PyDict::new(py);
    dict.set_item("pairs", out.result.pairs)?;
    dict.set_item("unmatched_ego", out.result.unmatched_ego)?;
    dict.set_item("unmatched_cav", out.result.unmatched_cav)?;
    dict.set_item("transport_plan", plan_rows)?;
    dict.set_item("converged", out.converged)?;
    dict.set_item("marginal_residual", out.marginal_residual)?;
    Ok(dict)
}

/// RANSAC + SVD estimate of the transform mapping `cav_points` onto `ego_points`.
#[pyfunction]
#[pyo3(signature = (ego_points, cav_points, rounds = 50, subset_size = 3, inlier_threshold = 0.25, seed = 0, refit = true))]
#[allow(clippy::too_many_arguments)]
fn estimate_correction<'py>(
    py: Python<'py>,
    ego_points: Vec<[f64; 3]>,
    cav_points: Vec<[f64; 3]>,
    rounds: usize,
    subset_size: usize,
    inlier_threshold: f64,
    seed: u64,
    refit: bool,
) -> PyResult<Bound<'py, PyDict>> {
    if ego_points.len() != cav_points.len() {
        return Err(value_error("ego_points and cav_points must have equal length"));
    }
    let set = MatchedSet::new(
        ego_points
            .into_iter()
            .zip(cav_points)
            .map(|(e, c)| (vec3(e), vec3(c)))
            .collect(),
    );
    let config = RansacConfig {
        rounds,
        subset_size,
        inlier_threshold,
        seed,
        refit,
        ..RansacConfig::default()
    };
    let out = registration::estimate_correction(&set, &config).map_err(value_error)?;
    let dict = PyDict::new(py);
    dict.set_item("correction", PyTransform(out.correction))?;
    dict.set_item("inlier_ratio", out.inlier_ratio)?;
    dict.set_item("inliers", out.inliers)?;
    dict.set_item("rounds_run", out.rounds_run)?;
    dict.set_item("winning_round", out.winning_round)?;
    dict.set_item("refit_applied", out.refit_applied)?;
    Ok(dict)
}

#[pyfunction]
#[pyo3(signature = (detections, iou_threshold = 0.15))]
fn nms(detections: Vec<PyDetection>, iou_threshold: f64) -> Vec<PyDetection> {
    fusion::nms(&self::detections(&detections), iou_threshold)
        .into_iter()
        .map(PyDetection)
        .collect()
}

/// Fuses one frame of Ego and CAV detections (each in its own frame).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (ego_pose, cav_pose, ego_detections, cav_detections, correction_enabled = true, nms_iou_threshold = 0.15, seed = 0))]
fn fuse_frame<'py>(
    py: Python<'py>,
    ego_pose: PyPose,
    cav_pose: PyPose,
    ego_detections: Vec<PyDetection>,
    cav_detections: Vec<PyDetection>,
    correction_enabled: bool,
    nms_iou_threshold: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = PipelineConfig {
        correction_enabled,
        nms_iou_threshold,
        ..PipelineConfig::default()
    };
    config.registration.seed = seed;
    let out = fusion::fuse_frame(
        &ego_pose.0,
        &cav_pose.0,
        &detections(&ego_detections),
        &detections(&cav_detections),
        &config,
    )
    .map_err(value_error)?;
    let mode = match out.mode {
        fusion::CooperativeMode::SingleVehicle => "single-vehicle",
        fusion::CooperativeMode::UncorrectedCooperative => "uncorrected-cooperative",
        fusion::CooperativeMode::CorrectedCooperative => "corrected-cooperative",
    };
    let dict = PyDict::new(py);
    dict.set_item("objects", out.objects.into_iter().map(PyDetection).collect::<Vec<_>>())?;
    dict.set_item("applied_transform", PyTransform(out.applied_transform))?;
    dict.set_item("pose_transform", PyTransform(out.pose_transform))?;
    dict.set_item("correction_applied", out.correction_applied)?;
    dict.set_item("mode", mode)?;
    dict.set_item("pairs", out.association.pairs)?;
    dict.set_item("inlier_ratio", out.registration.map(|r| r.inlier_ratio))?;
    Ok(dict)
}

#[pyfunction]
#[pyo3(signature = (n_objects = 20, layout = "lane", seed = 0))]
fn generate_scene(n_objects: usize, layout: &str, seed: u64) -> PyResult<PyScene> {
    let layout: Layout = layout.parse().map_err(value_error)?;
    scenario::generate_scene(n_objects, layout, seed)
        .map(PyScene)
        .map_err(value_error)
}

/// Detections of `scene` seen from `observer`, in the observer's frame.
#[pyfunction]
#[pyo3(signature = (scene, observer, seed = 0, ideal = false))]
fn observe(scene: &PyScene, observer: PyPose, seed: u64, ideal: bool) -> Vec<PyDetection> {
    let sensor = if ideal {
        let d = SensorSpec::default();
        SensorSpec::ideal(d.range, d.fov)
    } else {
        SensorSpec::default()
    };
    scenario::observe(&scene.0, &observer.0, &sensor, &mut rng::stream(seed, "observe", 0))
        .into_iter()
        .map(PyDetection)
        .collect()
}

/// Gaussian position (m) and heading (deg) noise on a pose.
#[pyfunction]
#[pyo3(signature = (pose, sigma_p_m, sigma_phi_deg, seed = 0))]
fn perturb_pose(pose: PyPose, sigma_p_m: f64, sigma_phi_deg: f64, seed: u64) -> PyResult<PyPose> {
    let spec = NoiseSpec {
        sigma_p: sigma_p_m,
        sigma_phi: sigma_phi_deg.to_radians(),
        seed,
    };
    spec.validate().map_err(value_error)?;
    Ok(PyPose(scenario::perturb_pose(
        &pose.0,
        &spec,
        &mut rng::stream(seed, "pose-noise", 0),
    )))
}

/// (RRE in radians, RTE in meters) of `estimate` against `truth`.
#[pyfunction]
fn transform_error(truth: PyTransform, estimate: PyTransform) -> (f64, f64) {
    let e = metrics::TransformError::between(&truth.0, &estimate.0);
    (e.rre, e.rte)
}

/// Link rate in bits per second.
#[pyfunction]
fn bandwidth(frame_rate: f64, items_per_frame: f64, dims_per_item: f64, bits_per_dim: f64) -> PyResult<f64> {
    metrics::bandwidth(&BandwidthSpec {
        frame_rate,
        items_per_frame,
        dims_per_item,
        bits_per_dim,
    })
    .map_err(value_error)
}

/// Robustness sweep; returns one dict per (method, noise cell).
#[pyfunction]
#[pyo3(signature = (trials = 50, seed = 0, sigma_p_grid_m = None, sigma_phi_grid_deg = None, methods = None))]
fn run_sweep<'py>(
    py: Python<'py>,
    trials: usize,
    seed: u64,
    sigma_p_grid_m: Option<Vec<f64>>,
    sigma_phi_grid_deg: Option<Vec<f64>>,
    methods: Option<Vec<String>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let defaults = SweepConfig::default();
    let methods = match methods {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Method>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_error)?,
        None => defaults.methods.clone(),
    };
    let config = SweepConfig {
        trials_per_cell: trials,
        seed,
        sigma_p_grid: sigma_p_grid_m.unwrap_or(defaults.sigma_p_grid.clone()),
        sigma_phi_grid_deg: sigma_phi_grid_deg.unwrap_or(defaults.sigma_phi_grid_deg.clone()),
        methods,
        ..defaults
    };
    let records = py.detach(|| experiment::run_sweep(&config)).map_err(value_error)?;
    records
        .into_iter()
        .map(|r| {
            let dict = PyDict::new(py);
            dict.set_item("method", r.method.name())?;
            dict.set_item("sigma_p_m", r.sigma_p)?;
            dict.set_item("sigma_phi_deg", r.sigma_phi_deg)?;
            dict.set_item("ap", r.ap)?;
            dict.set_item("mean_rre_deg", r.mean_rre.to_degrees())?;
            dict.set_item("mean_rte_m", r.mean_rte)?;
            dict.set_item("mean_inlier_ratio", r.mean_inlier_ratio)?;
            dict.set_item("trials", r.trials)?;
            Ok(dict)
        })
        .collect()
}

#[pymodule]
fn coopfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyTransform>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(rotation_from_euler, m)?)?;
    m.add_function(wrap_pyfunction!(log_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(relative_transform, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou_3d, m)?)?;
    m.add_function(wrap_pyfunction!(associate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_correction, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_frame, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(observe, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_pose, m)?)?;
    m.add_function(wrap_pyfunction!(transform_error, m)?)?;
    m.add_function(wrap_pyfunction!(bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    Ok(())
}
