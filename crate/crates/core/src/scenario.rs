//! Synthetic ground truth standing in for a LiDAR detector: scenes of
//! vehicle-sized boxes, per-observer detections, and noisy CAV poses.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Detection;
use crate::geometry::{wrap_angle, OrientedBox, Pose, RigidTransform};
use crate::rng;

pub const MIN_SEPARATION: f64 = 6.0;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

const LENGTH_RANGE: (f64, f64) = (3.5, 5.5);
const WIDTH_RANGE: (f64, f64) = (1.6, 2.2);
const HEIGHT_RANGE: (f64, f64) = (1.4, 1.9);

const LANE_HALF_LENGTH: f64 = 70.0;
const LANE_WIDTH: f64 = 3.5;
const LANE_CENTERS: [f64; 4] = [-5.25, -1.75, 1.75, 5.25];
const UNIFORM_HALF_SIZE: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("could not place {requested} objects with {min_separation} m separation within {attempts} attempts (placed {placed})")]
    PlacementFailure {
        requested: usize,
        placed: usize,
        attempts: usize,
        min_separation: f64,
    },
    #[error("invalid noise spec: {0}")]
    InvalidNoise(&'static str),
    #[error("invalid sensor spec: {0}")]
    InvalidSensor(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Four-lane two-way road along x; Ego and CAV drive towards each other.
    Lane,
    /// Objects anywhere in a square with random headings.
    Uniform,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lane" => Ok(Layout::Lane),
            "uniform" => Ok(Layout::Uniform),
            other => Err(format!("unknown layout `{other}` (expected lane or uniform)")),
        }
    }
}

/// Axis-aligned ground-plane extent of a scene, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Ground-truth boxes in the world frame.
    pub objects: Vec<OrientedBox>,
    pub ego_pose: Pose,
    pub cav_pose: Pose,
    pub bounds: Bounds,
}

/// Gaussian pose noise: `σ_p` on x, y, z and `σ_φ` on yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Meters.
    pub sigma_p: f64,
    /// Radians.
    pub sigma_phi: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return Err(ScenarioError::InvalidNoise("sigma_p must be >= 0"));
        }
        if !(self.sigma_phi >= 0.0 && self.sigma_phi.is_finite()) {
            return Err(ScenarioError::InvalidNoise("sigma_phi must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSpec {
    /// Horizontal range, meters.
    pub range: f64,
    /// Full angular width, radians.
    pub fov: f64,
    pub miss_rate: f64,
    /// Meters, per axis.
    pub center_jitter_sigma: f64,
    /// Radians.
    pub yaw_jitter_sigma: f64,
    /// Expected spurious boxes per frame.
    pub false_positive_rate: f64,
    pub true_confidence: [f64; 2],
    pub false_confidence: [f64; 2],
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            range: 50.0,
            fov: 2.0 * PI,
            miss_rate: 0.1,
            center_jitter_sigma: 0.05,
            yaw_jitter_sigma: 0.5f64.to_radians(),
            false_positive_rate: 0.5,
            true_confidence: [0.5, 1.0],
            false_confidence: [0.3, 0.7],
        }
    }
}

impl SensorSpec {
    /// Noise-free sensor: no misses, no jitter, no false positives.
    pub fn ideal(range: f64, fov: f64) -> Self {
        Self {
            range,
            fov,
            miss_rate: 0.0,
            center_jitter_sigma: 0.0,
            yaw_jitter_sigma: 0.0,
            false_positive_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.range > 0.0) {
            return Err(ScenarioError::InvalidSensor("range must be > 0"));
        }
        if !(self.fov > 0.0) {
            return Err(ScenarioError::InvalidSensor("fov must be > 0"));
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return Err(ScenarioError::InvalidSensor("miss_rate must lie in [0, 1)"));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(ScenarioError::InvalidSensor("false_positive_rate must be >= 0"));
        }
        if !(self.center_jitter_sigma >= 0.0 && self.yaw_jitter_sigma >= 0.0) {
            return Err(ScenarioError::InvalidSensor("jitters must be >= 0"));
        }
        for range in [self.true_confidence, self.false_confidence] {
            if !(0.0 <= range[0] && range[0] <= range[1] && range[1] <= 1.0) {
                return Err(ScenarioError::InvalidSensor("confidence ranges must lie within [0, 1]"));
            }
        }
        Ok(())
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

fn vehicle_extent<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(
        uniform_in(rng, LENGTH_RANGE),
        uniform_in(rng, WIDTH_RANGE),
        uniform_in(rng, HEIGHT_RANGE),
    )
}

fn far_enough(x: f64, y: f64, taken: &[(f64, f64)]) -> bool {
    taken.iter().all(|&(u, v)| (x - u).hypot(y - v) >= MIN_SEPARATION)
}

/// Deterministic scene for `(n_objects, layout, seed)`.
///
/// Objects keep at least [`MIN_SEPARATION`] meters between centers and from
/// both vehicles. Boxes rest on the ground plane `z = 0`.
pub fn generate_scene(n_objects: usize, layout: Layout, seed: u64) -> Result<Scene, ScenarioError> {
    let mut rng = rng::stream(seed, "scene", 0);
    let (ego_pose, cav_pose, bounds) = match layout {
        Layout::Lane => (
            Pose::planar(-15.0 + rng.random_range(-3.0..=3.0), LANE_CENTERS[1], 0.0, 0.0),
            Pose::planar(15.0 + rng.random_range(-3.0..=3.0), LANE_CENTERS[2], 0.0, PI),
            Bounds {
                min: [-LANE_HALF_LENGTH, -2.0 * LANE_WIDTH],
                max: [LANE_HALF_LENGTH, 2.0 * LANE_WIDTH],
            },
        ),
        Layout::Uniform => (
            Pose::planar(
                -10.0 + rng.random_range(-2.0..=2.0),
                rng.random_range(-2.0..=2.0),
                0.0,
                rng.random_range(-PI..PI),
            ),
            Pose::planar(
                10.0 + rng.random_range(-2.0..=2.0),
                rng.random_range(-2.0..=2.0),
                0.0,
                rng.random_range(-PI..PI),
            ),
            Bounds {
                min: [-UNIFORM_HALF_SIZE, -UNIFORM_HALF_SIZE],
                max: [UNIFORM_HALF_SIZE, UNIFORM_HALF_SIZE],
            },
        ),
    };
    let mut taken = vec![
        (ego_pose.position.x, ego_pose.position.y),
        (cav_pose.position.x, cav_pose.position.y),
    ];
    let mut objects = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while objects.len() < n_objects {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(ScenarioError::PlacementFailure {
                requested: n_objects,
                placed: objects.len(),
                attempts,
                min_separation: MIN_SEPARATION,
            });
        }
        attempts += 1;
        let (x, y, yaw) = match layout {
            Layout::Lane => {
                let lane = rng.random_range(0..LANE_CENTERS.len());
                let heading = if LANE_CENTERS[lane] < 0.0 { 0.0 } else { PI };
                (
                    rng.random_range(-(LANE_HALF_LENGTH - 2.0)..=(LANE_HALF_LENGTH - 2.0)),
                    LANE_CENTERS[lane] + rng.random_range(-0.3..=0.3),
                    heading + rng.random_range(-0.05..=0.05),
                )
            }
            Layout::Uniform => (
                rng.random_range(bounds.min[0] + 3.0..=bounds.max[0] - 3.0),
                rng.random_range(bounds.min[1] + 3.0..=bounds.max[1] - 3.0),
                rng.random_range(-PI..PI),
            ),
        };
        let extent = vehicle_extent(&mut rng);
        if !far_enough(x, y, &taken) {
            continue;
        }
        taken.push((x, y));
        objects.push(OrientedBox::new(Vector3::new(x, y, 0.5 * extent.z), yaw, extent));
    }
    Ok(Scene {
        objects,
        ego_pose,
        cav_pose,
        bounds,
    })
}

/// Adds zero-mean Gaussian noise to x, y, z (`σ_p`) and yaw (`σ_φ`).
/// Pitch and roll are untouched. Four normals are always drawn so streams
/// stay aligned across noise levels.
pub fn perturb_pose<R: Rng + ?Sized>(pose: &Pose, spec: &NoiseSpec, stream: &mut R) -> Pose {
    let draws: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(stream));
    let mut position = pose.position;
    position.x += spec.sigma_p * draws[0];
    position.y += spec.sigma_p * draws[1];
    position.z += spec.sigma_p * draws[2];
    let mut angles = pose.angles;
    angles.z = wrap_angle(angles.z + spec.sigma_phi * draws[3]);
    Pose { position, angles }
}

/// Whether a point in the observer's local frame lies in range and FOV.
pub fn in_view(local: &Vector3<f64>, sensor: &SensorSpec) -> bool {
    if local.x.hypot(local.y) > sensor.range {
        return false;
    }
    if sensor.fov >= 2.0 * PI {
        return true;
    }
    local.y.atan2(local.x).abs() <= 0.5 * sensor.fov
}

/// Indices of scene objects inside the observer's range and FOV.
pub fn visible_objects(scene: &Scene, observer: &Pose, sensor: &SensorSpec) -> Vec<usize> {
    let world_to_local = observer.local_to_world().inverse();
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, obj)| in_view(&world_to_local.apply_point(&obj.center), sensor))
        .map(|(idx, _)| idx)
        .collect()
}

/// Ground-truth box re-expressed in the observer's local frame.
pub fn to_local(observer: &Pose, obj: &OrientedBox) -> OrientedBox {
    observer.local_to_world().inverse().apply(obj)
}

/// Simulated detector output for one observer, in its local frame.
///
/// Visible objects survive a Bernoulli miss test, get Gaussian center and
/// yaw jitter and a uniform confidence. Then a Poisson number of spurious
/// boxes is scattered inside the field of view.
pub fn observe<R: Rng + ?Sized>(scene: &Scene, observer: &Pose, sensor: &SensorSpec, stream: &mut R) -> Vec<Detection> {
    let world_to_local: RigidTransform = observer.local_to_world().inverse();
    let mut detections = Vec::new();
    for obj in &scene.objects {
        let local = world_to_local.apply(obj);
        if !in_view(&local.center, sensor) {
            continue;
        }
        let missed = stream.random::<f64>() < sensor.miss_rate;
        let jitter: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(stream));
        let confidence = uniform_in(stream, (sensor.true_confidence[0], sensor.true_confidence[1]));
        if missed {
            continue;
        }
        let center = local.center + Vector3::new(jitter[0], jitter[1], jitter[2]) * sensor.center_jitter_sigma;
        let yaw = local.yaw + jitter[3] * sensor.yaw_jitter_sigma;
        detections.push(Detection::new(OrientedBox::new(center, yaw, local.extent), confidence));
    }

    if sensor.false_positive_rate > 0.0 {
        let count = Poisson::new(sensor.false_positive_rate)
            .map(|p| p.sample(stream) as usize)
            .unwrap_or(0);
        let half_fov = 0.5 * sensor.fov.min(2.0 * PI);
        let near = 3.0f64.min(sensor.range);
        for _ in 0..count {
            // Area-uniform over the annular sector.
            let radius = area_uniform_radius(stream, near, sensor.range);
            let bearing = stream.random_range(-half_fov..=half_fov);
            let extent = vehicle_extent(stream);
            let center = Vector3::new(
                radius * bearing.cos(),
                radius * bearing.sin(),
                0.5 * extent.z - observer.position.z,
            );
            let yaw = stream.random_range(-PI..PI);
            let confidence = uniform_in(stream, (sensor.false_confidence[0], sensor.false_confidence[1]));
            detections.push(Detection::new(OrientedBox::new(center, yaw, extent), confidence));
        }
    }
    detections
}

fn area_uniform_radius<R: Rng + ?Sized>(stream: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = stream.random();
    (lo * lo + u * (hi * hi - lo * lo)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn empty_scene_is_valid() {
        let scene = generate_scene(0, Layout::Lane, 1).unwrap();
        assert!(scene.objects.is_empty());
        assert!(scene.ego_pose.validate().is_ok());
        assert!(scene.cav_pose.validate().is_ok());
    }

    #[test]
    fn scene_is_deterministic() {
        let a = generate_scene(20, Layout::Lane, 7).unwrap();
        let b = generate_scene(20, Layout::Lane, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(20, Layout::Lane, 8).unwrap());
    }

    #[test]
    fn uniform_scene_respects_separation_and_bounds() {
        let scene = generate_scene(20, Layout::Uniform, 3).unwrap();
        assert_eq!(scene.objects.len(), 20);
        for (i, a) in scene.objects.iter().enumerate() {
            assert!(scene.bounds.contains(a.center.x, a.center.y));
            assert!(a.validate().is_ok());
            for b in &scene.objects[i + 1..] {
                assert!((a.center.xy() - b.center.xy()).norm() >= MIN_SEPARATION);
            }
        }
    }

    #[test]
    fn overfull_scene_fails_placement() {
        assert!(matches!(
            generate_scene(500, Layout::Lane, 1),
            Err(ScenarioError::PlacementFailure { requested: 500, .. })
        ));
    }

    #[test]
    fn zero_noise_leaves_pose_unchanged() {
        let pose = Pose::planar(1.0, 2.0, 0.3, 0.4);
        let spec = NoiseSpec {
            sigma_p: 0.0,
            sigma_phi: 0.0,
            seed: 0,
        };
        let mut s = rng::stream(0, "noise", 0);
        assert_eq!(perturb_pose(&pose, &spec, &mut s), pose);
    }

    #[test]
    fn object_straight_ahead_is_detected_exactly() {
        let scene = Scene {
            objects: vec![OrientedBox::new(
                Vector3::new(1.0, 0.0, 0.0),
                0.0,
                Vector3::new(4.0, 2.0, 1.5),
            )],
            ego_pose: Pose::planar(0.0, 0.0, 0.0, 0.0),
            cav_pose: Pose::planar(50.0, 0.0, 0.0, 0.0),
            bounds: Bounds {
                min: [-10.0, -10.0],
                max: [10.0, 10.0],
            },
        };
        let sensor = SensorSpec::ideal(50.0, 2.0 * PI);
        let dets = observe(&scene, &scene.ego_pose, &sensor, &mut rng::stream(0, "obs", 0));
        assert_eq!(dets.len(), 1);
        assert_abs_diff_eq!(dets[0].bbox.center, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_eq!(dets[0].bbox.extent, Vector3::new(4.0, 2.0, 1.5));
        assert!((0.5..=1.0).contains(&dets[0].confidence));

        let behind = Scene {
            objects: vec![OrientedBox::new(
                Vector3::new(-5.0, 0.0, 0.0),
                0.0,
                Vector3::new(4.0, 2.0, 1.5),
            )],
            ..scene
        };
        let front_only = SensorSpec::ideal(50.0, PI);
        assert!(observe(&behind, &behind.ego_pose, &front_only, &mut rng::stream(0, "obs", 0)).is_empty());
    }

    #[test]
    fn false_positives_have_low_confidence() {
        let scene = generate_scene(0, Layout::Lane, 2).unwrap();
        let sensor = SensorSpec {
            false_positive_rate: 5.0,
            fov: PI / 2.0,
            ..SensorSpec::default()
        };
        let mut s = rng::stream(2, "obs", 0);
        let mut seen = 0;
        for _ in 0..50 {
            for d in observe(&scene, &scene.ego_pose, &sensor, &mut s) {
                seen += 1;
                assert!((0.3..=0.7).contains(&d.confidence));
                assert!(in_view(&d.bbox.center, &sensor));
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn spec_validation() {
        assert!(SensorSpec::default().validate().is_ok());
        let bad = SensorSpec {
            miss_rate: 1.0,
            ..SensorSpec::default()
        };
        assert!(bad.validate().is_err());
        let noise = NoiseSpec {
            sigma_p: -1.0,
            sigma_phi: 0.0,
            seed: 0,
        };
        assert!(noise.validate().is_err());
    }
}
