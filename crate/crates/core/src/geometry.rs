//! Rigid-body vocabulary shared by every other module: poses, SE(3)
//! transforms, gravity-aligned oriented boxes and rotated-box IoU.
//!
//! Euler angles follow the fixed `R = Rx(pitch) · Ry(roll) · Rz(yaw)`
//! product order. All angles are radians and wrapped to `(-π, π]`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{field}: value is not finite")]
    NonFinite { field: &'static str },
    #[error("{field}: angle {value} lies outside (-pi, pi]")]
    AngleOutOfRange { field: &'static str, value: f64 },
    #[error("extent: all components must be > 0, got [{0}, {1}, {2}]")]
    NonPositiveExtent(f64, f64, f64),
    #[error("rotation: matrix is not a proper rotation (orthonormality error {orthonormality:e}, det {det})")]
    NotARotation { orthonormality: f64, det: f64 },
}

fn check_angle<'a>(field: &'static str, angles: impl IntoIterator<Item = &'a f64>) -> Result<(), GeometryError> {
    match angles.into_iter().find(|&&a| !(a > -PI && a <= PI)) {
        Some(&value) => Err(GeometryError::AngleOutOfRange { field, value }),
        None => Ok(()),
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut wrapped = angle - two_pi * ((angle + PI) / two_pi).floor();
    if wrapped <= -PI {
        wrapped += two_pi;
    }
    if wrapped > PI {
        wrapped -= two_pi;
    }
    wrapped
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation for `(pitch, roll, yaw)`, composed as `Rx(pitch) · Ry(roll) · Rz(yaw)`.
pub fn rotation_from_euler(angles: &Vector3<f64>) -> Matrix3<f64> {
    rot_x(angles.x) * rot_y(angles.y) * rot_z(angles.z)
}

/// Heading of the rotated x axis projected on the ground plane.
pub fn yaw_of(rotation: &Matrix3<f64>) -> f64 {
    rotation[(1, 0)].atan2(rotation[(0, 0)])
}

/// Rotation angle `‖r‖` of `R = exp([r]×)`, from the trace.
pub fn log_rotation(rotation: &Matrix3<f64>) -> f64 {
    (0.5 * rotation.trace() - 0.5).clamp(-1.0, 1.0).acos()
}

/// 6-DoF vehicle state in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Meters, world frame.
    pub position: Vector3<f64>,
    /// Radians: pitch, roll, yaw.
    pub angles: Vector3<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, angles: Vector3<f64>) -> Self {
        Self {
            position,
            angles: angles.map(wrap_angle),
        }
    }

    /// Ground-plane pose: position plus heading only.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(Vector3::new(x, y, z), Vector3::new(0.0, 0.0, yaw))
    }

    pub fn yaw(&self) -> f64 {
        self.angles.z
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(&self.angles)
    }

    /// Transform taking points in this pose's local frame to the world frame.
    pub fn local_to_world(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation(),
            translation: self.position,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite { field: "position" });
        }
        if !self.angles.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite { field: "angles" });
        }
        check_angle("angles", &self.angles)
    }
}

/// Element of SE(3): `p ↦ rotation · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking `RᵀR = I` and `det R = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let transform = Self { rotation, translation };
        transform.validate()?;
        Ok(transform)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite { field: "translation" });
        }
        let orthonormality = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        let det = self.rotation.determinant();
        if !(orthonormality <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(GeometryError::NotARotation { orthonormality, det });
        }
        Ok(())
    }

    pub fn apply_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Moves a box: the center is transformed and the heading picks up the
    /// yaw component of the rotation. The extent is unchanged.
    pub fn apply(&self, obb: &OrientedBox) -> OrientedBox {
        OrientedBox {
            center: self.apply_point(&obb.center),
            yaw: wrap_angle(obb.yaw + yaw_of(&self.rotation)),
            extent: obb.extent,
        }
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn after(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.transpose();
        RigidTransform {
            rotation,
            translation: -(rotation * self.translation),
        }
    }
}

/// Composition applying `first`, then `second`.
pub fn compose(second: &RigidTransform, first: &RigidTransform) -> RigidTransform {
    second.after(first)
}

/// Transform taking CAV-local coordinates into the Ego frame.
///
/// The rotation is built from the Euler-angle differences, which equals
/// `R_egoᵀ·R_cav` when both poses share pitch and roll. The translation
/// `p_cav − p_ego` is rotated into the Ego frame by `R_egoᵀ`, so boxes land
/// in Ego coordinates whatever the Ego heading.
pub fn relative_transform(ego: &Pose, cav: &Pose) -> RigidTransform {
    let delta = (cav.angles - ego.angles).map(wrap_angle);
    RigidTransform {
        rotation: rotation_from_euler(&delta),
        translation: ego.rotation().transpose() * (cav.position - ego.position),
    }
}

/// Gravity-aligned 3D box: heading about +z only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    /// Meters.
    pub center: Vector3<f64>,
    /// Radians.
    pub yaw: f64,
    /// Length (along heading), width, height in meters.
    pub extent: Vector3<f64>,
}

impl OrientedBox {
    pub fn new(center: Vector3<f64>, yaw: f64, extent: Vector3<f64>) -> Self {
        debug_assert!(extent.iter().all(|&e| e > 0.0), "box extent must be positive");
        Self {
            center,
            yaw: wrap_angle(yaw),
            extent,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite { field: "center" });
        }
        if !self.yaw.is_finite() {
            return Err(GeometryError::NonFinite { field: "yaw" });
        }
        check_angle("yaw", &[self.yaw])?;
        if !self.extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(GeometryError::NonPositiveExtent(
                self.extent.x,
                self.extent.y,
                self.extent.z,
            ));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.extent.x * self.extent.y * self.extent.z
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.extent.x;
        let hw = 0.5 * self.extent.y;
        let center = Vector2::new(self.center.x, self.center.y);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(dx, dy)| center + Vector2::new(c * dx - s * dy, s * dx + c * dy))
    }

    fn z_range(&self) -> (f64, f64) {
        let half = 0.5 * self.extent.z;
        (self.center.z - half, self.center.z + half)
    }

    /// Whether a world point lies inside the box (boundary inclusive).
    pub fn contains(&self, point: &Vector3<f64>) -> bool {
        let d = point - self.center;
        let (s, c) = self.yaw.sin_cos();
        let along = c * d.x + s * d.y;
        let across = -s * d.x + c * d.y;
        along.abs() <= 0.5 * self.extent.x && across.abs() <= 0.5 * self.extent.y && d.z.abs() <= 0.5 * self.extent.z
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let lhs = [
            self.center.x,
            self.center.y,
            self.center.z,
            self.yaw,
            self.extent.x,
            self.extent.y,
            self.extent.z,
        ];
        let rhs = [
            other.center.x,
            other.center.y,
            other.center.z,
            other.yaw,
            other.extent.x,
            other.extent.y,
            other.extent.z,
        ];
        lhs.iter()
            .zip(rhs.iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(polygon: &[Vector2<f64>]) -> f64 {
    let n = polygon.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let p = polygon[i];
            let q = polygon[(i + 1) % n];
            p.x * q.y - q.x * p.y
        })
        .sum();
    0.5 * twice
}

/// Sutherland–Hodgman clipping of `subject` against the convex,
/// counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut output: Vec<Vector2<f64>> = subject.to_vec();
    for k in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[k];
        let b = clip[(k + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for i in 0..input.len() {
            let current = input[i];
            let previous = input[(i + input.len() - 1) % input.len()];
            let current_in = cross(&a, &b, &current) >= 0.0;
            let previous_in = cross(&a, &b, &previous) >= 0.0;
            if current_in {
                if !previous_in {
                    output.push(segment_line_intersection(&previous, &current, &a, &b));
                }
                output.push(current);
            } else if previous_in {
                output.push(segment_line_intersection(&previous, &current, &a, &b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: &Vector2<f64>, q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return *q;
    }
    let t = dp / denom;
    p + (q - p) * t
}

/// Ground-plane intersection area of two box footprints.
pub fn bev_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let clipped = clip_convex(&a.footprint(), &b.footprint());
    polygon_area(&clipped).max(0.0)
}

/// 3D IoU of two gravity-aligned boxes: footprint intersection times
/// vertical overlap, over the union volume.
pub fn box_iou_3d(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Evaluate in a fixed argument order so the result is bit-symmetric.
    let (a, b) = if a.canonical_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let (a_lo, a_hi) = a.z_range();
    let (b_lo, b_hi) = b.z_range();
    let overlap_z = a_hi.min(b_hi) - a_lo.max(b_lo);
    if overlap_z <= 0.0 {
        return 0.0;
    }
    let reach = 0.5 * (a.extent.x.hypot(a.extent.y) + b.extent.x.hypot(b.extent.y));
    if (a.center.x - b.center.x).hypot(a.center.y - b.center.y) > reach {
        return 0.0;
    }
    let intersection = bev_intersection_area(a, b) * overlap_z;
    let union = a.volume() + b.volume() - intersection;
    if union <= 0.0 {
        return 0.0;
    }
    (intersection / union).clamp(0.0, 1.0)
}
