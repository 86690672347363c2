//! Frame-level cooperative fusion.
//!
//! 1. Noisy poses give the first transform `F1` and the CAV boxes move into
//!    the Ego frame.
//! 2. Ego and transformed CAV boxes are associated.
//! 3. With enough pairs, a correction `F2` is estimated and applied.
//! 4. The union of both detection sets is de-duplicated with greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{self, AssignmentResult, AssociationConfig, AssociationError};
use crate::geometry::{box_iou_3d, relative_transform, OrientedBox, Pose, RigidTransform};
use crate::registration::{self, MatchedSet, RansacConfig, RegistrationResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("nms_iou_threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("confidence must lie in [0, 1], got {0}")]
    InvalidConfidence(f64),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    Registration(#[from] registration::RegistrationError),
}

/// A detected box with its classification confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: OrientedBox, confidence: f64) -> Self {
        Self { bbox, confidence }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(FusionError::InvalidConfidence(self.confidence));
        }
        Ok(())
    }

    pub fn transformed(&self, transform: &RigidTransform) -> Self {
        Self {
            bbox: transform.apply(&self.bbox),
            confidence: self.confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CooperativeMode {
    SingleVehicle,
    UncorrectedCooperative,
    CorrectedCooperative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub nms_iou_threshold: f64,
    pub min_pairs_for_correction: usize,
    /// When false, CAV boxes are fused with the pose-derived transform only
    /// (plain late fusion).
    pub correction_enabled: bool,
    pub association: AssociationConfig,
    pub registration: RansacConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            nms_iou_threshold: 0.15,
            min_pairs_for_correction: 3,
            correction_enabled: true,
            association: AssociationConfig::default(),
            registration: RansacConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold < 1.0) {
            return Err(FusionError::InvalidThreshold(self.nms_iou_threshold));
        }
        self.registration.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOutput {
    pub objects: Vec<Detection>,
    /// Transform actually applied to the CAV detections (`F2 ∘ F1`, or `F1`).
    pub applied_transform: RigidTransform,
    pub pose_transform: RigidTransform,
    pub correction_applied: bool,
    pub mode: CooperativeMode,
    pub association: AssignmentResult,
    pub association_converged: bool,
    pub registration: Option<RegistrationResult>,
}

/// Greedy hard NMS: keep the most confident remaining detection, drop
/// everything overlapping it with IoU ≥ threshold, repeat.
///
/// Candidates are visited by confidence descending, then input index
/// ascending; the output follows the same order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; detections.len()];
    let mut kept = Vec::new();
    for (rank, &idx) in order.iter().enumerate() {
        if suppressed[idx] {
            continue;
        }
        kept.push(detections[idx]);
        for &other in &order[rank + 1..] {
            if !suppressed[other] && box_iou_3d(&detections[idx].bbox, &detections[other].bbox) >= iou_threshold {
                suppressed[other] = true;
            }
        }
    }
    kept
}

/// Driving mode from the number of associated pairs. Correction needs at
/// least `max(min_pairs, subset_size)` pairs.
pub fn cooperative_mode(association: &AssignmentResult, min_pairs: usize, subset_size: usize) -> CooperativeMode {
    let pairs = association.pairs.len();
    if pairs == 0 {
        CooperativeMode::SingleVehicle
    } else if pairs < min_pairs.max(subset_size) {
        CooperativeMode::UncorrectedCooperative
    } else {
        CooperativeMode::CorrectedCooperative
    }
}

/// Runs the whole pipeline on one frame. `cav_dets` are in the CAV's local
/// frame; the output is in the Ego's local frame.
///
/// A failed correction (too few usable pairs, all samples degenerate) never
/// aborts the frame: the pose-derived transform is used and
/// `correction_applied` is false.
pub fn fuse_frame(
    ego_pose: &Pose,
    cav_pose: &Pose,
    ego_dets: &[Detection],
    cav_dets: &[Detection],
    config: &PipelineConfig,
) -> Result<FusionOutput, FusionError> {
    config.validate()?;
    let pose_transform = relative_transform(ego_pose, cav_pose);
    let cav_in_ego: Vec<Detection> = cav_dets.iter().map(|d| d.transformed(&pose_transform)).collect();

    if !config.correction_enabled {
        let mut union = ego_dets.to_vec();
        union.extend_from_slice(&cav_in_ego);
        return Ok(FusionOutput {
            objects: nms(&union, config.nms_iou_threshold),
            applied_transform: pose_transform,
            pose_transform,
            correction_applied: false,
            mode: if cav_dets.is_empty() {
                CooperativeMode::SingleVehicle
            } else {
                CooperativeMode::UncorrectedCooperative
            },
            association: AssignmentResult::empty(ego_dets.len(), cav_dets.len()),
            association_converged: true,
            registration: None,
        });
    }

    let ego_boxes: Vec<OrientedBox> = ego_dets.iter().map(|d| d.bbox).collect();
    let cav_boxes: Vec<OrientedBox> = cav_in_ego.iter().map(|d| d.bbox).collect();
    let assoc = association::associate(&ego_boxes, &cav_boxes, &config.association)?;
    let mode = cooperative_mode(
        &assoc.result,
        config.min_pairs_for_correction,
        config.registration.subset_size,
    );

    let (objects, applied_transform, correction_applied, registration) = match mode {
        CooperativeMode::SingleVehicle => (ego_dets.to_vec(), pose_transform, false, None),
        CooperativeMode::UncorrectedCooperative => {
            let mut union = ego_dets.to_vec();
            union.extend_from_slice(&cav_in_ego);
            (nms(&union, config.nms_iou_threshold), pose_transform, false, None)
        }
        CooperativeMode::CorrectedCooperative => {
            let matched = MatchedSet::new(
                assoc
                    .result
                    .pairs
                    .iter()
                    .map(|&(i, j)| (ego_boxes[i].center, cav_boxes[j].center))
                    .collect(),
            );
            let estimate = registration::estimate_correction(&matched, &config.registration)
                .ok()
                .filter(|r| r.inlier_ratio > 0.0);
            let (correction, applied) = match &estimate {
                Some(r) => (r.correction, true),
                None => (RigidTransform::identity(), false),
            };
            let full = registration::compose_final(&pose_transform, &correction);
            let mut union = ego_dets.to_vec();
            union.extend(cav_dets.iter().map(|d| d.transformed(&full)));
            (nms(&union, config.nms_iou_threshold), full, applied, estimate)
        }
    };

    Ok(FusionOutput {
        objects,
        applied_transform,
        pose_transform,
        correction_applied,
        mode,
        association: assoc.result,
        association_converged: assoc.converged,
        registration,
    })
}
