//! Scoring: average precision at a fixed IoU, rotation/translation error of
//! an estimated transform, and link bandwidth.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::Detection;
use crate::geometry::{box_iou_3d, log_rotation, OrientedBox, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("average precision is undefined without ground truth boxes")]
    EmptyGroundTruth,
    #[error("iou_min must lie in (0, 1), got {0}")]
    InvalidIouThreshold(f64),
    #[error("bandwidth factor `{0}` must be > 0")]
    NonPositiveBandwidth(&'static str),
}

/// Relative rotation error, radians.
pub fn rre(r_true: &Matrix3<f64>, r_est: &Matrix3<f64>) -> f64 {
    log_rotation(&(r_true.transpose() * r_est))
}

/// Relative translation error, meters.
pub fn rte(t_true: &Vector3<f64>, t_est: &Vector3<f64>) -> f64 {
    (t_true - t_est).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformError {
    /// Radians.
    pub rre: f64,
    /// Meters.
    pub rte: f64,
}

impl TransformError {
    pub fn between(truth: &RigidTransform, estimate: &RigidTransform) -> Self {
        Self {
            rre: rre(&truth.rotation, &estimate.rotation),
            rte: rte(&truth.translation, &estimate.translation),
        }
    }

    pub fn rre_deg(&self) -> f64 {
        self.rre.to_degrees()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallCurve {
    /// `(recall, precision)` after each detection in confidence order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Detection tagged with the frame it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDetection {
    pub frame: u64,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBox {
    pub frame: u64,
    pub bbox: OrientedBox,
}

/// All-point interpolated average precision at `iou_min`.
///
/// Detections are visited by confidence (descending; ties keep input
/// order). Each claims the unclaimed ground-truth box of its frame with the
/// highest IoU, provided that IoU reaches `iou_min`; otherwise it is a false
/// positive. AP is the exact area under the monotone precision envelope.
pub fn average_precision(
    detections: &[FrameDetection],
    ground_truth: &[FrameBox],
    iou_min: f64,
) -> Result<PrecisionRecallCurve, MetricsError> {
    if !(iou_min > 0.0 && iou_min < 1.0) {
        return Err(MetricsError::InvalidIouThreshold(iou_min));
    }
    if ground_truth.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .detection
            .confidence
            .partial_cmp(&detections[a].detection.confidence)
            .unwrap_or(Ordering::Equal)
    });

    let mut claimed = vec![false; ground_truth.len()];
    let total_gt = ground_truth.len() as f64;
    let mut true_positives = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (rank, &idx) in order.iter().enumerate() {
        let det = &detections[idx];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if claimed[g] || gt.frame != det.frame {
                continue;
            }
            let iou = box_iou_3d(&det.detection.bbox, &gt.bbox);
            if iou >= iou_min && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            true_positives += 1;
        }
        let tp = true_positives as f64;
        points.push((tp / total_gt, tp / (rank + 1) as f64));
    }
    let ap = area_under_envelope(&points);
    Ok(PrecisionRecallCurve { points, ap })
}

fn area_under_envelope(points: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = points.iter().map(|&(_, p)| p).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut area = 0.0;
    let mut previous_recall = 0.0;
    for (k, &(recall, _)) in points.iter().enumerate() {
        area += (recall - previous_recall) * envelope[k];
        previous_recall = recall;
    }
    area.clamp(0.0, 1.0)
}

/// `f_r × n_p × n_d × n_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSpec {
    /// Frames per second.
    pub frame_rate: f64,
    /// Items (boxes or points) per frame.
    pub items_per_frame: f64,
    pub dims_per_item: f64,
    pub bits_per_dim: f64,
}

impl BandwidthSpec {
    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, value) in [
            ("frame_rate", self.frame_rate),
            ("items_per_frame", self.items_per_frame),
            ("dims_per_item", self.dims_per_item),
            ("bits_per_dim", self.bits_per_dim),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MetricsError::NonPositiveBandwidth(name));
            }
        }
        Ok(())
    }
}

/// Required link rate in bits per second.
pub fn bandwidth(spec: &BandwidthSpec) -> Result<f64, MetricsError> {
    spec.validate()?;
    Ok(spec.frame_rate * spec.items_per_frame * spec.dims_per_item * spec.bits_per_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_z;
    use approx::assert_abs_diff_eq;

    fn gt_box(x: f64) -> OrientedBox {
        OrientedBox::new(Vector3::new(x, 0.0, 0.8), 0.0, Vector3::new(4.0, 2.0, 1.6))
    }

    fn fd(frame: u64, bbox: OrientedBox, confidence: f64) -> FrameDetection {
        FrameDetection {
            frame,
            detection: Detection::new(bbox, confidence),
        }
    }

    #[test]
    fn rre_rte_cases() {
        let r = rot_z(0.7);
        assert_eq!(rre(&r, &r), 0.0);
        assert_abs_diff_eq!(rre(&Matrix3::identity(), &rot_z(0.5)), 0.5, epsilon = 1e-9);
        assert_eq!(rte(&Vector3::new(1.0, 2.0, 3.0), &Vector3::new(1.0, 2.0, 3.0)), 0.0);
        assert_eq!(rte(&Vector3::zeros(), &Vector3::new(3.0, 4.0, 0.0)), 5.0);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts: Vec<FrameBox> = (0..3)
            .map(|k| FrameBox {
                frame: k,
                bbox: gt_box(k as f64 * 10.0),
            })
            .collect();
        let dets: Vec<FrameDetection> = gts.iter().map(|g| fd(g.frame, g.bbox, 1.0)).collect();
        assert_eq!(average_precision(&dets, &gts, 0.7).unwrap().ap, 1.0);
        let none = average_precision(&[], &gts, 0.7).unwrap();
        assert_eq!(none.ap, 0.0);
        assert!(none.points.is_empty());
        assert_eq!(average_precision(&dets, &[], 0.7), Err(MetricsError::EmptyGroundTruth));
        assert!(average_precision(&dets, &gts, 1.0).is_err());
    }

    #[test]
    fn ap_hit_then_miss() {
        let gt = gt_box(0.0);
        // Shift of 4/9 m along the 4 m length gives IoU = (4 - d)/(4 + d) = 0.8.
        let hit = OrientedBox::new(Vector3::new(4.0 / 9.0, 0.0, 0.8), 0.0, gt.extent);
        assert_abs_diff_eq!(box_iou_3d(&hit, &gt), 0.8, epsilon = 1e-12);
        let miss = gt_box(30.0);
        let curve = average_precision(
            &[fd(0, miss, 0.8), fd(0, hit, 0.9)],
            &[FrameBox { frame: 0, bbox: gt }],
            0.7,
        )
        .unwrap();
        assert_eq!(curve.points, vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(curve.ap, 1.0);
    }

    #[test]
    fn ap_frames_are_separate() {
        let gts = [FrameBox {
            frame: 1,
            bbox: gt_box(0.0),
        }];
        let curve = average_precision(&[fd(0, gt_box(0.0), 0.9)], &gts, 0.7).unwrap();
        assert_eq!(curve.ap, 0.0);
    }

    #[test]
    fn ap_envelope_interpolates() {
        // Sequence TP, FP, TP over 2 gts: precision 1, 0.5, 2/3.
        // Envelope: 1 on recall (0, 0.5], 2/3 on (0.5, 1] → AP = 0.5 + 1/3.
        let gts = [
            FrameBox {
                frame: 0,
                bbox: gt_box(0.0),
            },
            FrameBox {
                frame: 0,
                bbox: gt_box(20.0),
            },
        ];
        let dets = [
            fd(0, gt_box(0.0), 0.9),
            fd(0, gt_box(50.0), 0.8),
            fd(0, gt_box(20.0), 0.7),
        ];
        let curve = average_precision(&dets, &gts, 0.7).unwrap();
        assert_abs_diff_eq!(curve.ap, 0.5 + 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn bandwidth_cases() {
        let late = BandwidthSpec {
            frame_rate: 10.0,
            items_per_frame: 20.0,
            dims_per_item: 8.0,
            bits_per_dim: 32.0,
        };
        assert_eq!(bandwidth(&late).unwrap(), 51_200.0);
        let unit = BandwidthSpec {
            frame_rate: 1.0,
            items_per_frame: 1.0,
            dims_per_item: 1.0,
            bits_per_dim: 1.0,
        };
        assert_eq!(bandwidth(&unit).unwrap(), 1.0);
        let early = BandwidthSpec {
            items_per_frame: 60_000.0,
            dims_per_item: 4.0,
            ..late
        };
        assert_eq!(bandwidth(&early).unwrap(), 76_800_000.0);
        let bad = BandwidthSpec {
            bits_per_dim: 0.0,
            ..late
        };
        assert_eq!(bandwidth(&bad), Err(MetricsError::NonPositiveBandwidth("bits_per_dim")));
    }
}
