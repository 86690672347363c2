//! Correction transform from associated box centers.
//!
//! Repeated random subsets of the matched pairs are aligned in closed form
//! (centered SVD, proper rotation enforced). Each candidate is scored by the
//! fraction of all pairs it aligns within `τ`, and the best-scoring round
//! wins. An optional least-squares refit on the winner's inliers is kept
//! only when it aligns at least as many pairs.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::rng;

/// Second singular value of the centered cross-covariance below which the
/// rotation is considered underdetermined.
pub const DEGENERACY_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("need at least {need} matched pairs, got {have}")]
    InsufficientPairs { have: usize, need: usize },
    #[error("point lists differ in length ({ego} ego vs {cav} cav)")]
    LengthMismatch { ego: usize, cav: usize },
    #[error("degenerate configuration: second singular value {0:e} (points nearly collinear)")]
    Degenerate(f64),
    #[error("every sampling round drew a degenerate subset")]
    AllDegenerate,
    #[error("invalid registration config: {0}")]
    InvalidConfig(&'static str),
}

/// Matched `(ego center, cav center in Ego frame)` pairs, meters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub pairs: Vec<(Vector3<f64>, Vector3<f64>)>,
}

impl MatchedSet {
    pub fn new(pairs: Vec<(Vector3<f64>, Vector3<f64>)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Sampling rounds `n_s`.
    pub rounds: usize,
    /// Pairs per sample `w`.
    pub subset_size: usize,
    /// Inlier threshold `τ`, meters.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Least-squares polish on the winning round's inliers.
    pub refit: bool,
    /// Redraws allowed per round when a sample is degenerate.
    pub max_resamples: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            subset_size: 3,
            inlier_threshold: 0.25,
            seed: 0,
            refit: true,
            max_resamples: 10,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.rounds == 0 {
            return Err(RegistrationError::InvalidConfig("rounds must be >= 1"));
        }
        if self.subset_size < 3 {
            return Err(RegistrationError::InvalidConfig("subset_size must be >= 3"));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(RegistrationError::InvalidConfig("inlier_threshold must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub correction: RigidTransform,
    /// `inliers.len() / matched pairs`.
    pub inlier_ratio: f64,
    /// Indices into the input [`MatchedSet`], ascending.
    pub inliers: Vec<usize>,
    pub rounds_run: usize,
    pub winning_round: usize,
    pub refit_applied: bool,
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares rigid transform `x ≈ R·y + t` mapping `cav_pts` onto
/// `ego_pts`, with `det R = +1`.
pub fn kabsch(ego_pts: &[Vector3<f64>], cav_pts: &[Vector3<f64>]) -> Result<RigidTransform, RegistrationError> {
    if ego_pts.len() != cav_pts.len() {
        return Err(RegistrationError::LengthMismatch {
            ego: ego_pts.len(),
            cav: cav_pts.len(),
        });
    }
    if ego_pts.len() < 3 {
        return Err(RegistrationError::InsufficientPairs {
            have: ego_pts.len(),
            need: 3,
        });
    }
    let mu_x = centroid(ego_pts);
    let mu_y = centroid(cav_pts);
    // Ego-by-cav cross-covariance: X̃·Ỹᵀ = U Σ Vᵀ gives R = U·diag(1, 1, d)·Vᵀ.
    let cross: Matrix3<f64> = ego_pts
        .iter()
        .zip(cav_pts)
        .map(|(x, y)| (x - mu_x) * (y - mu_y).transpose())
        .sum();
    let svd = cross.svd(true, true);
    let mut singular: Vec<f64> = svd.singular_values.iter().copied().collect();
    singular.sort_by(|a, b| b.total_cmp(a));
    if !(singular[1] >= DEGENERACY_THRESHOLD) {
        return Err(RegistrationError::Degenerate(singular[1]));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let d = (u * v_t).determinant().signum();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Ok(RigidTransform {
        rotation,
        translation: mu_x - rotation * mu_y,
    })
}

/// Sum of squared alignment residuals `Σ‖x − F(y)‖²`.
pub fn squared_residual(ego_pts: &[Vector3<f64>], cav_pts: &[Vector3<f64>], transform: &RigidTransform) -> f64 {
    ego_pts
        .iter()
        .zip(cav_pts)
        .map(|(x, y)| (x - transform.apply_point(y)).norm_squared())
        .sum()
}

/// Fraction of pairs with `‖x − F(y)‖ ≤ τ`, and their indices.
pub fn inlier_ratio(set: &MatchedSet, transform: &RigidTransform, threshold: f64) -> (f64, Vec<usize>) {
    let inliers: Vec<usize> = set
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, (x, y))| (x - transform.apply_point(y)).norm() <= threshold)
        .map(|(idx, _)| idx)
        .collect();
    let ratio = if set.is_empty() {
        0.0
    } else {
        inliers.len() as f64 / set.len() as f64
    };
    (ratio, inliers)
}

fn lexicographic(a: &(Vector3<f64>, Vector3<f64>), b: &(Vector3<f64>, Vector3<f64>)) -> std::cmp::Ordering {
    a.0.iter()
        .chain(a.1.iter())
        .zip(b.0.iter().chain(b.1.iter()))
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn fit_subset(set: &MatchedSet, indices: &[usize]) -> Result<RigidTransform, RegistrationError> {
    let ego: Vec<Vector3<f64>> = indices.iter().map(|&i| set.pairs[i].0).collect();
    let cav: Vec<Vector3<f64>> = indices.iter().map(|&i| set.pairs[i].1).collect();
    kabsch(&ego, &cav)
}

/// Sampled estimation of the correction transform.
///
/// Round `s` draws from its own stream `(seed, s)`, so rounds are
/// independent of each other and of evaluation order. Samples are drawn
/// over a coordinate-sorted view of the pairs, which makes the result
/// invariant to the input order. The best round maximizes the inlier ratio,
/// ties going to the lowest round index; a perfect ratio stops early.
pub fn estimate_correction(set: &MatchedSet, config: &RansacConfig) -> Result<RegistrationResult, RegistrationError> {
    config.validate()?;
    let total = set.len();
    if total < config.subset_size {
        return Err(RegistrationError::InsufficientPairs {
            have: total,
            need: config.subset_size,
        });
    }
    let mut canonical: Vec<usize> = (0..total).collect();
    canonical.sort_by(|&a, &b| lexicographic(&set.pairs[a], &set.pairs[b]));

    struct Best {
        ratio: f64,
        round: usize,
        transform: RigidTransform,
        inliers: Vec<usize>,
    }
    let mut best: Option<Best> = None;
    let mut rounds_run = 0;
    for round in 0..config.rounds {
        rounds_run = round + 1;
        let mut stream = rng::stream(config.seed, "ransac-round", round as u64);
        let mut candidate = None;
        for _ in 0..=config.max_resamples {
            let sample: Vec<usize> = rand::seq::index::sample(&mut stream, total, config.subset_size)
                .into_iter()
                .map(|k| canonical[k])
                .collect();
            match fit_subset(set, &sample) {
                Ok(transform) => {
                    candidate = Some(transform);
                    break;
                }
                Err(RegistrationError::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let Some(transform) = candidate else { continue };
        let (ratio, inliers) = inlier_ratio(set, &transform, config.inlier_threshold);
        if best.as_ref().is_none_or(|b| ratio > b.ratio) {
            best = Some(Best {
                ratio,
                round,
                transform,
                inliers,
            });
        }
        if ratio >= 1.0 {
            break;
        }
    }
    let mut best = best.ok_or(RegistrationError::AllDegenerate)?;

    let mut refit_applied = false;
    if config.refit && best.inliers.len() >= 3 {
        let mut is_inlier = vec![false; total];
        for &k in &best.inliers {
            is_inlier[k] = true;
        }
        let ordered: Vec<usize> = canonical.iter().copied().filter(|&k| is_inlier[k]).collect();
        if let Ok(refit) = fit_subset(set, &ordered) {
            let (ratio, inliers) = inlier_ratio(set, &refit, config.inlier_threshold);
            if ratio >= best.ratio {
                best.transform = refit;
                best.ratio = ratio;
                best.inliers = inliers;
                refit_applied = true;
            }
        }
    }
    Ok(RegistrationResult {
        correction: best.transform,
        inlier_ratio: best.ratio,
        inliers: best.inliers,
        rounds_run,
        winning_round: best.round,
        refit_applied,
    })
}

/// Final Ego-from-CAV transform: the pose-derived `first` followed by the
/// estimated correction `second`.
pub fn compose_final(first: &RigidTransform, second: &RigidTransform) -> RigidTransform {
    second.after(first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{log_rotation, rot_z, rotation_from_euler};
    use approx::assert_abs_diff_eq;

    fn triangle() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(4.0, 1.0, 0.0),
            Vector3::new(1.0, 5.0, 0.5),
        ]
    }

    #[test]
    fn kabsch_identity() {
        let pts = triangle();
        let t = kabsch(&pts, &pts).unwrap();
        assert_abs_diff_eq!(t.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let truth = RigidTransform {
            rotation: rot_z(0.3),
            translation: Vector3::new(1.0, -2.0, 0.0),
        };
        let cav = triangle();
        let ego: Vec<_> = cav.iter().map(|p| truth.apply_point(p)).collect();
        let est = kabsch(&ego, &cav).unwrap();
        assert!(log_rotation(&(truth.rotation.transpose() * est.rotation)) < 1e-9);
        assert!((truth.translation - est.translation).norm() < 1e-9);
    }

    #[test]
    fn kabsch_rejects_collinear_and_short_input() {
        let line: Vec<_> = (0..4).map(|k| Vector3::new(k as f64, 2.0 * k as f64, 0.0)).collect();
        assert!(matches!(kabsch(&line, &line), Err(RegistrationError::Degenerate(_))));
        let two = &triangle()[..2];
        assert!(matches!(
            kabsch(two, two),
            Err(RegistrationError::InsufficientPairs { .. })
        ));
        assert!(matches!(
            kabsch(&triangle(), &triangle()[..2]),
            Err(RegistrationError::LengthMismatch { .. })
        ));
    }

    /// Residual of the best Euler-grid rotation (with its optimal translation),
    /// refined coarse-to-fine down to 0.001 rad.
    fn grid_search_residual(ego: &[Vector3<f64>], cav: &[Vector3<f64>]) -> f64 {
        let mu_x = centroid(ego);
        let mu_y = centroid(cav);
        let eval = |angles: &Vector3<f64>| {
            let r = rotation_from_euler(angles);
            let t = mu_x - r * mu_y;
            squared_residual(
                ego,
                cav,
                &RigidTransform {
                    rotation: r,
                    translation: t,
                },
            )
        };
        let mut best = (f64::INFINITY, Vector3::zeros());
        let coarse = 0.1;
        let steps = (std::f64::consts::PI / coarse).ceil() as i32;
        for a in -steps..=steps {
            for b in -(steps / 2)..=(steps / 2) {
                for c in -steps..=steps {
                    let angles = Vector3::new(a as f64, b as f64, c as f64) * coarse;
                    let r = eval(&angles);
                    if r < best.0 {
                        best = (r, angles);
                    }
                }
            }
        }
        let mut step = coarse;
        while step > 0.001 {
            step /= 2.0;
            let center = best.1;
            for a in -3..=3 {
                for b in -3..=3 {
                    for c in -3..=3 {
                        let angles = center + Vector3::new(a as f64, b as f64, c as f64) * step;
                        let r = eval(&angles);
                        if r < best.0 {
                            best = (r, angles);
                        }
                    }
                }
            }
        }
        best.0
    }

    #[test]
    fn kabsch_mirrored_set_stays_proper_and_optimal() {
        let cav = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(-1.0, 0.5, 2.0),
        ];
        // Mirror through the xy-plane: no proper rotation reproduces it.
        let ego: Vec<_> = cav.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let est = kabsch(&ego, &cav).unwrap();
        assert_abs_diff_eq!(est.rotation.determinant(), 1.0, epsilon = 1e-9);
        let ours = squared_residual(&ego, &cav, &est);
        let grid = grid_search_residual(&ego, &cav);
        assert!(ours > 1e-3, "mirror should not be reachable exactly");
        assert!(ours <= grid + 1e-9, "kabsch {ours} vs grid {grid}");
    }

    #[test]
    fn inlier_ratio_counts_and_boundary() {
        let pts = triangle();
        let mut set = MatchedSet::new(pts.iter().map(|p| (*p, *p)).collect());
        let (eta, inl) = inlier_ratio(&set, &RigidTransform::identity(), 0.25);
        assert_eq!(eta, 1.0);
        assert_eq!(inl, vec![0, 1, 2]);

        set.pairs
            .push((Vector3::new(10.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.0)));
        let (eta, inl) = inlier_ratio(&set, &RigidTransform::identity(), 0.25);
        assert_eq!(eta, 0.75);
        assert_eq!(inl, vec![0, 1, 2]);

        // Residual exactly τ (0.25 is exact in binary) counts as an inlier.
        let boundary = MatchedSet::new(vec![(Vector3::new(0.25, 0.0, 0.0), Vector3::zeros())]);
        assert_eq!(inlier_ratio(&boundary, &RigidTransform::identity(), 0.25).0, 1.0);
        let outside = MatchedSet::new(vec![(Vector3::new(0.25 + 1e-12, 0.0, 0.0), Vector3::zeros())]);
        assert_eq!(inlier_ratio(&outside, &RigidTransform::identity(), 0.25).0, 0.0);
    }

    #[test]
    fn estimate_rejects_small_sets_and_bad_config() {
        let pts = &triangle()[..2];
        let set = MatchedSet::new(pts.iter().map(|p| (*p, *p)).collect());
        assert_eq!(
            estimate_correction(&set, &RansacConfig::default()),
            Err(RegistrationError::InsufficientPairs { have: 2, need: 3 })
        );
        let bad = RansacConfig {
            subset_size: 2,
            ..RansacConfig::default()
        };
        assert!(matches!(
            estimate_correction(&set, &bad),
            Err(RegistrationError::InvalidConfig(_))
        ));
    }

    #[test]
    fn estimate_all_degenerate() {
        let line: Vec<_> = (0..6).map(|k| Vector3::new(k as f64 * 5.0, 0.0, 0.0)).collect();
        let set = MatchedSet::new(line.iter().map(|p| (*p, *p)).collect());
        assert_eq!(
            estimate_correction(&set, &RansacConfig::default()),
            Err(RegistrationError::AllDegenerate)
        );
    }

    #[test]
    fn compose_final_cases() {
        let f1 = RigidTransform {
            rotation: rot_z(0.2),
            translation: Vector3::new(1.0, 0.0, 0.0),
        };
        let id = RigidTransform::identity();
        assert_eq!(compose_final(&f1, &id), f1);

        let a = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let b = RigidTransform::from_translation(Vector3::new(-4.0, 0.5, 1.0));
        assert_abs_diff_eq!(compose_final(&a, &b).translation, Vector3::new(-3.0, 2.5, 4.0));

        let f2 = RigidTransform {
            rotation: rot_z(-0.2),
            translation: Vector3::new(0.0, 1.0, 0.0),
        };
        let out = compose_final(&f1, &f2);
        assert_abs_diff_eq!(out.rotation, Matrix3::identity(), epsilon = 1e-15);
        let expected = rot_z(-0.2) * Vector3::new(1.0, 0.0, 0.0) + Vector3::new(0.0, 1.0, 0.0);
        assert_abs_diff_eq!(out.translation, expected, epsilon = 1e-15);
    }
}
