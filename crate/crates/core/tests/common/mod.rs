//! Independent oracles and generators shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coopfuse::association::{augment, hungarian_oracle, matching_cost, AugmentedCostMatrix, CostMatrix};
use coopfuse::geometry::OrientedBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cost of a partial matching relative to leaving everything unmatched:
/// `Σ (C_ij − α)` over the pairs.
fn relative_cost(cost: &AugmentedCostMatrix, pairs: &[(usize, usize)]) -> f64 {
    let (m, n) = (cost.rows(), cost.cols());
    matching_cost(cost, pairs) - cost.dustbin_cost() * (m + n) as f64
}

fn interior(cost: &AugmentedCostMatrix) -> DMatrix<f64> {
    cost.values().view((0, 0), (cost.rows(), cost.cols())).into_owned()
}

fn best_relative(values: &DMatrix<f64>, alpha: f64) -> f64 {
    if values.nrows() == 0 || values.ncols() == 0 {
        return 0.0;
    }
    let aug = augment(&CostMatrix::new(values.clone()).unwrap(), alpha).unwrap();
    relative_cost(&aug, &hungarian_oracle(&aug))
}

/// Optimal pair set and the cost gap to the best different pair set.
///
/// Any other set either drops an optimal pair (solve with that pair
/// forbidden) or uses a non-optimal pair (fix it and solve the rest).
pub fn optimal_with_gap(cost: &AugmentedCostMatrix) -> (Vec<(usize, usize)>, f64) {
    let alpha = cost.dustbin_cost();
    let values = interior(cost);
    let (m, n) = (values.nrows(), values.ncols());
    let mut best_pairs = hungarian_oracle(cost);
    best_pairs.sort_unstable();
    let best = relative_cost(cost, &best_pairs);
    let forbidden = 1e3 * (alpha + values.max().max(0.0)) + 1.0;
    let mut second = f64::INFINITY;
    for &(i, j) in &best_pairs {
        let mut v = values.clone();
        v[(i, j)] = forbidden;
        second = second.min(best_relative(&v, alpha));
    }
    for i in 0..m {
        for j in 0..n {
            if best_pairs.contains(&(i, j)) {
                continue;
            }
            let sub = values.clone().remove_row(i).remove_column(j);
            second = second.min(values[(i, j)] - alpha + best_relative(&sub, alpha));
        }
    }
    (best_pairs, second - best)
}

/// Fraction of `samples` uniform points in the union's bounding box that
/// fall in both boxes, scaled to an IoU estimate.
pub fn monte_carlo_iou<R: Rng>(a: &OrientedBox, b: &OrientedBox, samples: usize, rng: &mut R) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for obb in [a, b] {
        let half_height = 0.5 * obb.extent.z;
        for corner in obb.footprint() {
            lo = lo.inf(&Vector3::new(corner.x, corner.y, obb.center.z - half_height));
            hi = hi.sup(&Vector3::new(corner.x, corner.y, obb.center.z + half_height));
        }
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let p = Vector3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        );
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn random_box<R: Rng>(rng: &mut R, spread: f64) -> OrientedBox {
    OrientedBox::new(
        Vector3::new(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-0.5..0.5),
        ),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        Vector3::new(
            rng.random_range(1.0..5.0),
            rng.random_range(1.0..3.0),
            rng.random_range(1.0..2.5),
        ),
    )
}

/// Random association instance: `m × n` costs uniform in `[0, 2α]`.
pub fn random_instance<R: Rng>(rng: &mut R, max_size: usize, alpha: f64) -> AugmentedCostMatrix {
    let m = rng.random_range(1..=max_size);
    let n = rng.random_range(1..=max_size);
    let values = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..2.0 * alpha));
    augment(&CostMatrix::new(values).unwrap(), alpha).unwrap()
}
