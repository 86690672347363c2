//! Co-visible object association as a partial optimal-transport problem.
//!
//! The `m × n` distance matrix between Ego boxes and transformed CAV boxes is
//! padded with a dustbin row and column of constant cost `α`. The padded
//! problem has row marginals `[1, …, 1, n]` and column marginals
//! `[1, …, 1, m]`, so every real box sends its unit of mass either to one
//! partner or to the dustbin. Entropic Sinkhorn iteration in the log domain
//! solves it, and pairs are read off with a mutual-argmax rule.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::OrientedBox;

/// Row sums and column sums must match their marginals to this level.
pub const MARGINAL_TOLERANCE: f64 = 1e-3;

/// Plan entries closer than this are treated as tied; the lower index wins.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Sweeps at the target `ε` stop early once the row residual drops below this.
pub const EARLY_EXIT_RESIDUAL: f64 = 1e-6;

/// Longest annealing phase, in sweeps.
pub const MAX_ANNEAL_SWEEPS: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssociationError {
    #[error("dustbin cost must be finite and > 0, got {0}")]
    InvalidDustbinCost(f64),
    #[error("cost matrix entry ({row}, {col}) = {value} is negative or not finite")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("epsilon must be finite and > 0, got {0}")]
    InvalidEpsilon(f64),
    #[error("at least one Sinkhorn iteration is required")]
    NoIterations,
    #[error("Sinkhorn did not converge: marginal residual {residual:e} after {iterations} iterations")]
    NotConverged {
        residual: f64,
        iterations: usize,
        plan: Box<TransportPlan>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Entropic regularization, meters.
    pub epsilon: f64,
    /// Sweep budget; sweeps at the target `ε` may stop early on convergence.
    pub iterations: usize,
    /// Dustbin cost `α`, meters.
    pub dustbin_cost: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            iterations: 2000,
            dustbin_cost: 10.0,
        }
    }
}

/// Pairwise Euclidean distances between box centers, `m × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: DMatrix<f64>,
}

impl CostMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self, AssociationError> {
        for col in 0..values.ncols() {
            for row in 0..values.nrows() {
                let value = values[(row, col)];
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(AssociationError::InvalidCost { row, col, value });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }
}

/// `(m+1) × (n+1)` cost with the dustbin border filled with `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCostMatrix {
    values: DMatrix<f64>,
    dustbin_cost: f64,
}

impl AugmentedCostMatrix {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dustbin_cost(&self) -> f64 {
        self.dustbin_cost
    }

    /// Number of Ego detections `m`.
    pub fn rows(&self) -> usize {
        self.values.nrows() - 1
    }

    /// Number of CAV detections `n`.
    pub fn cols(&self) -> usize {
        self.values.ncols() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: DMatrix<f64>,
    marginal_residual: f64,
}

impl TransportPlan {
    /// Wraps an externally built plan; the residual is measured here.
    pub fn from_values(values: DMatrix<f64>) -> Self {
        let marginal_residual = marginal_residual(&values);
        Self {
            values,
            marginal_residual,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Largest absolute deviation of any row or column sum from its marginal.
    pub fn marginal_residual(&self) -> f64 {
        self.marginal_residual
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(m+1) × (n+1)` plan, row-major nested lists when serialized.
    #[serde(with = "matrix_rows")]
    pub transport_plan: DMatrix<f64>,
    /// `(ego index, cav index)`, sorted by ego index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_ego: Vec<usize>,
    pub unmatched_cav: Vec<usize>,
}

impl AssignmentResult {
    /// Result for `m` Ego and `n` CAV detections with nothing matched.
    pub fn empty(m: usize, n: usize) -> Self {
        let mut plan = DMatrix::zeros(m + 1, n + 1);
        for i in 0..m {
            plan[(i, n)] = 1.0;
        }
        for j in 0..n {
            plan[(m, j)] = 1.0;
        }
        Self {
            transport_plan: plan,
            pairs: Vec::new(),
            unmatched_ego: (0..m).collect(),
            unmatched_cav: (0..n).collect(),
        }
    }
}

pub fn build_cost(ego_boxes: &[OrientedBox], cav_boxes_in_ego: &[OrientedBox]) -> CostMatrix {
    let values = DMatrix::from_fn(ego_boxes.len(), cav_boxes_in_ego.len(), |i, j| {
        (ego_boxes[i].center - cav_boxes_in_ego[j].center).norm()
    });
    CostMatrix { values }
}

pub fn augment(cost: &CostMatrix, dustbin_cost: f64) -> Result<AugmentedCostMatrix, AssociationError> {
    if !(dustbin_cost > 0.0 && dustbin_cost.is_finite()) {
        return Err(AssociationError::InvalidDustbinCost(dustbin_cost));
    }
    let (m, n) = (cost.rows(), cost.cols());
    let values = DMatrix::from_fn(m + 1, n + 1, |i, j| {
        if i < m && j < n {
            cost.values[(i, j)]
        } else {
            dustbin_cost
        }
    });
    Ok(AugmentedCostMatrix { values, dustbin_cost })
}

fn marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![1.0; m + 1];
    rows[m] = n as f64;
    let mut cols = vec![1.0; n + 1];
    cols[n] = m as f64;
    (rows, cols)
}

fn marginal_residual(plan: &DMatrix<f64>) -> f64 {
    let m = plan.nrows() - 1;
    let n = plan.ncols() - 1;
    let (row_marginal, col_marginal) = marginals(m, n);
    let row_err = plan
        .row_iter()
        .zip(&row_marginal)
        .map(|(row, target)| (row.sum() - target).abs())
        .fold(0.0, f64::max);
    let col_err = plan
        .column_iter()
        .zip(&col_marginal)
        .map(|(col, target)| (col.sum() - target).abs())
        .fold(0.0, f64::max);
    row_err.max(col_err)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Annealing phase: geometric decay from the cost scale towards `epsilon`
/// over half the budget, capped at [`MAX_ANNEAL_SWEEPS`]. Warm-started
/// potentials make the sweeps at `epsilon` converge where a cold start would
/// need thousands of sweeps.
fn anneal_schedule(cost_scale: f64, epsilon: f64, iterations: usize) -> Vec<f64> {
    let start = cost_scale.max(epsilon);
    let sweeps = (iterations / 2).min(MAX_ANNEAL_SWEEPS);
    if sweeps == 0 || start <= epsilon {
        return Vec::new();
    }
    let ratio = (epsilon / start).powf(1.0 / sweeps as f64);
    let mut eps = start;
    let mut schedule = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        schedule.push(eps.max(epsilon));
        eps *= ratio;
    }
    schedule
}

struct Potentials<'a> {
    cost: &'a DMatrix<f64>,
    log_rows: Vec<f64>,
    log_cols: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Potentials<'_> {
    /// Row update, then column update; afterwards columns match exactly.
    fn sweep(&mut self, eps: f64) {
        let c = self.cost;
        let (rows, cols) = (c.nrows(), c.ncols());
        for i in 0..rows {
            self.f[i] = if self.log_rows[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let g = &self.g;
                eps * (self.log_rows[i] - log_sum_exp((0..cols).map(|j| (g[j] - c[(i, j)]) / eps)))
            };
        }
        for j in 0..cols {
            self.g[j] = if self.log_cols[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let f = &self.f;
                eps * (self.log_cols[j] - log_sum_exp((0..rows).map(|i| (f[i] - c[(i, j)]) / eps)))
            };
        }
    }

    fn plan(&self, eps: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.cost.nrows(), self.cost.ncols(), |i, j| {
            let exponent = (self.f[i] + self.g[j] - self.cost[(i, j)]) / eps;
            if exponent == f64::NEG_INFINITY || exponent.is_nan() {
                0.0
            } else {
                exponent.exp()
            }
        })
    }
}

/// Projects a near-feasible plan onto the marginal constraints: rows and
/// columns over their targets are scaled down, then the remaining deficit is
/// added as a rank-one correction (Altschuler, Weed & Rigollet, 2017). Moves
/// at most twice the total marginal violation of mass.
fn round_to_marginals(mut values: DMatrix<f64>, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
    for (i, &target) in rows.iter().enumerate() {
        let sum = values.row(i).sum();
        if sum > target {
            values.row_mut(i).scale_mut(target / sum);
        }
    }
    for (j, &target) in cols.iter().enumerate() {
        let sum = values.column(j).sum();
        if sum > target {
            values.column_mut(j).scale_mut(target / sum);
        }
    }
    let row_deficit: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, t)| (t - values.row(i).sum()).max(0.0))
        .collect();
    let col_deficit: Vec<f64> = cols
        .iter()
        .enumerate()
        .map(|(j, t)| (t - values.column(j).sum()).max(0.0))
        .collect();
    let total: f64 = col_deficit.iter().sum();
    if total > 0.0 {
        for (i, &dr) in row_deficit.iter().enumerate() {
            for (j, &dc) in col_deficit.iter().enumerate() {
                values[(i, j)] += dr * dc / total;
            }
        }
    }
    values
}

/// Entropy-regularized transport plan minimizing `⟨P, C̄⟩ − ε·H(P)` under the
/// dustbin marginals, by log-domain Sinkhorn sweeps.
///
/// A sweep updates the row potentials, then the column potentials. The
/// regularization is first annealed towards `epsilon` (see
/// `anneal_schedule`); the remaining budget runs at `epsilon` and stops once
/// the marginal residual is below [`EARLY_EXIT_RESIDUAL`].
/// Marginals with zero mass (an empty dustbin when `m = 0` or `n = 0`) are
/// handled by giving the corresponding potential `−∞`.
///
/// Convergence is judged on the raw Sinkhorn plan. A converged plan is then
/// rounded onto the marginals, so its residual is at floating-point level;
/// the plan inside [`AssociationError::NotConverged`] is left raw.
pub fn sinkhorn_solve(
    cost: &AugmentedCostMatrix,
    epsilon: f64,
    iterations: usize,
) -> Result<TransportPlan, AssociationError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AssociationError::InvalidEpsilon(epsilon));
    }
    if iterations == 0 {
        return Err(AssociationError::NoIterations);
    }
    let c = &cost.values;
    let (rows, cols) = (c.nrows(), c.ncols());
    let (row_marginal, col_marginal) = marginals(rows - 1, cols - 1);
    // Dual potentials in cost units: P_ij = exp((f_i + g_j − C_ij) / ε).
    let mut potentials = Potentials {
        cost: c,
        log_rows: row_marginal.iter().map(|v| v.ln()).collect(),
        log_cols: col_marginal.iter().map(|v| v.ln()).collect(),
        f: vec![0.0; rows],
        g: vec![0.0; cols],
    };
    let anneal = anneal_schedule(c.max(), epsilon, iterations);
    for &eps in &anneal {
        potentials.sweep(eps);
    }
    let mut plan = None;
    for _ in anneal.len()..iterations {
        potentials.sweep(epsilon);
        let candidate = TransportPlan::from_values(potentials.plan(epsilon));
        let done = candidate.marginal_residual <= EARLY_EXIT_RESIDUAL;
        plan = Some(candidate);
        if done {
            break;
        }
    }
    let plan = plan.unwrap_or_else(|| TransportPlan::from_values(potentials.plan(epsilon)));
    if plan.marginal_residual > MARGINAL_TOLERANCE || plan.marginal_residual.is_nan() {
        return Err(AssociationError::NotConverged {
            residual: plan.marginal_residual,
            iterations,
            plan: Box::new(plan),
        });
    }
    Ok(TransportPlan::from_values(round_to_marginals(
        plan.values,
        &row_marginal,
        &col_marginal,
    )))
}

fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (idx, value) in values.enumerate() {
        match best {
            Some((_, current)) if value <= current + TIE_TOLERANCE => {}
            _ => best = Some((idx, value)),
        }
    }
    best
}

/// Mutual-argmax pair extraction.
///
/// After dropping the dustbin row and column, `(i, j)` is a pair when `j`
/// is the argmax of row `i`, `i` is the argmax of column `j`, and the plan
/// mass at `(i, j)` is strictly greater than both dustbin entries `P̄[i, n]`
/// and `P̄[m, j]`. Ties resolve to the lowest index.
pub fn extract_pairs(plan: &TransportPlan) -> AssignmentResult {
    let p = &plan.values;
    let m = p.nrows() - 1;
    let n = p.ncols() - 1;
    let mut pairs = Vec::new();
    let mut ego_matched = vec![false; m];
    let mut cav_matched = vec![false; n];
    if m > 0 && n > 0 {
        for i in 0..m {
            let Some((j, mass)) = argmax((0..n).map(|j| p[(i, j)])) else {
                continue;
            };
            let Some((col_best, _)) = argmax((0..m).map(|k| p[(k, j)])) else {
                continue;
            };
            if col_best == i && mass > p[(i, n)] && mass > p[(m, j)] {
                pairs.push((i, j));
                ego_matched[i] = true;
                cav_matched[j] = true;
            }
        }
    }
    AssignmentResult {
        transport_plan: p.clone(),
        pairs,
        unmatched_ego: (0..m).filter(|&i| !ego_matched[i]).collect(),
        unmatched_cav: (0..n).filter(|&j| !cav_matched[j]).collect(),
    }
}

/// Outcome of [`associate`]: the extracted assignment plus solver health.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub result: AssignmentResult,
    pub marginal_residual: f64,
    pub converged: bool,
}

/// Full association step used by the fusion pipeline.
///
/// Empty inputs short-circuit without running Sinkhorn. A plan that misses
/// the marginal tolerance is still used for extraction and flagged as not
/// converged, so a frame is never dropped on solver grounds.
pub fn associate(
    ego_boxes: &[OrientedBox],
    cav_boxes_in_ego: &[OrientedBox],
    config: &AssociationConfig,
) -> Result<Association, AssociationError> {
    let (m, n) = (ego_boxes.len(), cav_boxes_in_ego.len());
    if m == 0 || n == 0 {
        return Ok(Association {
            result: AssignmentResult::empty(m, n),
            marginal_residual: 0.0,
            converged: true,
        });
    }
    let augmented = augment(&build_cost(ego_boxes, cav_boxes_in_ego), config.dustbin_cost)?;
    let (plan, converged) = match sinkhorn_solve(&augmented, config.epsilon, config.iterations) {
        Ok(plan) => (plan, true),
        Err(AssociationError::NotConverged { plan, .. }) => (*plan, false),
        Err(e) => return Err(e),
    };
    Ok(Association {
        marginal_residual: plan.marginal_residual,
        result: extract_pairs(&plan),
        converged,
    })
}

/// Exact minimum-cost square assignment (shortest augmenting path with
/// potentials). Returns `assignment[row] = col`.
pub fn solve_square_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let size = cost.nrows();
    assert_eq!(size, cost.ncols(), "assignment matrix must be square");
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut col_owner = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for row in 1..=size {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; size];
    for j in 1..=size {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact solution of the unregularized dustbin problem.
///
/// The dustbin row and column are replicated into an `(m+n) × (n+m)` square
/// matrix whose every non-interior entry is `α`: Ego `i` may take any of `m`
/// dustbin columns, CAV `j` any of `n` dustbin rows, and the dustbin-dustbin
/// block absorbs the remaining mass at cost `α` exactly as `P̄[m, n]` does.
/// Its optimum equals the linear-programming optimum of the relaxed problem.
pub fn hungarian_oracle(cost: &AugmentedCostMatrix) -> Vec<(usize, usize)> {
    let (m, n) = (cost.rows(), cost.cols());
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let alpha = cost.dustbin_cost;
    let size = m + n;
    let square = DMatrix::from_fn(
        size,
        size,
        |i, j| {
            if i < m && j < n {
                cost.values[(i, j)]
            } else {
                alpha
            }
        },
    );
    let assignment = solve_square_assignment(&square);
    (0..m)
        .filter(|&i| assignment[i] < n)
        .map(|i| (i, assignment[i]))
        .collect()
}

/// Cost of a partial matching under the relaxed dustbin objective:
/// matched pairs pay their distance, everything else pays `α`, and each
/// matched pair also leaves one unit of dustbin-to-dustbin mass.
pub fn matching_cost(cost: &AugmentedCostMatrix, pairs: &[(usize, usize)]) -> f64 {
    let (m, n) = (cost.rows(), cost.cols());
    let alpha = cost.dustbin_cost;
    let k = pairs.len() as f64;
    let interior: f64 = pairs.iter().map(|&(i, j)| cost.values[(i, j)]).sum();
    interior + alpha * ((m + n) as f64 - k)
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(matrix: &DMatrix<f64>, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = matrix.row_iter().map(|row| row.iter().copied().collect()).collect();
        rows.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("transport_plan rows have unequal lengths"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}
