//! Minimum-cost perfect matching on square cost matrices.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix has {len} entries, not {n}×{n}")]
    NotSquare { n: usize, len: usize },
    #[error("non-finite cost at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

/// Optimal bijection from predictions (rows) to labels (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[i]` is the label slot matched to prediction `i`.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Prediction matched to label slot `j`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &j) in self.permutation.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }
}

/// Sums `cost[i][perm[i]]` in row order.
pub fn permutation_cost(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Shortest-augmenting-path Hungarian algorithm, O(n³).
///
/// `cost` is row-major `n×n`. Rows are inserted in index order and, among
/// equal-cost columns, the lowest column index is taken, so ties resolve the
/// same way on every run.
pub fn hungarian_assign(cost: &[f64], n: usize) -> Result<Assignment, AssignmentError> {
    if cost.len() != n * n {
        return Err(AssignmentError::NotSquare { n, len: cost.len() });
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return Err(AssignmentError::NonFinite { row: k / n, col: k % n });
    }
    if n == 0 {
        return Ok(Assignment { permutation: Vec::new(), total_cost: 0.0 });
    }
    // Potentials u (rows) and v (columns), 1-based with column 0 as the sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[row_of[j] - 1] = j - 1;
    }
    let total_cost = permutation_cost(cost, n, &permutation);
    Ok(Assignment { permutation, total_cost })
}
