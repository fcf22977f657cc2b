//! Minimum-cost bipartite assignment (Jonker–Volgenant shortest
//! augmenting path, the classic O(n³) potentials formulation). Used to
//! match ground-truth instances to query slots during set-prediction
//! training.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Assign every column of a `[n_rows, n_cols]` cost matrix
/// (`n_rows ≥ n_cols`) to a distinct row so the summed cost is minimal.
/// Returns the assigned row per column.
pub fn assign_columns(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (rows, cols) = cost.dim();
    if cols == 0 {
        return Ok(Vec::new());
    }
    if rows < cols {
        return Err(Error::shape(format!(
            "assignment needs rows ≥ cols, got {rows} < {cols}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("assignment costs must be finite"));
    }
    // Augment one column at a time; `p[j]` is the column currently matched
    // to row slot j (1-based; 0 = virtual start).
    let (n, m) = (cols, rows);
    let at = |i: usize, j: usize| cost[[j - 1, i - 1]];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(out.iter().all(|&r| r != usize::MAX));
    Ok(out)
}

/// Summed cost of an assignment, accumulated in column order (so two
/// identical assignments always produce bit-identical totals).
pub fn assignment_cost(cost: &Array2<f64>, assigned_rows: &[usize]) -> f64 {
    assigned_rows
        .iter()
        .enumerate()
        .map(|(col, &row)| cost[[row, col]])
        .sum()
}

/// Exhaustive minimum over all injective column→row maps. Exponential;
/// only for verifying the solver on small instances.
pub fn brute_force_min_cost(cost: &Array2<f64>) -> (f64, Vec<usize>) {
    let (rows, cols) = cost.dim();
    assert!(rows >= cols && cols <= 10, "brute force limited to small instances");
    let mut best = (f64::INFINITY, vec![0usize; cols]);
    let mut current = vec![usize::MAX; cols];
    let mut taken = vec![false; rows];
    fn recurse(
        cost: &Array2<f64>,
        col: usize,
        acc: f64,
        current: &mut [usize],
        taken: &mut [bool],
        best: &mut (f64, Vec<usize>),
    ) {
        let (rows, cols) = cost.dim();
        if col == cols {
            if acc < best.0 {
                *best = (acc, current.to_vec());
            }
            return;
        }
        for r in 0..rows {
            if !taken[r] {
                taken[r] = true;
                current[col] = r;
                recurse(cost, col + 1, acc + cost[[r, col]], current, taken, best);
                taken[r] = false;
            }
        }
    }
    recurse(cost, 0, 0.0, &mut current, &mut taken, &mut best);
    // recompute the total in column order to mirror `assignment_cost`
    let total = assignment_cost(cost, &best.1);
    (total, best.1)
}
