//! Minimum-cost assignment of ground-truth objects to queries.
//!
//! Shortest augmenting path Hungarian algorithm with row/column potentials,
//! run with ground truths as rows and queries as columns (`M <= Nq`), so the
//! rectangular case needs no padding. Among equally cheap assignments the
//! lexicographically smallest query list (ordered by ground truth) is
//! returned: candidate swaps are restricted to edges that are tight under the
//! optimal potentials and confirmed by re-solving the remaining problem.

use super::{Assignment, CostMatrix};
use crate::error::{Error, Result};

struct Solution {
    /// Column assigned to each row.
    row_to_col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
    total: f64,
}

/// Solves the problem restricted to `rows` and `cols` of `cost(row, col)`.
fn solve(rows: &[usize], cols: &[usize], cost: &dyn Fn(usize, usize) -> f64) -> Solution {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost(rows[i], cols[row_to_col[i]])).sum();
    Solution {
        row_to_col,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
        total,
    }
}

/// Globally optimal assignment of every ground truth (column of `cost`) to
/// a distinct query (row of `cost`).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (nq, m) = (cost.num_queries(), cost.num_targets());
    if m > nq {
        return Err(Error::InvalidArgument(format!(
            "{m} ground truths cannot be matched to {nq} queries"
        )));
    }
    if cost.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if m == 0 {
        return Ok(Assignment::new(Vec::new(), 0.0));
    }
    let c = |gt: usize, q: usize| cost.get(q, gt);
    let scale = cost.values().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * m as f64;

    let mut free_cols: Vec<usize> = (0..nq).collect();
    let mut chosen = vec![0usize; m];
    let all_rows: Vec<usize> = (0..m).collect();
    let mut sol = solve(&all_rows, &free_cols, &c);
    for g in 0..m {
        let rows = &all_rows[g..];
        // `sol` solves rows g.. over free_cols; its first row is g.
        let current = free_cols[sol.row_to_col[0]];
        let mut pick = current;
        for (jpos, &q) in free_cols.iter().enumerate() {
            if q >= current {
                break;
            }
            let reduced = c(g, q) - sol.u[0] - sol.v[jpos];
            if reduced > tol {
                continue;
            }
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != q).collect();
            let rest_total = if rows.len() > 1 {
                solve(&rows[1..], &rest_cols, &c).total
            } else {
                0.0
            };
            if c(g, q) + rest_total <= sol.total + tol {
                pick = q;
                break;
            }
        }
        chosen[g] = pick;
        free_cols.retain(|&x| x != pick);
        if g + 1 < m {
            if pick == current {
                // The remaining rows keep their columns; drop row g and its
                // column from the solution.
                let removed = sol.row_to_col[0];
                sol.row_to_col.remove(0);
                sol.u.remove(0);
                sol.v.remove(removed);
                for col in sol.row_to_col.iter_mut() {
                    if *col > removed {
                        *col -= 1;
                    }
                }
                sol.total -= c(g, pick);
            } else {
                sol = solve(&all_rows[g + 1..], &free_cols, &c);
            }
        }
    }
    let pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(g, &q)| (q, g)).collect();
    let total = pairs.iter().map(|&(q, g)| cost.get(q, g)).sum();
    Ok(Assignment::new(pairs, total))
}
