//! Exact minimum-cost bipartite assignment.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Optimal injective map from cost-matrix columns to rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `rows[j]` is the row assigned to column `j`.
    pub rows: Vec<usize>,
    pub total: f64,
}

/// Shortest-augmenting-path Hungarian algorithm with potentials, O(k²·n),
/// for a `k×n` matrix with `k ≤ n`. Returns the column chosen for each row.
fn solve(cost: &[f64], k: usize, n: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=k {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
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
    let mut out = vec![0; k];
    for j in 1..=n {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Minimum total over the free columns (`cols`) and rows (`rows`).
fn optimum(cost: &Tensor, cols: &[usize], rows: &[usize]) -> f64 {
    if cols.is_empty() {
        return 0.0;
    }
    let k_total = cost.shape()[1];
    let (k, n) = (cols.len(), rows.len());
    let mut sub = Vec::with_capacity(k * n);
    for &c in cols {
        for &r in rows {
            sub.push(cost.data()[r * k_total + c]);
        }
    }
    let pick = solve(&sub, k, n);
    pick.iter().enumerate().map(|(i, &j)| sub[i * n + j]).sum()
}

/// Optimal assignment for an `N×K` cost matrix (`N` predictions, `K ≤ N`
/// targets). Among optimal assignments the lexicographically smallest row
/// vector (in column order) is returned.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let (n, k) = match *cost.shape() {
        [n, k] => (n, k),
        ref s => return shape_err("hungarian_match", format!("expected N×K, got {s:?}")),
    };
    if k > n {
        return shape_err("hungarian_match", format!("{k} targets exceed {n} predictions"));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    let all_cols: Vec<usize> = (0..k).collect();
    let all_rows: Vec<usize> = (0..n).collect();
    let best = optimum(cost, &all_cols, &all_rows);
    let scale = cost.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * k as f64;

    // Fix columns one at a time to the smallest row that keeps the optimum.
    let mut rows = Vec::with_capacity(k);
    let mut fixed = 0.0;
    let mut free_rows = all_rows;
    for j in 0..k {
        let rest: Vec<usize> = (j + 1..k).collect();
        let mut chosen = None;
        for (pos, &r) in free_rows.iter().enumerate() {
            let c = cost.data()[r * k + j];
            let remaining: Vec<usize> = free_rows.iter().copied().filter(|&x| x != r).collect();
            if fixed + c + optimum(cost, &rest, &remaining) <= best + tol {
                chosen = Some((pos, r, c));
                break;
            }
        }
        let (pos, r, c) = chosen.expect("some row attains the optimum");
        fixed += c;
        rows.push(r);
        free_rows.remove(pos);
    }
    let total = rows.iter().enumerate().map(|(j, &r)| cost.data()[r * k + j]).sum();
    Ok(Assignment { rows, total })
}
