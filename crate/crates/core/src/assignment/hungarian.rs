//! Rectangular Hungarian solver (shortest augmenting paths with potentials).
//!
//! O(n^2 m) for `n` targets and `m >= n` proposals.

use crate::cost::CostMatrix;
use crate::error::{Error, Result};

use super::Assignment;

/// Minimum-cost injection of targets into proposals.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let n = costs.num_targets();
    let m = costs.num_proposals();
    if n > m {
        return Err(Error::Infeasible { targets: n, proposals: m });
    }
    let matched = solve(costs);
    Ok(Assignment::one_to_one(matched, m))
}

/// `result[i]` is the proposal matched to target `i`. Requires rows <= cols.
fn solve(costs: &CostMatrix) -> Vec<usize> {
    let n = costs.num_targets();
    let m = costs.num_proposals();
    if n == 0 {
        return Vec::new();
    }

    // 1-based; column 0 is the virtual source of each augmenting path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
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

    let mut result = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}
