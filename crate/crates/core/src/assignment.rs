//! Rectangular linear assignment (Hungarian algorithm, shortest augmenting
//! path with potentials), O(n³) in the larger side.

/// Minimum-cost assignment. Returns, for every row, the assigned column or
/// `None` when there are more rows than columns. Costs must be finite.
pub fn solve_min(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    assert!(cost.iter().all(|r| r.len() == cols), "ragged cost matrix");
    assert!(
        cost.iter().flatten().all(|c| c.is_finite()),
        "assignment costs must be finite"
    );
    if cols == 0 {
        return vec![None; rows];
    }

    // square padding with zero-cost dummies
    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j]
        } else {
            0.0
        }
    };

    // 1-based potentials; p[j] is the row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut out = vec![None; rows];
    for (j, &i) in p.iter().enumerate().skip(1) {
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Maximum-total-score assignment.
pub fn solve_max(score: &[Vec<f64>]) -> Vec<Option<usize>> {
    let neg: Vec<Vec<f64>> = score
        .iter()
        .map(|r| r.iter().map(|s| -s).collect())
        .collect();
    solve_min(&neg)
}

/// Sum of the chosen entries.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}
