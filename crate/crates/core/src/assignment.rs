//! Rectangular minimum-cost assignment (Hungarian method with potentials).
//!
//! Forbidden pairs are expressed as `None`. The solver first maximizes the
//! number of allowed pairs, then minimizes their total cost.

/// Solves the assignment problem for a `rows x cols` cost table and returns,
/// for each row, the assigned column (if any).
pub fn min_cost_assignment(costs: &[Vec<Option<f64>>]) -> Vec<Option<usize>> {
    let rows = costs.len();
    let cols = costs.iter().map(Vec::len).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let finite_sum: f64 = costs
        .iter()
        .flatten()
        .flatten()
        .filter(|c| c.is_finite())
        .map(|c| c.abs())
        .sum();
    // Any assignment with one more allowed pair beats all with fewer.
    let blocked = 1.0 + 2.0 * finite_sum;
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        match costs.get(i).and_then(|r| r.get(j)).copied().flatten() {
            Some(c) if c.is_finite() => c,
            _ => blocked,
        }
    };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut result = vec![None; rows];
    for j in 1..=n {
        let i = row_of_col[j];
        if i == 0 || i > rows || j > cols {
            continue;
        }
        if matches!(costs[i - 1].get(j - 1).copied().flatten(), Some(c) if c.is_finite()) {
            result[i - 1] = Some(j - 1);
        }
    }
    result
}

/// Total cost of an assignment returned by [`min_cost_assignment`].
pub fn assignment_cost(costs: &[Vec<Option<f64>>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.and_then(|j| costs[i][j]))
        .sum()
}
