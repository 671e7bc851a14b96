use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// An injective assignment of ground-truth rows to query columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// `(gt_index, query_index)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of every row of a `g × m` cost matrix (`g ≤ m`) to
/// a distinct column, via shortest augmenting paths with potentials.
pub fn hungarian(cost: &Matrix) -> Result<MatchAssignment> {
    let (g, m) = cost.shape();
    if g > m {
        return Err(Error::input(format!(
            "{g} ground truths but only {m} queries"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Assignment(
            "cost matrix has non-finite entries".into(),
        ));
    }
    if g == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=g {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Ok(MatchAssignment { pairs, total_cost })
}
