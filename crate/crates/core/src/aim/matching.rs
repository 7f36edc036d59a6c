//! Minimum-cost bipartite assignment (Kuhn-Munkres with row/column potentials).

use crate::error::{Error, Result};

/// Pairs `(row, col)` sorted by row, covering `min(N, M)` rows/columns at minimum
/// total cost. `cost` is row-major `[N][M]`.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|row| row.len() != m) {
        return Err(Error::shape("ragged cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::validation("cost matrix has non-finite entries"));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if n <= m {
        Ok(solve(n, m, |i, j| cost[i][j]))
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(m, n, |i, j| cost[j][i]).into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Assigns every one of `n` rows to a distinct column out of `m >= n`.
fn solve(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-indexed; column 0 is a virtual start node
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; m + 1];
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
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
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
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// Sum of matched costs, accumulated in row order.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(hungarian_match(&[vec![0.0]]).unwrap(), vec![(0, 0)]);
        let cost = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let pairs = hungarian_match(&cost).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&cost, &pairs), 2.0);
        assert!(hungarian_match(&[]).unwrap().is_empty());
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = vec![vec![5.0, 1.0, 3.0]];
        assert_eq!(hungarian_match(&wide).unwrap(), vec![(0, 1)]);
        let tall = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian_match(&tall).unwrap(), vec![(1, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian_match(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
    }
}
