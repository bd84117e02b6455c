//! Rectangular linear assignment (Hungarian / Kuhn–Munkres).
//!
//! Shortest-augmenting-path formulation with row and column potentials,
//! `O(n^2 m)` for an `n x m` matrix with `n <= m`. Wider-than-tall inputs are
//! solved on the transpose.

use super::EvalError;

/// Cost marking a forbidden pair. Real costs must stay well below it; pairs
/// assigned at this cost are dropped by the gated matchers.
pub const FORBIDDEN_COST: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of `min(n, m)` pairs.
///
/// Rows are inserted in increasing order and, among equally short
/// augmenting paths, the lowest column index is taken first, so the result
/// is a pure function of the matrix.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, EvalError> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment::default());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(EvalError::RaggedMatrix);
    }
    if m == 0 {
        return Ok(Assignment::default());
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(EvalError::NonFiniteCost);
    }
    if n <= m {
        Ok(solve(n, m, |i, j| cost[i][j]))
    } else {
        let t = solve(m, n, |i, j| cost[j][i]);
        let mut pairs: Vec<_> = t.pairs.into_iter().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        Ok(Assignment { pairs, total_cost: t.total_cost })
    }
}

fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Assignment {
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| row_of[j] != 0).map(|j| (row_of[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| a(i, j)).sum();
    Assignment { pairs, total_cost }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injective row -> column maps.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, rows_left: usize, best: &mut f64) {
            let (n, m) = (cost.len(), cost[0].len());
            if row == n {
                *best = best.min(acc);
                return;
            }
            // Rows may stay unassigned only while columns are scarce.
            let cols_free = used.iter().filter(|u| !**u).count();
            if rows_left > cols_free {
                rec(cost, row + 1, used, acc, rows_left - 1, best);
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[row][j], rows_left - 1, best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost[0].len()], 0.0, cost.len(), &mut best);
        best
    }

    #[test]
    fn single_cell() {
        let a = hungarian(&[vec![3.5]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 3.5);
    }

    #[test]
    fn two_by_two() {
        let a = hungarian(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 4.0);
    }

    #[test]
    fn empty_and_errors() {
        assert_eq!(hungarian(&[]).unwrap(), Assignment::default());
        assert_eq!(hungarian(&[vec![], vec![]]).unwrap(), Assignment::default());
        assert_eq!(hungarian(&[vec![1.0], vec![1.0, 2.0]]), Err(EvalError::RaggedMatrix));
        assert_eq!(hungarian(&[vec![f64::NAN]]), Err(EvalError::NonFiniteCost));
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
        let a = hungarian(&wide).unwrap();
        assert_eq!(a.total_cost, 3.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        let tall: Vec<Vec<f64>> = (0..3).map(|j| wide.iter().map(|r| r[j]).collect()).collect();
        let b = hungarian(&tall).unwrap();
        assert_eq!(b.total_cost, 3.0);
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn six_by_six_against_permutations() {
        let cost: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| ((i * 7 + j * 13) % 11) as f64 + 0.5 * ((i + j) % 3) as f64).collect()).collect();
        assert_eq!(hungarian(&cost).unwrap().total_cost, brute_force(&cost));
    }

    proptest! {
        #[test]
        fn optimal_vs_brute_force(n in 1usize..=6, m in 1usize..=6, seed in prop::collection::vec(0u32..50, 36)) {
            let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|j| seed[i * 6 + j] as f64).collect()).collect();
            let a = hungarian(&cost).unwrap();
            prop_assert_eq!(a.pairs.len(), n.min(m));
            prop_assert_eq!(a.total_cost, brute_force(&cost));
            prop_assert_eq!(hungarian(&cost).unwrap(), a);
        }
    }
}
