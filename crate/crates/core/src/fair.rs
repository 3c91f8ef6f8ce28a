//! Exact solver for the fair program: maximize total utility over the
//! bipartite matching polytope.
//!
//! The linear program has integral vertices, so it is solved as an assignment
//! problem. Each row gets `m` zero-weight slack columns appended, which makes
//! "leave this user unmatched" a regular assignment; the shortest augmenting
//! path method with dual potentials then returns both an optimal matching and
//! optimal nonnegative LP duals.

use ndarray::ArrayView2;
use thiserror::Error;

use crate::market::{FractionalMatching, MarketInstance};

/// Largest `min(m, n)` accepted by [`brute_force_fair`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairError {
    #[error("instance too large for enumeration: min(m, n) = {0} > {BRUTE_FORCE_LIMIT}")]
    TooLarge(usize),
}

/// Optimal integral matching for arbitrary finite weights together with the
/// duals of `max <g, x>` over the matching polytope:
/// `row_duals[i] + col_duals[j] >= g[i][j]`, both nonnegative, and
/// `sum(row_duals) + sum(col_duals) == value`.
///
/// Edges with non-positive weight are never reported as matched.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    pub value: f64,
    pub row_duals: Vec<f64>,
    pub col_duals: Vec<f64>,
}

impl Assignment {
    pub fn dual_value(&self) -> f64 {
        self.row_duals.iter().sum::<f64>() + self.col_duals.iter().sum::<f64>()
    }
}

/// Maximum-weight bipartite matching (not necessarily perfect).
///
/// Negative weights behave like zero. Ties are broken towards the lowest
/// column index while rows are inserted in increasing order.
pub fn max_weight_matching(weights: ArrayView2<'_, f64>) -> Assignment {
    let (m, n) = weights.dim();
    if m == 0 {
        return Assignment { row_to_col: vec![], value: 0.0, row_duals: vec![], col_duals: vec![0.0; n] };
    }
    let gain = |i: usize, j: usize| weights[[i, j]].max(0.0);
    let shift = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| gain(i, j)).fold(0.0, f64::max);
    let cols = n + m;
    // cost = shift - gain on real columns, shift on slack columns; all >= 0.
    let cost = |i: usize, j: usize| if j < n { shift - gain(i, j) } else { shift };

    // 1-based potentials and matching as in the classic O(m^2 (n + m))
    // shortest augmenting path formulation; index 0 is a sentinel.
    let mut pot_row = vec![0.0f64; m + 1];
    let mut pot_col = vec![0.0f64; cols + 1];
    let mut col_owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for row in 1..=m {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - pot_row[i0] - pot_col[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    pot_row[col_owner[j]] += delta;
                    pot_col[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; m];
    let mut value = 0.0;
    for (j, &owner) in col_owner.iter().enumerate().take(n + 1).skip(1) {
        if owner > 0 && gain(owner - 1, j - 1) > 0.0 {
            row_to_col[owner - 1] = Some(j - 1);
            value += gain(owner - 1, j - 1);
        }
    }
    let row_duals = (1..=m).map(|i| (shift - pot_row[i]).max(0.0)).collect();
    let col_duals = (1..=n).map(|j| (-pot_col[j]).max(0.0)).collect();
    Assignment { row_to_col, value, row_duals, col_duals }
}

/// Optimal fair matching. The matching is integral.
#[derive(Debug, Clone, PartialEq)]
pub struct FairSolution {
    pub matching: FractionalMatching,
    pub value: f64,
    pub assignment: Assignment,
}

pub fn solve_fair(inst: &MarketInstance) -> FairSolution {
    let assignment = max_weight_matching(inst.weights());
    let matching = FractionalMatching::from_assignment(inst, &assignment.row_to_col);
    FairSolution { value: assignment.value, matching, assignment }
}

/// Optimal fair value by enumerating every partial injection of the smaller
/// side into the larger one.
pub fn brute_force_fair(inst: &MarketInstance) -> Result<f64, FairError> {
    let w = inst.weights();
    let w = if inst.m() <= inst.n() { w } else { w.reversed_axes() };
    let (small, large) = w.dim();
    if small > BRUTE_FORCE_LIMIT {
        return Err(FairError::TooLarge(small));
    }

    fn search(k: usize, w: ArrayView2<'_, f64>, taken: &mut [bool]) -> f64 {
        if k == w.nrows() {
            return 0.0;
        }
        let mut best = search(k + 1, w, taken);
        for c in 0..w.ncols() {
            if !taken[c] {
                taken[c] = true;
                best = best.max(w[[k, c]] + search(k + 1, w, taken));
                taken[c] = false;
            }
        }
        best
    }

    let mut taken = vec![false; large];
    Ok(search(0, w, &mut taken))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{make_instance, InstanceSampler};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn check_duals(weights: ArrayView2<'_, f64>, a: &Assignment) {
        for ((i, j), &g) in weights.indexed_iter() {
            assert!(a.row_duals[i] + a.col_duals[j] >= g - 1e-9, "dual infeasible at ({i},{j})");
        }
        assert!(a.row_duals.iter().chain(&a.col_duals).all(|&d| d >= 0.0));
        assert_abs_diff_eq!(a.dual_value(), a.value, epsilon = 1e-9);
    }

    #[test]
    fn identity_weights() {
        let inst = make_instance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let sol = solve_fair(&inst);
        assert_eq!(sol.value, 2.0);
        assert_eq!(sol.matching.x(), Array2::<f64>::eye(2).view());
    }

    #[test]
    fn anti_diagonal_wins() {
        let inst = make_instance(&[vec![0.8, 0.7], vec![0.6, 0.2]]).unwrap();
        let sol = solve_fair(&inst);
        assert_abs_diff_eq!(sol.value, 1.3, epsilon = 1e-12);
        assert_eq!(sol.assignment.row_to_col, vec![Some(1), Some(0)]);
        check_duals(inst.weights(), &sol.assignment);
    }

    #[test]
    fn single_row_takes_its_maximum() {
        let inst = make_instance(&[vec![0.3, 0.9]]).unwrap();
        let sol = solve_fair(&inst);
        assert_abs_diff_eq!(sol.value, 0.9, epsilon = 1e-15);
        assert_eq!(sol.assignment.row_to_col, vec![Some(1)]);
    }

    #[test]
    fn tall_instance_leaves_rows_unmatched() {
        let inst = make_instance(&[vec![0.2], vec![0.9], vec![0.5]]).unwrap();
        let sol = solve_fair(&inst);
        assert_eq!(sol.assignment.row_to_col, vec![None, Some(0), None]);
        check_duals(inst.weights(), &sol.assignment);
    }

    #[test]
    fn negative_and_zero_weights_never_matched() {
        let g = array![[-0.5, 0.0], [0.0, -1.0]];
        let a = max_weight_matching(g.view());
        assert_eq!(a.row_to_col, vec![None, None]);
        assert_eq!(a.value, 0.0);
        check_duals(g.view(), &a);
    }

    #[test]
    fn weights_above_one_are_fine() {
        let g = array![[3.0, 1.0], [2.5, 0.1]];
        let a = max_weight_matching(g.view());
        assert_abs_diff_eq!(a.value, 3.5, epsilon = 1e-12);
        check_duals(g.view(), &a);
    }

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_fair(&make_instance(&[vec![0.5]]).unwrap()).unwrap(), 0.5);
        assert_eq!(brute_force_fair(&make_instance(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap(), 2.0);
        let s = InstanceSampler::beta(2.0, 2.0, 11).unwrap();
        let inst = s.sample(4, 4).unwrap();
        assert_abs_diff_eq!(brute_force_fair(&inst).unwrap(), solve_fair(&inst).value, epsilon = 1e-9);
        let big = make_instance(&vec![vec![0.5; 9]; 9]).unwrap();
        assert_eq!(brute_force_fair(&big), Err(FairError::TooLarge(9)));
    }

    #[test]
    fn duals_certify_random_instances() {
        let s = InstanceSampler::beta(2.0, 2.0, 5).unwrap();
        for t in 0..100 {
            let (m, n) = (1 + (t % 6) as usize, 1 + (t / 6 % 6) as usize);
            let inst = s.sample_trial(t, m, n).unwrap();
            let sol = solve_fair(&inst);
            check_duals(inst.weights(), &sol.assignment);
            sol.matching.check_feasible().unwrap();
        }
    }
}
