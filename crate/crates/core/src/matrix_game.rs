//! Nash equilibria of two-player zero-sum matrix games via the minimax
//! linear program, solved with a dense tableau simplex (Bland's rule).
//!
//! The row player maximizes, the column player minimizes. The payoff is
//! shifted so every entry is at least one, which makes the column player's
//! program `max 1ᵀy s.t. By ≤ 1, y ≥ 0` feasible at the origin. The row
//! player's strategy is read off the slack reduced costs of the optimal
//! tableau.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const DEFAULT_NE_TOL: f64 = 1e-9;

const PIVOT_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGameSolution {
    /// Max-player mixed strategy over rows.
    pub row: Vec<f64>,
    /// Min-player mixed strategy over columns.
    pub col: Vec<f64>,
    pub value: f64,
}

impl MatrixGameSolution {
    /// `(row deviation gain, column deviation gain)`: how much either
    /// player gains by unilaterally switching to a pure strategy.
    pub fn exploitability(&self, payoff: ArrayView2<f64>) -> (f64, f64) {
        let (m, n) = payoff.dim();
        let best_row = (0..m)
            .map(|i| (0..n).map(|j| payoff[[i, j]] * self.col[j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let best_col = (0..n)
            .map(|j| (0..m).map(|i| payoff[[i, j]] * self.row[i]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        (best_row - self.value, self.value - best_col)
    }
}

/// Solves `max_x min_y xᵀ A y`. Both players' gains from deviating are
/// checked against `tol` before returning.
pub fn ne_matrix_game(payoff: ArrayView2<f64>, tol: f64) -> Result<MatrixGameSolution> {
    let (m, n) = payoff.dim();
    if m == 0 || n == 0 {
        return Err(Error::input("payoff matrix is empty"));
    }
    if payoff.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("payoff matrix has non-finite entries"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::param("tol", "must be positive"));
    }
    let lo = payoff.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = 1.0 - lo;

    // Tableau rows 0..m are constraints, row m the objective.
    // Columns 0..n are y', n..n+m slacks, n+m the right-hand side.
    let width = n + m + 1;
    let mut t = Array2::<f64>::zeros((m + 1, width));
    for i in 0..m {
        for j in 0..n {
            t[[i, j]] = payoff[[i, j]] + shift;
        }
        t[[i, n + i]] = 1.0;
        t[[i, width - 1]] = 1.0;
    }
    for j in 0..n {
        t[[m, j]] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    while let Some(enter) = (0..n + m).find(|&j| t[[m, j]] < -PIVOT_EPS) {
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let a = t[[i, enter]];
            if a > PIVOT_EPS {
                let ratio = t[[i, width - 1]] / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - PIVOT_EPS
                            || ((ratio - lr).abs() <= PIVOT_EPS && basis[i] < basis[li])
                        {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
        }
        // B > 0 keeps the feasible region bounded.
        let (pivot_row, _) = leave.ok_or_else(|| Error::input("matrix game LP unbounded"))?;
        pivot(&mut t, pivot_row, enter);
        basis[pivot_row] = enter;
    }

    let total = t[[m, width - 1]];
    let mut col = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            col[b] = t[[i, width - 1]].max(0.0);
        }
    }
    let mut row: Vec<f64> = (0..m).map(|i| t[[m, n + i]].max(0.0)).collect();
    normalize(&mut col);
    normalize(&mut row);
    let sol = MatrixGameSolution {
        row,
        col,
        value: 1.0 / total - shift,
    };
    let (gain_row, gain_col) = sol.exploitability(payoff);
    if gain_row > tol || gain_col > tol {
        return Err(Error::input(format!(
            "matrix game solve missed tolerance {tol}: deviation gains ({gain_row:e}, {gain_col:e})"
        )));
    }
    Ok(sol)
}

fn pivot(t: &mut Array2<f64>, r: usize, c: usize) {
    let (rows, cols) = t.dim();
    let p = t[[r, c]];
    for j in 0..cols {
        t[[r, j]] /= p;
    }
    for i in 0..rows {
        if i == r {
            continue;
        }
        let f = t[[i, c]];
        if f != 0.0 {
            for j in 0..cols {
                t[[i, j]] -= f * t[[r, j]];
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}
