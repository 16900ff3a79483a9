//! Sparse nonlinear-programming interface: problems expose their objective,
//! constraints, and a fixed Jacobian sparsity pattern; the solver consumes
//! them through [`NlpProblem`]. [`check_jacobian`] verifies hand-coded
//! derivatives against central differences, including a full scan for
//! nonzeros missing from the declared pattern.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("evaluation failed: {0}")]
pub struct EvalError(pub String);

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("row {row} has unsorted or duplicate column at position {pos}")]
    Unsorted { row: usize, pos: usize },
    #[error("row {row} references column {col} but there are only {nvar} variables")]
    OutOfRange { row: usize, col: usize, nvar: usize },
}

/// Row-major sparse structure of a constraint Jacobian. Column indices are
/// strictly increasing within each row; values arrays are laid out in the
/// same order.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    nvar: usize,
    row_start: Vec<usize>,
    cols: Vec<usize>,
}

impl SparsityPattern {
    pub fn from_rows(nvar: usize, rows: &[Vec<usize>]) -> Result<Self, PatternError> {
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        row_start.push(0);
        for (r, row) in rows.iter().enumerate() {
            for (i, &c) in row.iter().enumerate() {
                if c >= nvar {
                    return Err(PatternError::OutOfRange {
                        row: r,
                        col: c,
                        nvar,
                    });
                }
                if i > 0 && row[i - 1] >= c {
                    return Err(PatternError::Unsorted { row: r, pos: i });
                }
            }
            cols.extend_from_slice(row);
            row_start.push(cols.len());
        }
        Ok(SparsityPattern {
            nvar,
            row_start,
            cols,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.nvar
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Column indices of row `r`.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.cols[self.row_start[r]..self.row_start[r + 1]]
    }

    /// Offset of row `r` into the values array.
    pub fn row_offset(&self, r: usize) -> usize {
        self.row_start[r]
    }

    /// Position of `(row, col)` in the values array, if present.
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let r = self.row(row);
        r.binary_search(&col).ok().map(|i| self.row_start[row] + i)
    }
}

/// A smooth NLP
///
/// ```text
///   min f(x)  s.t.  cl <= c(x) <= cu,  xl <= x <= xu
/// ```
///
/// with equalities encoded as `cl == cu`. Evaluations may fail on states
/// outside the domain (the solver treats failures as infinitely bad points
/// and backtracks), but must succeed on the initial guess.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_cons(&self) -> usize;
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn con_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn jacobian_pattern(&self) -> &SparsityPattern;
    fn initial_guess(&self) -> Vec<f64>;
    fn objective(&self, x: &[f64]) -> Result<f64, EvalError>;
    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<(), EvalError>;
    fn constraints(&self, x: &[f64], c: &mut [f64]) -> Result<(), EvalError>;
    /// Jacobian values in the order of [`SparsityPattern`] row storage.
    fn jacobian_values(&self, x: &[f64], vals: &mut [f64]) -> Result<(), EvalError>;
}

/// Outcome classification for a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Feasible and stationary within tolerances.
    Optimal,
    /// Feasible but stationarity not established.
    Feasible,
    /// Penalty growth exhausted without reaching feasibility.
    Infeasible,
    IterationLimit,
    Error,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Independently re-evaluated maximum constraint violation at `x`.
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub message: String,
}

/// Tuning knobs for the built-in augmented-Lagrangian solver.
///
/// The defaults are sized for the collocation problems in this crate;
/// they are deliberately conservative so that acceptance checks run the
/// same way on every machine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Feasibility tolerance on the true constraint violation.
    pub tol_con: f64,
    /// Tolerance on the projected gradient of the Lagrangian.
    pub tol_grad: f64,
    pub max_outer: usize,
    /// Cap on Newton iterations per outer iteration.
    pub max_inner: usize,
    pub rho_init: f64,
    pub rho_max: f64,
    /// First-outer-iteration inner tolerance; tightened geometrically.
    pub omega_init: f64,
    /// First-outer-iteration feasibility gate for multiplier updates.
    pub eta_init: f64,
    /// Base primal regularization in the Gauss-Newton model.
    pub sigma_base: f64,
    pub delta_init: f64,
    pub delta_min: f64,
    /// Levenberg damping above this aborts the inner loop as stalled.
    pub delta_max: f64,
    /// Log one line per outer iteration to stderr.
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_con: 1e-8,
            tol_grad: 1e-6,
            max_outer: 60,
            max_inner: 40,
            rho_init: 100.0,
            rho_max: 1e9,
            omega_init: 1e-2,
            eta_init: 1e-1,
            sigma_base: 1e-4,
            delta_init: 1e-4,
            delta_min: 1e-6,
            delta_max: 1e8,
            verbose: false,
        }
    }
}

/// Report from [`check_jacobian`].
#[derive(Debug, Clone)]
pub struct JacobianCheck {
    /// Worst relative error over declared entries.
    pub max_rel_error: f64,
    pub worst_entry: Option<(usize, usize)>,
    /// Finite-difference nonzeros not covered by the pattern.
    pub missing: Vec<(usize, usize, f64)>,
    /// Worst relative error of the objective gradient.
    pub grad_max_rel_error: f64,
}

impl JacobianCheck {
    /// All declared entries match and no nonzero fell outside the pattern.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.missing.is_empty() && self.grad_max_rel_error <= tol
    }
}

/// Entries with both analytic and differenced magnitude under this floor
/// count as matching; below it the FD quotient is pure noise.
pub const FD_ABS_FLOOR: f64 = 1e-8;
/// A differenced entry above this magnitude outside the pattern counts as a
/// missing nonzero.
const FD_MISS_THRESHOLD: f64 = 1e-6;

fn rel_error(a: f64, fd: f64) -> f64 {
    let denom = a.abs().max(fd.abs());
    if denom < FD_ABS_FLOOR {
        0.0
    } else {
        (a - fd).abs() / denom
    }
}

/// Compares the analytic Jacobian and gradient against central differences
/// at `x`, and scans every column for nonzeros the pattern fails to declare.
pub fn check_jacobian(p: &dyn NlpProblem, x: &[f64]) -> Result<JacobianCheck, EvalError> {
    let n = p.num_vars();
    let m = p.num_cons();
    let pattern = p.jacobian_pattern();
    let mut vals = vec![0.0; pattern.nnz()];
    p.jacobian_values(x, &mut vals)?;
    let mut grad = vec![0.0; n];
    p.gradient(x, &mut grad)?;

    let mut xp = x.to_vec();
    let mut c_plus = vec![0.0; m];
    let mut c_minus = vec![0.0; m];
    let mut max_rel_error: f64 = 0.0;
    let mut worst_entry = None;
    let mut missing = Vec::new();
    let mut grad_max_rel_error: f64 = 0.0;

    for j in 0..n {
        let h = (1e-6 * x[j].abs()).max(1e-8);
        xp[j] = x[j] + h;
        p.constraints(&xp, &mut c_plus)?;
        let f_plus = p.objective(&xp)?;
        xp[j] = x[j] - h;
        p.constraints(&xp, &mut c_minus)?;
        let f_minus = p.objective(&xp)?;
        xp[j] = x[j];

        let gfd = (f_plus - f_minus) / (2.0 * h);
        grad_max_rel_error = grad_max_rel_error.max(rel_error(grad[j], gfd));

        for r in 0..m {
            let fd = (c_plus[r] - c_minus[r]) / (2.0 * h);
            match pattern.find(r, j) {
                Some(k) => {
                    let e = rel_error(vals[k], fd);
                    if e > max_rel_error {
                        max_rel_error = e;
                        worst_entry = Some((r, j));
                    }
                }
                None => {
                    if fd.abs() > FD_MISS_THRESHOLD {
                        missing.push((r, j, fd));
                    }
                }
            }
        }
    }

    Ok(JacobianCheck {
        max_rel_error,
        worst_entry,
        missing,
        grad_max_rel_error,
    })
}
