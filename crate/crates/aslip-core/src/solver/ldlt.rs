//! Sparse LDL^T factorization of symmetric quasidefinite matrices.
//!
//! The augmented KKT systems solved here have a positive diagonal block for
//! the variables and a negative diagonal block for the constraint rows;
//! such matrices factor as L D L^T with nonzero (signed) pivots under any
//! symmetric permutation, so no pivoting is needed. The implementation is
//! the classic up-looking algorithm driven by the elimination tree, with
//! the matrix supplied as its upper triangle in compressed sparse column
//! form.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdltError {
    #[error("column {0} is missing its diagonal entry")]
    MissingDiagonal(usize),
    #[error("matrix is not upper triangular at column {col}, row {row}")]
    NotUpper { col: usize, row: usize },
    #[error("rows of column {0} are not strictly increasing")]
    UnsortedColumn(usize),
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
}

/// Upper triangle (including the diagonal) of a symmetric matrix in CSC
/// form, rows strictly increasing within each column and the diagonal
/// present in every column.
#[derive(Debug, Clone)]
pub struct SymCsc {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl SymCsc {
    pub fn validate(&self) -> Result<(), LdltError> {
        for j in 0..self.n {
            let lo = self.col_ptr[j];
            let hi = self.col_ptr[j + 1];
            if lo == hi || self.row_idx[hi - 1] != j {
                return Err(LdltError::MissingDiagonal(j));
            }
            for p in lo..hi {
                if self.row_idx[p] > j {
                    return Err(LdltError::NotUpper {
                        col: j,
                        row: self.row_idx[p],
                    });
                }
                if p > lo && self.row_idx[p] <= self.row_idx[p - 1] {
                    return Err(LdltError::UnsortedColumn(j));
                }
            }
        }
        Ok(())
    }

    /// y = A x for the full symmetric matrix.
    pub fn mul_sym(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                let v = self.vals[p];
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }
}

/// Reusable factorization workspace; the symbolic analysis is done once per
/// sparsity pattern and numeric refactorization reuses it.
#[derive(Debug)]
pub struct Ldlt {
    n: usize,
    parent: Vec<isize>,
    /// Column pointers of L (strictly lower triangle).
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // scratch
    lnext: Vec<usize>,
    y_vals: Vec<f64>,
    y_marked: Vec<bool>,
    y_idx: Vec<usize>,
    elim: Vec<usize>,
}

impl Ldlt {
    /// Symbolic analysis: elimination tree and column counts of L.
    pub fn analyze(mat: &SymCsc) -> Result<Self, LdltError> {
        mat.validate()?;
        let n = mat.n;
        let mut parent = vec![-1isize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for i in 0..n {
            flag[i] = i;
            for p in mat.col_ptr[i]..mat.col_ptr[i + 1] {
                let mut j = mat.row_idx[p];
                while j != i && flag[j] != i {
                    if parent[j] == -1 {
                        parent[j] = i as isize;
                    }
                    lnz[j] += 1;
                    flag[j] = i;
                    j = parent[j] as usize;
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + lnz[j];
        }
        let nnz = lp[n];
        Ok(Ldlt {
            n,
            parent,
            lp,
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            lnext: vec![0; n],
            y_vals: vec![0.0; n],
            y_marked: vec![false; n],
            y_idx: vec![0; n],
            elim: vec![0; n],
        })
    }

    /// Numeric factorization; `mat` must have the pattern given to
    /// [`Ldlt::analyze`].
    pub fn factor(&mut self, mat: &SymCsc) -> Result<(), LdltError> {
        let n = self.n;
        self.lnext.copy_from_slice(&self.lp[..n]);
        for i in 0..n {
            // Gather the sparse right-hand side A[0..i, i] and its fill
            // pattern (etree reach), segments stored so that popping yields
            // descendants before ancestors.
            let mut nnz_y = 0usize;
            self.d[i] = 0.0;
            for p in mat.col_ptr[i]..mat.col_ptr[i + 1] {
                let r = mat.row_idx[p];
                if r == i {
                    self.d[i] = mat.vals[p];
                    continue;
                }
                self.y_vals[r] = mat.vals[p];
                let mut len = 0usize;
                let mut j = r;
                while j != i && !self.y_marked[j] {
                    self.y_marked[j] = true;
                    self.elim[len] = j;
                    len += 1;
                    j = self.parent[j] as usize;
                }
                while len > 0 {
                    len -= 1;
                    self.y_idx[nnz_y] = self.elim[len];
                    nnz_y += 1;
                }
            }
            // Triangular solve along the reach; builds row i of L.
            while nnz_y > 0 {
                nnz_y -= 1;
                let j = self.y_idx[nnz_y];
                self.y_marked[j] = false;
                let yj = self.y_vals[j];
                self.y_vals[j] = 0.0;
                for p in self.lp[j]..self.lnext[j] {
                    self.y_vals[self.li[p]] -= self.lx[p] * yj;
                }
                let lij = yj * self.dinv[j];
                self.d[i] -= yj * lij;
                let slot = self.lnext[j];
                self.li[slot] = i;
                self.lx[slot] = lij;
                self.lnext[j] += 1;
            }
            if self.d[i] == 0.0 || !self.d[i].is_finite() {
                return Err(LdltError::ZeroPivot(i));
            }
            self.dinv[i] = 1.0 / self.d[i];
        }
        Ok(())
    }

    /// Solves `A x = b` in place using the current factorization.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let bj = b[j];
            if bj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    b[self.li[p]] -= self.lx[p] * bj;
                }
            }
        }
        for j in 0..n {
            b[j] *= self.dinv[j];
        }
        for j in (0..n).rev() {
            let mut acc = b[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * b[self.li[p]];
            }
            b[j] = acc;
        }
    }

    /// Number of stored off-diagonal entries of L (fill).
    pub fn l_nnz(&self) -> usize {
        self.lx.len()
    }
}
