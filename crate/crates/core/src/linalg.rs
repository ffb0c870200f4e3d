//! Sparse assembly plus the two linear solvers used by the time steppers.
//!
//! All system matrices are nearest-neighbour operators on a masked grid, so a
//! banded LU without pivoting is exact and cheap. The matrices are either
//! M-matrices (HJB) or column diagonally dominant (FP), for which elimination
//! without pivoting is stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-wise sparse matrix; each row keeps `(column, value)` pairs sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, rows: vec![Vec::new(); n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.add(i, i, 1.0);
        }
        m
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |e| e.0) {
            Ok(k) => row[k].1 += v,
            Err(k) => row.insert(k, (j, v)),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.rows[i];
        row.binary_search_by_key(&j, |e| e.0).map(|k| row[k].1).unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                t.rows[j].push((i, v));
            }
        }
        t
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &SparseMatrix) -> Self {
        let mut out = self.clone();
        for (i, r) in other.rows.iter().enumerate() {
            for &(j, v) in r {
                out.add(i, j, alpha * v);
            }
        }
        out
    }

    pub fn bandwidth(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// Dense row-major copy, for small problems and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                d[i][j] = v;
            }
        }
        d
    }
}

/// LU factors of a banded matrix, computed without pivoting.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    // Row i stores columns i-bw ..= i+bw.
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.n;
        let bw = a.bandwidth();
        let width = 2 * bw + 1;
        let mut band = vec![0.0; n * width];
        for i in 0..n {
            for &(j, v) in a.row(i) {
                band[i * width + (j + bw - i)] = v;
            }
        }
        let idx = |i: usize, j: usize| i * width + (j + bw - i);
        for k in 0..n {
            let pivot = band[idx(k, k)];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::SolverDiverged(format!("zero pivot at row {k}")));
            }
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let l = band[idx(i, k)] / pivot;
                if l == 0.0 {
                    continue;
                }
                band[idx(i, k)] = l;
                for j in k + 1..=last {
                    band[idx(i, j)] -= l * band[idx(k, j)];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let width = 2 * bw + 1;
        let idx = |i: usize, j: usize| i * width + (j + bw - i);
        let mut x = rhs.to_vec();
        for i in 0..n {
            let start = i.saturating_sub(bw);
            let mut s = x[i];
            for j in start..i {
                s -= self.band[idx(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let end = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=end {
                s -= self.band[idx(i, j)] * x[j];
            }
            x[i] = s / self.band[idx(i, i)];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LinearSolver {
    #[default]
    Direct,
    GaussSeidel { tol: f64, max_iter: usize },
}

impl LinearSolver {
    /// Solves `a x = rhs`, starting Gauss-Seidel from `guess` when given.
    pub fn solve(&self, a: &SparseMatrix, rhs: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        match *self {
            LinearSolver::Direct => Ok(BandedLu::factor(a)?.solve(rhs)),
            LinearSolver::GaussSeidel { tol, max_iter } => gauss_seidel(a, rhs, guess, tol, max_iter),
        }
    }

    /// Convergence tolerance of the solver, zero for the direct solve.
    pub fn tolerance(&self) -> f64 {
        match *self {
            LinearSolver::Direct => 0.0,
            LinearSolver::GaussSeidel { tol, .. } => tol,
        }
    }
}

/// Gauss-Seidel sweeps until the sup-norm update falls below `tol`.
pub fn gauss_seidel(
    a: &SparseMatrix,
    rhs: &[f64],
    guess: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = a.n;
    let mut x = guess.map(|g| g.to_vec()).unwrap_or_else(|| rhs.to_vec());
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    if let Some(i) = diag.iter().position(|d| *d == 0.0) {
        return Err(Error::SolverDiverged(format!("zero diagonal at row {i}")));
    }
    for _ in 0..max_iter {
        let mut change = 0.0f64;
        for i in 0..n {
            let mut s = rhs[i];
            for &(j, v) in a.row(i) {
                if j != i {
                    s -= v * x[j];
                }
            }
            let xi = s / diag[i];
            change = change.max((xi - x[i]).abs());
            x[i] = xi;
        }
        if !change.is_finite() {
            return Err(Error::SolverDiverged("Gauss-Seidel produced non-finite values".into()));
        }
        if change < tol {
            return Ok(x);
        }
    }
    Err(Error::SolverDiverged(format!("Gauss-Seidel did not reach tol {tol:e} in {max_iter} sweeps")))
}
