//! Tridiagonal matrices acting on the interior nodes of a grid.

use crate::error::{Error, Result};

/// Square tridiagonal matrix of size `m`.
///
/// `lower[i]` multiplies `x[i-1]` in row `i` (`lower[0]` unused), `upper[i]`
/// multiplies `x[i+1]` (`upper[m-1]` unused).
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(m: usize) -> Self {
        Tridiag { lower: vec![0.0; m], diag: vec![0.0; m], upper: vec![0.0; m] }
    }

    pub fn size(&self) -> usize {
        self.diag.len()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        let m = self.size();
        debug_assert_eq!(x.len(), m);
        for i in 0..m {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.lower[i] * x[i - 1];
            }
            if i + 1 < m {
                s += self.upper[i] * x[i + 1];
            }
            y[i] = s;
        }
    }

    pub fn transpose(&self) -> Tridiag {
        let m = self.size();
        let mut t = Tridiag::zeros(m);
        t.diag.clone_from(&self.diag);
        for i in 0..m {
            if i > 0 {
                t.lower[i] = self.upper[i - 1];
            }
            if i + 1 < m {
                t.upper[i] = self.lower[i + 1];
            }
        }
        t
    }

    /// `c0 * I + c1 * self`.
    pub fn affine(&self, c0: f64, c1: f64) -> Tridiag {
        Tridiag {
            lower: self.lower.iter().map(|v| c1 * v).collect(),
            diag: self.diag.iter().map(|v| c0 + c1 * v).collect(),
            upper: self.upper.iter().map(|v| c1 * v).collect(),
        }
    }

    pub fn add_diag(&mut self, d: &[f64]) {
        for (a, b) in self.diag.iter_mut().zip(d) {
            *a += b;
        }
    }

    pub fn norm_inf(&self) -> f64 {
        (0..self.size())
            .map(|i| self.lower[i].abs() + self.diag[i].abs() + self.upper[i].abs())
            .fold(0.0, f64::max)
    }

    /// Dense copy, row major.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.size();
        let mut d = vec![vec![0.0; m]; m];
        for i in 0..m {
            d[i][i] = self.diag[i];
            if i > 0 {
                d[i][i - 1] = self.lower[i];
            }
            if i + 1 < m {
                d[i][i + 1] = self.upper[i];
            }
        }
        d
    }

    /// Solve `self · x = rhs` by the Thomas algorithm (no pivoting).
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut ws = ThomasWorkspace::new(self.size());
        let mut x = vec![0.0; rhs.len()];
        ws.solve(self, rhs, &mut x)?;
        Ok(x)
    }
}

/// Scratch buffers for repeated tridiagonal solves of the same size.
#[derive(Debug, Clone)]
pub struct ThomasWorkspace {
    c: Vec<f64>,
    d: Vec<f64>,
}

impl ThomasWorkspace {
    pub fn new(m: usize) -> Self {
        ThomasWorkspace { c: vec![0.0; m], d: vec![0.0; m] }
    }

    pub fn solve(&mut self, a: &Tridiag, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        let m = a.size();
        if rhs.len() != m || x.len() != m {
            return Err(Error::Solver("dimension mismatch in tridiagonal solve".into()));
        }
        if self.c.len() != m {
            self.c.resize(m, 0.0);
            self.d.resize(m, 0.0);
        }
        let tiny = 1e-300;
        let mut beta = a.diag[0];
        if beta.abs() < tiny {
            return Err(Error::Solver("zero pivot in tridiagonal solve".into()));
        }
        self.c[0] = a.upper[0] / beta;
        self.d[0] = rhs[0] / beta;
        for i in 1..m {
            beta = a.diag[i] - a.lower[i] * self.c[i - 1];
            if beta.abs() < tiny || !beta.is_finite() {
                return Err(Error::Solver(format!("zero pivot at row {i} in tridiagonal solve")));
            }
            self.c[i] = if i + 1 < m { a.upper[i] / beta } else { 0.0 };
            self.d[i] = (rhs[i] - a.lower[i] * self.d[i - 1]) / beta;
        }
        x[m - 1] = self.d[m - 1];
        for i in (0..m - 1).rev() {
            x[i] = self.d[i] - self.c[i] * x[i + 1];
        }
        Ok(())
    }
}
