//! Single-machine dense linear algebra on small (k×k) matrices.
//!
//! Everything the pipeline does on one machine lives here: the Cholesky
//! factor of a Gram matrix, the inverse of the resulting triangular factor,
//! and a one-sided Jacobi SVD. All routines are pure functions and are
//! deterministic down to the bit, so they can be called from any worker.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::io::format_f64;

/// Relative pivot tolerance shared by Cholesky and the triangular inverse.
pub const PIVOT_TOLERANCE: f64 = 1e-13;
/// Relative symmetry tolerance accepted by [`cholesky`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Sweep cap for [`small_svd`].
pub const MAX_JACOBI_SWEEPS: usize = 60;
/// A column pair is considered orthogonal once the cosine of the angle
/// between the columns drops below this value.
pub const JACOBI_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not symmetric: |c[{row}][{col}] - c[{col}][{row}]| exceeds tolerance")]
    NotSymmetric { row: usize, col: usize },
    #[error("matrix is singular (diagonal entry {index} = {value:e})")]
    SingularMatrix { index: usize, value: f64 },
    #[error("matrix is not upper triangular (entry [{row}][{col}] is nonzero)")]
    NotUpperTriangular { row: usize, col: usize },
    #[error("Jacobi SVD did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains a non-finite entry at [{row}][{col}]")]
    NonFinite { row: usize, col: usize },
    #[error("malformed matrix text: {0}")]
    Parse(String),
}

/// A dense row-major matrix small enough to be held on one machine.
#[derive(Clone, PartialEq)]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SmallMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::DimensionMismatch(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(LinalgError::DimensionMismatch(format!(
                "ragged rows: expected {cols} columns, found {}",
                bad.len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Result<Self, LinalgError> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Multiplies a row vector by this matrix: `x · self`.
    pub fn left_mul_row(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if x.len() != self.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "row vector of length {} times {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * m;
            }
        }
        Ok(out)
    }

    /// Serializes to the text layout used for R and sigma files: a
    /// `rows cols` header followed by one line of values per row.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for row in self.data.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

impl fmt::Debug for SmallMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmallMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.to_rows())
            .finish()
    }
}

impl FromStr for SmallMatrix {
    type Err = LinalgError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| LinalgError::Parse("missing header line".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| LinalgError::Parse(format!("bad header {header:?}: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(LinalgError::Parse(format!(
                "header must be \"rows cols\", got {header:?}"
            )));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for (i, line) in lines.enumerate() {
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<_, _>>()
                .map_err(|e| LinalgError::Parse(format!("row {i}: {e}")))?;
            if values.len() != cols {
                return Err(LinalgError::Parse(format!(
                    "row {i} has {} values, expected {cols}",
                    values.len()
                )));
            }
            data.extend(values);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::Parse(format!(
                "expected {rows} rows, found {}",
                data.len() / cols.max(1)
            )));
        }
        Self::new(rows, cols, data)
    }
}

/// The result of [`small_svd`]: `m = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriple {
    pub u: SmallMatrix,
    pub sigma: Vec<f64>,
    pub v: SmallMatrix,
}

impl SingularTriple {
    /// Recomputes `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> SmallMatrix {
        let k = self.sigma.len();
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for j in 0..k {
                let v = us.get(i, j) * self.sigma[j];
                us.set(i, j, v);
            }
        }
        matmul(&us, &transpose(&self.v)).expect("factor shapes agree")
    }
}

pub fn transpose(a: &SmallMatrix) -> SmallMatrix {
    let mut t = SmallMatrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            t.set(j, i, a.get(i, j));
        }
    }
    t
}

pub fn matmul(a: &SmallMatrix, b: &SmallMatrix) -> Result<SmallMatrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out = &mut data[i * b.cols..(i + 1) * b.cols];
        for p in 0..a.cols {
            let aip = a.get(i, p);
            for (o, bv) in out.iter_mut().zip(b.row(p)) {
                *o += aip * bv;
            }
        }
    }
    SmallMatrix::new(a.rows, b.cols, data)
}

/// Lower-triangular Cholesky factor `L` with `c = L·Lᵀ`.
///
/// The upper factor used by Cholesky QR is `R = Lᵀ`, since `c = RᵀR`.
pub fn cholesky(c: &SmallMatrix) -> Result<SmallMatrix, LinalgError> {
    if !c.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    let n = c.rows;
    let scale = c.max_abs();
    for i in 0..n {
        for j in (i + 1)..n {
            if (c.get(i, j) - c.get(j, i)).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(LinalgError::NotSymmetric { row: i, col: j });
            }
        }
    }
    let max_diag = (0..n).fold(0.0_f64, |acc, i| acc.max(c.get(i, i)));
    let floor = PIVOT_TOLERANCE * max_diag;

    let mut l = SmallMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = c.get(j, j);
        for p in 0..j {
            pivot -= l.get(j, p) * l.get(j, p);
        }
        if !(pivot > floor) || pivot <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            // lower triangle of c is authoritative
            let mut s = c.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Inverse of an upper-triangular matrix by back substitution.
pub fn upper_tri_inverse(r: &SmallMatrix) -> Result<SmallMatrix, LinalgError> {
    if !r.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "triangular inverse needs a square matrix, got {}x{}",
            r.rows, r.cols
        )));
    }
    let n = r.rows;
    for i in 0..n {
        for j in 0..i {
            if r.get(i, j) != 0.0 {
                return Err(LinalgError::NotUpperTriangular { row: i, col: j });
            }
        }
    }
    let max_diag = (0..n).fold(0.0_f64, |acc, i| acc.max(r.get(i, i).abs()));
    for i in 0..n {
        let d = r.get(i, i);
        if d.abs() <= PIVOT_TOLERANCE * max_diag || d == 0.0 {
            return Err(LinalgError::SingularMatrix { index: i, value: d });
        }
    }

    let mut inv = SmallMatrix::zeros(n, n);
    // Solve r · x = e_j for each column j; x is zero below row j.
    for j in 0..n {
        inv.set(j, j, 1.0 / r.get(j, j));
        for i in (0..j).rev() {
            let mut s = 0.0;
            for p in (i + 1)..=j {
                s += r.get(i, p) * inv.get(p, j);
            }
            inv.set(i, j, -s / r.get(i, i));
        }
    }
    Ok(inv)
}

/// SVD of a square matrix by one-sided Jacobi rotations.
///
/// Columns are orthogonalized pairwise in cyclic-by-row order. Singular
/// values come back sorted non-increasing (ties keep column order), zero
/// singular values are kept, and each column of `u` has its
/// largest-magnitude entry non-negative.
pub fn small_svd(m: &SmallMatrix) -> Result<SingularTriple, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "small_svd needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    let mut work = m.clone();
    let mut v = SmallMatrix::identity(n);

    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (wp, wq) = (work.get(i, p), work.get(i, q));
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Angle that zeroes the (p, q) entry of the 2x2 Gram block.
                let theta = 0.5 * libm::atan2(2.0 * gamma, alpha - beta);
                let (s, c) = (libm::sin(theta), libm::cos(theta));
                rotate_columns(&mut work, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps: MAX_JACOBI_SWEEPS,
        });
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| work.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut u = SmallMatrix::zeros(n, n);
    let mut v_sorted = SmallMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for i in 0..n {
            v_sorted.set(i, dst, v.get(i, src));
            if s > 0.0 {
                u.set(i, dst, work.get(i, src) / s);
            }
        }
        if s == 0.0 {
            missing.push(dst);
        }
    }
    complete_orthonormal_columns(&mut u, &missing);
    apply_sign_convention(&mut u, &mut v_sorted);

    Ok(SingularTriple {
        u,
        sigma,
        v: v_sorted,
    })
}

/// `[a_p a_q] ← [a_p a_q] · [[c, s], [-s, c]]`
fn rotate_columns(a: &mut SmallMatrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..a.rows {
        let (xp, xq) = (a.get(i, p), a.get(i, q));
        a.set(i, p, c * xp + s * xq);
        a.set(i, q, c * xq - s * xp);
    }
}

/// Fills the listed (all-zero) columns of `u` with unit vectors orthogonal
/// to every other column, drawn from the standard basis.
fn complete_orthonormal_columns(u: &mut SmallMatrix, missing: &[usize]) {
    let n = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|j| !missing.contains(j)).collect();
    for &target in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..n {
            let mut x = vec![0.0; n];
            x[e] = 1.0;
            for _ in 0..2 {
                for &j in &filled {
                    let dot: f64 = (0..n).map(|i| u.get(i, j) * x[i]).sum();
                    for (i, xi) in x.iter_mut().enumerate() {
                        *xi -= dot * u.get(i, j);
                    }
                }
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, x));
            }
        }
        let (norm, x) = best.expect("matrix has at least one row");
        for (i, xi) in x.iter().enumerate() {
            u.set(i, target, xi / norm);
        }
        filled.push(target);
    }
}

fn apply_sign_convention(u: &mut SmallMatrix, v: &mut SmallMatrix) {
    for j in 0..u.cols {
        let mut lead = 0;
        for i in 1..u.rows {
            if u.get(i, j).abs() > u.get(lead, j).abs() {
                lead = i;
            }
        }
        if u.get(lead, j) < 0.0 {
            for i in 0..u.rows {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
}
