//! Brute-force reference SVD and error metrics for checking pipeline output.
//!
//! The reference SVD is a one-sided Jacobi iteration written independently
//! of [`crate::dense::small_svd`]: column-major storage, tangent-form
//! rotations, and its own convergence test. Agreement between the two is
//! therefore evidence rather than a tautology.

use serde::Serialize;
use thiserror::Error;

use crate::io::{DenseRow, SparseRow};
use crate::jobs::SvdResult;

/// Largest `m·n` the oracle will materialize.
pub const ORACLE_CAP: usize = 1_000_000;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("matrix of {rows}x{cols} exceeds the oracle cap of {ORACLE_CAP} entries")]
    TooLarge { rows: usize, cols: usize },
    #[error("reference SVD did not converge in {MAX_SWEEPS} sweeps")]
    NoConvergence,
    #[error("factor rows have {found} columns, expected {expected}")]
    RankMismatch { found: usize, expected: usize },
}

/// Row-major dense matrix used only for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Materializes sparse rows densely. Rows are ordered by key; column `j`
/// of the result is column id `j`.
pub fn materialize(a: &[SparseRow], cols: usize) -> Result<DenseMatrix, OracleError> {
    let mut sorted: Vec<&SparseRow> = a.iter().collect();
    sorted.sort_by_key(|r| r.key);
    let cols = cols.max(a.iter().map(|r| r.width() as usize).max().unwrap_or(0));
    let rows = sorted.len();
    if rows.saturating_mul(cols) > ORACLE_CAP {
        return Err(OracleError::TooLarge { rows, cols });
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for (i, row) in sorted.iter().enumerate() {
        for &(j, v) in row.entries() {
            out.set(i, j as usize, v);
        }
    }
    Ok(out)
}

/// Thin SVD of an m×n matrix: `u` is m×p, `v` is n×p, `p = min(m, n)`.
#[derive(Debug, Clone)]
pub struct FullSvd {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

pub fn dense_svd_oracle(a: &DenseMatrix) -> Result<FullSvd, OracleError> {
    if a.rows.saturating_mul(a.cols) > ORACLE_CAP {
        return Err(OracleError::TooLarge {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if a.rows >= a.cols {
        let columns = (0..a.cols).map(|j| a.column(j)).collect();
        let (u, sigma, v) = hestenes(columns)?;
        Ok(FullSvd { u, sigma, v })
    } else {
        // Aᵀ = V Σ Uᵀ
        let rows = (0..a.rows)
            .map(|i| a.data[i * a.cols..(i + 1) * a.cols].to_vec())
            .collect();
        let (v, sigma, u) = hestenes(rows)?;
        Ok(FullSvd { u, sigma, v })
    }
}

/// Orthogonalizes the given columns (each of length `len >= count`).
/// Returns `(U, sigma, V)` with columns sorted by decreasing sigma.
fn hestenes(mut columns: Vec<Vec<f64>>) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix), OracleError> {
    let n = columns.len();
    let len = columns.first().map_or(0, Vec::len);
    let mut basis: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = 2.0 * f64::EPSILON * (len.max(1) as f64).sqrt();

    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut worst = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&columns[p], &columns[p]);
                let beta = dot(&columns[q], &columns[q]);
                let gamma = dot(&columns[p], &columns[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                worst = worst.max(cosine);
                if cosine <= tol {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for vecs in [&mut columns, &mut basis] {
                    let (head, tail) = vecs.split_at_mut(q);
                    for (xp, xq) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                        let (a, b) = (*xp, *xq);
                        *xp = c * a - s * b;
                        *xq = s * a + c * b;
                    }
                }
            }
        }
        if worst <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OracleError::NoConvergence);
    }

    let norms: Vec<f64> = columns.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
    let mut u = DenseMatrix::zeros(len, n);
    let mut v = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(norms[src]);
        for i in 0..len {
            if norms[src] > 0.0 {
                u.set(i, dst, columns[src][i] / norms[src]);
            }
        }
        for i in 0..n {
            v.set(i, dst, basis[src][i]);
        }
    }
    Ok((u, sigma, v))
}

/// A factorization to check: `A ≈ U·diag(sigma)·Vᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct Factorization<'a> {
    pub u_rows: &'a [DenseRow],
    pub sigma: &'a [f64],
    pub v_rows: Option<&'a [DenseRow]>,
}

impl<'a> From<&'a SvdResult> for Factorization<'a> {
    fn from(r: &'a SvdResult) -> Self {
        Self {
            u_rows: &r.u_rows,
            sigma: &r.sigma,
            v_rows: r.v_rows.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub rel_frobenius_reconstruction: f64,
    pub max_orthonormality_defect_u: f64,
    /// `None` when the factorization carries no V.
    pub max_orthonormality_defect_v: Option<f64>,
    pub sigma_rel_errors: Vec<f64>,
    pub optimal_rank_k_error: f64,
    #[serde(skip)]
    pub a_frobenius: f64,
}

/// Acceptance thresholds for [`ErrorReport::failures`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Absolute floor on the relative reconstruction error.
    pub reconstruction: f64,
    /// Allowed multiple of the optimal rank-k relative error.
    pub optimal_factor: f64,
    pub orthonormality: f64,
    pub sigma: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            reconstruction: 1e-8,
            optimal_factor: 2.0,
            orthonormality: 1e-8,
            sigma: 1e-6,
        }
    }
}

impl ErrorReport {
    /// Human-readable descriptions of every violated tolerance.
    pub fn failures(&self, tol: &Tolerances) -> Vec<String> {
        let mut out = Vec::new();
        let optimal_rel = if self.a_frobenius > 0.0 {
            self.optimal_rank_k_error / self.a_frobenius
        } else {
            0.0
        };
        let recon_limit = tol.reconstruction + tol.optimal_factor * optimal_rel;
        if !(self.rel_frobenius_reconstruction <= recon_limit) {
            out.push(format!(
                "relative reconstruction error {:e} exceeds {:e}",
                self.rel_frobenius_reconstruction, recon_limit
            ));
        }
        if !(self.max_orthonormality_defect_u <= tol.orthonormality) {
            out.push(format!(
                "U orthonormality defect {:e} exceeds {:e}",
                self.max_orthonormality_defect_u, tol.orthonormality
            ));
        }
        if let Some(d) = self.max_orthonormality_defect_v {
            if !(d <= tol.orthonormality) {
                out.push(format!(
                    "V orthonormality defect {d:e} exceeds {:e}",
                    tol.orthonormality
                ));
            }
        }
        for (i, e) in self.sigma_rel_errors.iter().enumerate() {
            if !(*e <= tol.sigma) {
                out.push(format!("sigma[{i}] relative error {e:e} exceeds {:e}", tol.sigma));
            }
        }
        out
    }
}

/// Aligns factor rows with the rows of the materialized matrix; absent
/// rows are zero.
fn factor_matrix(rows: &[DenseRow], keys: &[u64], k: usize) -> Result<DenseMatrix, OracleError> {
    let mut out = DenseMatrix::zeros(keys.len(), k);
    for row in rows {
        if row.values.len() != k {
            return Err(OracleError::RankMismatch {
                found: row.values.len(),
                expected: k,
            });
        }
        if let Ok(i) = keys.binary_search(&row.key) {
            for (j, v) in row.values.iter().enumerate() {
                out.set(i, j, *v);
            }
        }
    }
    Ok(out)
}

/// `max |FᵀF − I|`.
pub fn orthonormality_defect(f: &DenseMatrix) -> f64 {
    let mut worst = 0.0_f64;
    for p in 0..f.cols {
        for q in p..f.cols {
            let g: f64 = (0..f.rows).map(|i| f.get(i, p) * f.get(i, q)).sum();
            let target = if p == q { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

/// `|⟨a_j, b_j⟩|` for each column pair; 1 means equal up to sign.
pub fn column_alignment(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    (0..a.cols.min(b.cols))
        .map(|j| {
            (0..a.rows.min(b.rows))
                .map(|i| a.get(i, j) * b.get(i, j))
                .sum::<f64>()
                .abs()
        })
        .collect()
}

pub fn compare(a: &[SparseRow], result: Factorization<'_>) -> Result<ErrorReport, OracleError> {
    let k = result.sigma.len();
    let n = result.v_rows.map_or(0, <[DenseRow]>::len);
    let dense = materialize(a, n)?;
    let mut keys: Vec<u64> = a.iter().map(|r| r.key).collect();
    keys.sort_unstable();

    let reference = dense_svd_oracle(&dense)?;
    let u = factor_matrix(result.u_rows, &keys, k)?;
    let v = match result.v_rows {
        Some(rows) => {
            let col_keys: Vec<u64> = (0..dense.cols as u64).collect();
            Some(factor_matrix(rows, &col_keys, k)?)
        }
        None => None,
    };

    let approx = match &v {
        Some(v) => {
            let mut out = DenseMatrix::zeros(dense.rows, dense.cols);
            for i in 0..dense.rows {
                for j in 0..dense.cols {
                    let s: f64 = (0..k).map(|p| u.get(i, p) * result.sigma[p] * v.get(j, p)).sum();
                    out.set(i, j, s);
                }
            }
            out
        }
        // U·Σ·Vᵀ = U·Uᵀ·A for this pipeline, so project when V is absent
        None => {
            let mut ut_a = DenseMatrix::zeros(k, dense.cols);
            for p in 0..k {
                for j in 0..dense.cols {
                    let s: f64 = (0..dense.rows).map(|i| u.get(i, p) * dense.get(i, j)).sum();
                    ut_a.set(p, j, s);
                }
            }
            let mut out = DenseMatrix::zeros(dense.rows, dense.cols);
            for i in 0..dense.rows {
                for j in 0..dense.cols {
                    let s: f64 = (0..k).map(|p| u.get(i, p) * ut_a.get(p, j)).sum();
                    out.set(i, j, s);
                }
            }
            out
        }
    };

    let a_norm = dense.frobenius_norm();
    let residual = dense
        .data
        .iter()
        .zip(&approx.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let rel = if a_norm > 0.0 { residual / a_norm } else { residual };

    let lead = reference.sigma.first().copied().unwrap_or(0.0);
    let sigma_rel_errors = (0..k)
        .map(|i| {
            let want = reference.sigma.get(i).copied().unwrap_or(0.0);
            let denom = if want > 0.0 { want } else { lead };
            let diff = (result.sigma[i] - want).abs();
            if denom > 0.0 {
                diff / denom
            } else {
                diff
            }
        })
        .collect();
    let optimal = reference
        .sigma
        .iter()
        .skip(k)
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();

    Ok(ErrorReport {
        rel_frobenius_reconstruction: rel,
        max_orthonormality_defect_u: orthonormality_defect(&u),
        max_orthonormality_defect_v: v.as_ref().map(orthonormality_defect),
        sigma_rel_errors,
        optimal_rank_k_error: optimal,
        a_frobenius: a_norm,
    })
}
