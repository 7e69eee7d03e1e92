//! Text formats for sparse and dense rows, binary payload codecs used on
//! the engine's shuffle path, and a synthetic low-rank matrix generator.
//!
//! Sparse rows of `A` look like `<key>\t<col>:<value> <col>:<value> ...`
//! with 0-based column ids. Dense rows of `Y`, `Q`, `U`, `V` and `Bᵀ` look
//! like `<key>\t<v1> <v2> ... <vk>`. Values are printed in the shortest
//! decimal form that parses back to the same binary64.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::{splitmix64_finalize, NormalStream, SplitMix64};

#[derive(Debug, Error)]
pub enum FormatError {
    /// `line` is 1-based; 0 means the record did not come from a file.
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    fn malformed(reason: impl Into<String>) -> Self {
        FormatError::MalformedRecord {
            line: 0,
            reason: reason.into(),
        }
    }

    fn at_line(self, line: usize) -> Self {
        match self {
            FormatError::MalformedRecord { reason, .. } => {
                FormatError::MalformedRecord { line, reason }
            }
            other => other,
        }
    }
}

/// Shortest round-trip decimal form of a binary64, without a trailing `.0`.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    match s.strip_suffix(".0") {
        Some(trimmed) => trimmed.to_string(),
        None => s,
    }
}

/// One row of the sparse input matrix. Entries are sorted by column, free
/// of duplicates, finite and nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub key: u64,
    entries: Vec<(u64, f64)>,
}

impl SparseRow {
    /// Builds a row from pairs in any order. Explicit zeros are dropped.
    pub fn new(key: u64, mut entries: Vec<(u64, f64)>) -> Result<Self, FormatError> {
        if let Some((col, val)) = entries.iter().find(|(_, v)| !v.is_finite()) {
            return Err(FormatError::malformed(format!(
                "non-finite value {val} in column {col}"
            )));
        }
        entries.retain(|(_, v)| *v != 0.0);
        entries.sort_by_key(|(c, _)| *c);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(FormatError::malformed(format!("duplicate column {}", w[0].0)));
        }
        Ok(Self { key, entries })
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Column count implied by this row (largest column id + 1).
    pub fn width(&self) -> u64 {
        self.entries.last().map_or(0, |(c, _)| c + 1)
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * 16);
        for (c, v) in &self.entries {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_payload(key: u64, payload: &[u8]) -> Result<Self, FormatError> {
        if !payload.len().is_multiple_of(16) {
            return Err(FormatError::malformed(format!(
                "sparse payload of {} bytes for row {key}",
                payload.len()
            )));
        }
        let entries = payload
            .chunks_exact(16)
            .map(|c| {
                let col = u64::from_le_bytes(c[..8].try_into().unwrap());
                let val = f64::from_le_bytes(c[8..].try_into().unwrap());
                (col, val)
            })
            .collect();
        Self::new(key, entries)
    }
}

/// One row of a dense m×k or n×k matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRow {
    pub key: u64,
    pub values: Vec<f64>,
}

impl DenseRow {
    pub fn new(key: u64, values: Vec<f64>) -> Self {
        Self { key, values }
    }

    pub fn zeros(key: u64, k: usize) -> Self {
        Self::new(key, vec![0.0; k])
    }
}

/// Shape of the problem: `A` is m×n and the target rank is k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl MatrixDims {
    /// `m` counts distinct row keys (keys need not be contiguous); `n` is the
    /// largest column id plus one. An all-zero matrix has `n = 0`; it is
    /// accepted here and left for the pipeline to reject as degenerate.
    pub fn of_rows(rows: &[SparseRow], k: usize) -> Result<Self, FormatError> {
        let mut keys: Vec<u64> = rows.iter().map(|r| r.key).collect();
        keys.sort_unstable();
        keys.dedup();
        let n = rows.iter().map(SparseRow::width).max().unwrap_or(0) as usize;
        let dims = Self { m: keys.len(), n, k };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.m == 0 {
            return Err(FormatError::InvalidParams("matrix has no rows".into()));
        }
        let bound = if self.n == 0 { self.m } else { self.m.min(self.n) };
        if self.k == 0 || self.k > bound {
            return Err(FormatError::InvalidParams(format!(
                "k = {} must satisfy 1 <= k <= min(m, n) = {bound}",
                self.k
            )));
        }
        Ok(())
    }
}

pub fn parse_sparse_row(line: &str) -> Result<SparseRow, FormatError> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (key, rest) = line
        .split_once('\t')
        .ok_or_else(|| FormatError::malformed("missing tab after row key"))?;
    let key = key
        .parse::<u64>()
        .map_err(|_| FormatError::malformed(format!("row key {key:?} is not a non-negative integer")))?;
    let mut entries = Vec::new();
    for token in rest.split_whitespace() {
        let (col, val) = token
            .split_once(':')
            .ok_or_else(|| FormatError::malformed(format!("pair {token:?} is not col:value")))?;
        let col = col
            .parse::<u64>()
            .map_err(|_| FormatError::malformed(format!("column id {col:?} is not a non-negative integer")))?;
        let val = val
            .parse::<f64>()
            .map_err(|_| FormatError::malformed(format!("value {val:?} in column {col} is not a number")))?;
        entries.push((col, val));
    }
    SparseRow::new(key, entries)
}

pub fn serialize_sparse_row(row: &SparseRow) -> String {
    let pairs: Vec<String> = row
        .entries
        .iter()
        .map(|(c, v)| format!("{c}:{}", format_f64(*v)))
        .collect();
    format!("{}\t{}", row.key, pairs.join(" "))
}

pub fn serialize_dense_row(row: &DenseRow) -> String {
    let values: Vec<String> = row.values.iter().map(|v| format_f64(*v)).collect();
    format!("{}\t{}", row.key, values.join(" "))
}

pub fn parse_dense_row(line: &str) -> Result<DenseRow, FormatError> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (key, rest) = line
        .split_once('\t')
        .ok_or_else(|| FormatError::malformed("missing tab after row key"))?;
    let key = key
        .parse::<u64>()
        .map_err(|_| FormatError::malformed(format!("row key {key:?} is not a non-negative integer")))?;
    let values = rest
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| FormatError::malformed(format!("value {t:?} is not a finite number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(FormatError::malformed(format!("row {key} has no values")));
    }
    Ok(DenseRow { key, values })
}

/// Little-endian binary64 encoding of a dense vector.
pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64s(payload: &[u8]) -> Result<Vec<f64>, FormatError> {
    if !payload.len().is_multiple_of(8) {
        return Err(FormatError::malformed(format!(
            "dense payload of {} bytes is not a whole number of values",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_records<T>(
    reader: impl BufRead,
    parse: impl Fn(&str) -> Result<T, FormatError>,
) -> Result<Vec<T>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        out.push(parse(&line).map_err(|e| e.at_line(i + 1))?);
    }
    Ok(out)
}

pub fn read_sparse_rows(reader: impl BufRead) -> Result<Vec<SparseRow>, FormatError> {
    read_records(reader, parse_sparse_row)
}

pub fn read_dense_rows(reader: impl BufRead) -> Result<Vec<DenseRow>, FormatError> {
    read_records(reader, parse_dense_row)
}

pub fn read_sparse_file(path: &Path) -> Result<Vec<SparseRow>, FormatError> {
    read_sparse_rows(BufReader::new(File::open(path)?))
}

pub fn read_dense_file(path: &Path) -> Result<Vec<DenseRow>, FormatError> {
    read_dense_rows(BufReader::new(File::open(path)?))
}

/// Writes rows in ascending key order, one per line.
pub fn write_dense_file(path: &Path, rows: &[DenseRow]) -> Result<(), FormatError> {
    let mut sorted: Vec<&DenseRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.key);
    let mut out = BufWriter::new(File::create(path)?);
    for row in sorted {
        writeln!(out, "{}", serialize_dense_row(row))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sparse_rows(
    out: &mut impl Write,
    rows: impl IntoIterator<Item = SparseRow>,
) -> Result<usize, FormatError> {
    let mut count = 0;
    for row in rows {
        writeln!(out, "{}", serialize_sparse_row(&row))?;
        count += 1;
    }
    Ok(count)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub density: f64,
    pub seed: u64,
}

/// Rows of `Σ_i 2^-i · u_i v_iᵀ` for orthonormal `u_i`, `v_i`, with each
/// entry kept independently with probability `density`. At density 1 the
/// singular values are exactly `2^-i`, `i = 0..rank`.
#[derive(Debug, Clone)]
pub struct SyntheticRows {
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    weights: Vec<f64>,
    density: f64,
    mask: SplitMix64,
    next_row: usize,
    m: usize,
    n: usize,
}

pub fn generate_synthetic(params: SyntheticParams) -> Result<SyntheticRows, FormatError> {
    let SyntheticParams {
        m,
        n,
        rank,
        density,
        seed,
    } = params;
    if m == 0 || n == 0 {
        return Err(FormatError::InvalidParams(format!(
            "rows and cols must be positive, got {m}x{n}"
        )));
    }
    if rank > m.min(n) {
        return Err(FormatError::InvalidParams(format!(
            "rank {rank} exceeds min(rows, cols) = {}",
            m.min(n)
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(FormatError::InvalidParams(format!(
            "density {density} must lie in (0, 1]"
        )));
    }

    let mut normals = NormalStream::new(splitmix64_finalize(seed));
    let left = orthonormal_vectors(&mut normals, rank, m);
    let right = orthonormal_vectors(&mut normals, rank, n);
    let weights = (0..rank).map(|i| libm::exp2(-(i as f64))).collect();
    Ok(SyntheticRows {
        left,
        right,
        weights,
        density,
        mask: SplitMix64::new(splitmix64_finalize(seed ^ 0xD1B5_4A32_D192_ED03)),
        next_row: 0,
        m,
        n,
    })
}

/// `count` orthonormal vectors of length `dim` by twice-applied modified
/// Gram–Schmidt over Gaussian draws.
fn orthonormal_vectors(normals: &mut NormalStream, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut x: Vec<f64> = (0..dim).map(|_| normals.next_normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = b.iter().zip(&x).map(|(p, q)| p * q).sum();
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= dot * bi;
                }
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        // a draw (numerically) inside the current span is discarded
        if norm > 1e-8 {
            x.iter_mut().for_each(|v| *v /= norm);
            basis.push(x);
        }
    }
    basis
}

impl Iterator for SyntheticRows {
    type Item = SparseRow;

    fn next(&mut self) -> Option<SparseRow> {
        if self.next_row >= self.m {
            return None;
        }
        let r = self.next_row;
        self.next_row += 1;
        let mut entries = Vec::new();
        for c in 0..self.n {
            let keep = self.mask.next_f64() < self.density;
            let value: f64 = (0..self.weights.len())
                .map(|i| self.weights[i] * self.left[i][r] * self.right[i][c])
                .sum();
            if keep && value != 0.0 {
                entries.push((c as u64, value));
            }
        }
        Some(SparseRow {
            key: r as u64,
            entries,
        })
    }
}
