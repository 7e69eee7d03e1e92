//! The factorization pipeline as a sequence of map/reduce jobs.
//!
//! ```text
//! Y    = A·Ω                      random_projection_job   (pass 1 over A)
//! R_Y  = chol(YᵀY)ᵀ               ata_cholesky_job
//! Q_Y  = Y·R_Y⁻¹                  q_job
//! Bᵀ   = AᵀQ_Y                    atq_job                 (pass 2 over A)
//! R_BT = chol(BᵀᵀBᵀ)ᵀ             ata_cholesky_job
//! R_BT = Ũ·Σ·Wᵀ                   small_svd (local)
//! U    = Q_Y·W                    qutilde_job
//! V    = (Bᵀ·R_BT⁻¹)·Ũ            q_job + qutilde_job     (optional)
//! ```
//!
//! Since `Bᵀ = Q_BT·R_BT = Q_BT·Ũ·Σ·Wᵀ`, transposing gives
//! `B = W·Σ·(Q_BT·Ũ)ᵀ`, so the left factor of `A ≈ Q_Y·B` is `Q_Y·W` and the
//! right factor is `Q_BT·Ũ`.

use std::fmt;

use thiserror::Error;

use crate::dense::{cholesky, small_svd, transpose, upper_tri_inverse, LinalgError, SmallMatrix};
use crate::engine::{run_job, EngineError, Emitter, JobInput, JobSpec, JobStats, MapFn, MapInput, Record};
use crate::io::{decode_f64s, encode_f64s, DenseRow, FormatError, MatrixDims, SparseRow};
use crate::rng::gaussian_row;

/// Errors raised inside a mapper, reducer or final local reduce.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("row {key} has {found} values, expected {expected}")]
    RowLength { key: u64, found: usize, expected: usize },
    #[error("{0}")]
    Join(String),
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("sketch is rank deficient ({0}); lower k or change the seed")]
    RankDeficientSketch(LinalgError),
    #[error(transparent)]
    Engine(#[from] EngineError<TaskError>),
    #[error(transparent)]
    Linalg(LinalgError),
    #[error(transparent)]
    Input(FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input,
    Projection,
    CholeskyY,
    QY,
    Atq,
    CholeskyBt,
    SmallSvd,
    U,
    QBt,
    V,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Input => "input",
            Stage::Projection => "random projection (Y = A·Ω)",
            Stage::CholeskyY => "Cholesky QR of Y",
            Stage::QY => "Q job (Q_Y = Y·R_Y⁻¹)",
            Stage::Atq => "AᵀQ job (Bᵀ = AᵀQ_Y)",
            Stage::CholeskyBt => "Cholesky QR of Bᵀ",
            Stage::SmallSvd => "local SVD of R_BT",
            Stage::U => "U job (U = Q_Y·W)",
            Stage::QBt => "Q job (Q_BT = Bᵀ·R_BT⁻¹)",
            Stage::V => "V job (V = Q_BT·Ũ)",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: JobError,
}

impl PipelineError {
    pub fn is_rank_deficient(&self) -> bool {
        matches!(self.source, JobError::RankDeficientSketch(_))
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T, JobError> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionConfig {
    pub k: usize,
    pub global_seed: u64,
}

impl ProjectionConfig {
    pub fn new(k: usize, global_seed: u64) -> Result<Self, FormatError> {
        if k == 0 {
            return Err(FormatError::InvalidParams("k must be at least 1".into()));
        }
        Ok(Self { k, global_seed })
    }
}

fn dense_records(rows: &[DenseRow]) -> Vec<Record> {
    rows.iter()
        .map(|r| Record::new(r.key, encode_f64s(&r.values)))
        .collect()
}

fn dense_rows(records: Vec<Record>) -> Result<Vec<DenseRow>, JobError> {
    records
        .into_iter()
        .map(|r| Ok(DenseRow::new(r.key, decode_f64s(&r.payload).map_err(JobError::Input)?)))
        .collect()
}

fn decode_row(key: u64, payload: &[u8], k: usize) -> Result<Vec<f64>, TaskError> {
    let values = decode_f64s(payload)?;
    if values.len() != k {
        return Err(TaskError::RowLength {
            key,
            found: values.len(),
            expected: k,
        });
    }
    Ok(values)
}

fn add_assign(acc: &mut [f64], row: &[f64]) {
    for (a, v) in acc.iter_mut().zip(row) {
        *a += v;
    }
}

/// Reducer shared by the Gram and AᵀQ jobs: elementwise sum of k-vectors,
/// in delivery order.
fn sum_rows(k: usize) -> impl Fn(u64, &[&[u8]], &mut Emitter) -> Result<(), TaskError> + Send + Sync {
    move |key, values, out| {
        let mut total = vec![0.0; k];
        for payload in values {
            add_assign(&mut total, &decode_row(key, payload, k)?);
        }
        out.emit(key, encode_f64s(&total));
        Ok(())
    }
}

/// `Y = A·Ω` with Ω regenerated row by row from the seed. Map only.
pub fn random_projection_job(
    a: &[SparseRow],
    cfg: ProjectionConfig,
    partitions: usize,
) -> Result<(Vec<DenseRow>, JobStats), JobError> {
    let ProjectionConfig { k, global_seed } = cfg;
    let spec = JobSpec::stateless("random_projection", move |input: MapInput<'_>, out: &mut Emitter| {
        let MapInput::Row { key, payload } = input else {
            return Err(TaskError::Join("projection expects plain rows".into()));
        };
        let row = SparseRow::from_payload(key, payload)?;
        let mut result = vec![0.0; k];
        for &(j, value) in row.entries() {
            let omega = gaussian_row(global_seed, j, k);
            for (r, w) in result.iter_mut().zip(&omega) {
                *r += value * w;
            }
        }
        out.emit(key, encode_f64s(&result));
        Ok(())
    })
    .partitions(partitions)
    .scans_source();
    let input = a.iter().map(|r| Record::new(r.key, r.to_payload())).collect();
    let output = run_job(spec, JobInput::Records(input))?;
    Ok((dense_rows(output.records)?, output.stats))
}

/// Upper-triangular `R` with `RᵀR = XᵀX`.
///
/// Each row `x` contributes the rows of its outer product `xᵀx`, keyed by
/// row index; reducers sum them and the final local reduce assembles the
/// k×k Gram matrix and factors it.
pub fn ata_cholesky_job(
    x: &[DenseRow],
    k: usize,
    partitions: usize,
) -> Result<(SmallMatrix, JobStats), JobError> {
    if k == 0 {
        return Err(JobError::Linalg(LinalgError::DimensionMismatch("k must be at least 1".into())));
    }
    let spec = JobSpec::stateless("ata_cholesky", move |input: MapInput<'_>, out: &mut Emitter| {
        let MapInput::Row { key, payload } = input else {
            return Err(TaskError::Join("Gram job expects plain rows".into()));
        };
        let row = decode_row(key, payload, k)?;
        for (i, xi) in row.iter().enumerate() {
            out.emit(i as u64, encode_f64s(&row.iter().map(|xj| xi * xj).collect::<Vec<_>>()));
        }
        Ok(())
    })
    .reducer(sum_rows(k))
    .final_local_reduce(move |rows| {
        let mut gram = vec![0.0; k * k];
        for r in rows {
            let i = r.key as usize;
            gram[i * k..(i + 1) * k].copy_from_slice(&decode_row(r.key, &r.payload, k)?);
        }
        let gram = SmallMatrix::new(k, k, gram)?;
        let upper = transpose(&cholesky(&gram)?);
        Ok((0..k)
            .map(|i| Record::new(i as u64, encode_f64s(upper.row(i))))
            .collect())
    })
    .partitions(partitions);

    let output = run_job(spec, JobInput::Records(dense_records(x))).map_err(|e| match e {
        EngineError::Task {
            source: TaskError::Linalg(err @ LinalgError::NotPositiveDefinite { .. }),
            ..
        } => JobError::RankDeficientSketch(err),
        other => JobError::Engine(other),
    })?;
    let mut data = Vec::with_capacity(k * k);
    for r in &output.records {
        data.extend(decode_f64s(&r.payload).map_err(JobError::Input)?);
    }
    let r = SmallMatrix::new(k, k, data).map_err(JobError::Linalg)?;
    Ok((r, output.stats))
}

/// `Q = X·R⁻¹`. Each worker inverts `R` once when it starts. Map only.
pub fn q_job(
    x: &[DenseRow],
    r: &SmallMatrix,
    partitions: usize,
) -> Result<(Vec<DenseRow>, JobStats), JobError> {
    let k = r.rows();
    let spec = JobSpec::new("q", move || {
        let r_inv = upper_tri_inverse(r)?;
        let map: MapFn<'_, TaskError> = Box::new(move |input, out| {
            let key = input.key();
            let MapInput::Row { payload, .. } = input else {
                return Err(TaskError::Join("Q job expects plain rows".into()));
            };
            let row = decode_row(key, payload, k)?;
            out.emit(key, encode_f64s(&r_inv.left_mul_row(&row)?));
            Ok(())
        });
        Ok(map)
    })
    .partitions(partitions);
    let output = run_job(spec, JobInput::Records(dense_records(x))).map_err(|e| match e {
        EngineError::Task {
            source: TaskError::Linalg(err @ LinalgError::SingularMatrix { .. }),
            ..
        } => JobError::Linalg(err),
        other => JobError::Engine(other),
    })?;
    Ok((dense_rows(output.records)?, output.stats))
}

/// `Bᵀ = AᵀQ` over the row-wise join of `A` and `Q`. Every nonzero `a_ij`
/// emits `a_ij · q_i` under key `j`; reducers sum per column. Columns of `A`
/// without nonzeros produce no row.
pub fn atq_job(
    a: &[SparseRow],
    q: &[DenseRow],
    k: usize,
    partitions: usize,
) -> Result<(Vec<DenseRow>, JobStats), JobError> {
    let spec = JobSpec::stateless("atq", move |input: MapInput<'_>, out: &mut Emitter| {
        let MapInput::Joined { key, left, right } = input else {
            return Err(TaskError::Join("AᵀQ job expects joined rows".into()));
        };
        let a_row = SparseRow::from_payload(key, left)?;
        let q_row = decode_row(key, right, k)?;
        for &(j, value) in a_row.entries() {
            out.emit(j, encode_f64s(&q_row.iter().map(|v| value * v).collect::<Vec<_>>()));
        }
        Ok(())
    })
    .reducer(sum_rows(k))
    .partitions(partitions)
    .scans_source();
    let input = JobInput::Join {
        left: a.iter().map(|r| Record::new(r.key, r.to_payload())).collect(),
        right: dense_records(q),
    };
    let output = run_job(spec, input)?;
    Ok((dense_rows(output.records)?, output.stats))
}

/// `row · F` for every row. Map only.
pub fn qutilde_job(
    q: &[DenseRow],
    f: &SmallMatrix,
    partitions: usize,
) -> Result<(Vec<DenseRow>, JobStats), JobError> {
    let spec = JobSpec::stateless("qutilde", move |input: MapInput<'_>, out: &mut Emitter| {
        let MapInput::Row { key, payload } = input else {
            return Err(TaskError::Join("QŨ job expects plain rows".into()));
        };
        let row = decode_f64s(payload)?;
        out.emit(key, encode_f64s(&f.left_mul_row(&row)?));
        Ok(())
    })
    .partitions(partitions);
    let output = run_job(spec, JobInput::Records(dense_records(q))).map_err(|e| match e {
        EngineError::Task {
            source: TaskError::Linalg(err @ LinalgError::DimensionMismatch(_)),
            ..
        } => JobError::Linalg(err),
        other => JobError::Engine(other),
    })?;
    Ok((dense_rows(output.records)?, output.stats))
}

#[derive(Debug, Clone)]
pub struct StageStats {
    pub stage: Stage,
    pub stats: JobStats,
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    pub dims: MatrixDims,
    /// m×k, one row per row key of `A`, ascending.
    pub u_rows: Vec<DenseRow>,
    pub sigma: Vec<f64>,
    /// n×k, keyed by column id `0..n`; zero rows for empty columns.
    pub v_rows: Option<Vec<DenseRow>>,
    pub r_y: SmallMatrix,
    pub r_bt: SmallMatrix,
    /// Totals over every job of the run.
    pub stats: JobStats,
    pub stages: Vec<StageStats>,
}

/// Runs the whole pipeline on `a`.
pub fn map_reduce_svd(
    a: &[SparseRow],
    cfg: ProjectionConfig,
    compute_v: bool,
    partitions: usize,
) -> Result<SvdResult, PipelineError> {
    let dims = MatrixDims::of_rows(a, cfg.k)
        .map_err(JobError::Input)
        .at(Stage::Input)?;
    let k = cfg.k;
    let mut stages = Vec::new();
    let mut record = |stage: Stage, stats: JobStats| stages.push(StageStats { stage, stats });

    let (y, s) = random_projection_job(a, cfg, partitions).at(Stage::Projection)?;
    record(Stage::Projection, s);
    let (r_y, s) = ata_cholesky_job(&y, k, partitions).at(Stage::CholeskyY)?;
    record(Stage::CholeskyY, s);
    let (q_y, s) = q_job(&y, &r_y, partitions).at(Stage::QY)?;
    record(Stage::QY, s);
    drop(y);
    let (bt, s) = atq_job(a, &q_y, k, partitions).at(Stage::Atq)?;
    record(Stage::Atq, s);
    let (r_bt, s) = ata_cholesky_job(&bt, k, partitions).at(Stage::CholeskyBt)?;
    record(Stage::CholeskyBt, s);

    let svd = small_svd(&r_bt).map_err(JobError::Linalg).at(Stage::SmallSvd)?;
    // R_BT = Ũ·Σ·Wᵀ; U of A takes W, V of A takes Ũ.
    let (u_tilde, w) = (svd.u, svd.v);

    let (u_rows, s) = qutilde_job(&q_y, &w, partitions).at(Stage::U)?;
    record(Stage::U, s);

    let v_rows = if compute_v {
        let (q_bt, s) = q_job(&bt, &r_bt, partitions).at(Stage::QBt)?;
        record(Stage::QBt, s);
        let (v, s) = qutilde_job(&q_bt, &u_tilde, partitions).at(Stage::V)?;
        record(Stage::V, s);
        Some(fill_missing_rows(v, dims.n, k))
    } else {
        None
    };

    let mut stats = JobStats::default();
    for st in &stages {
        stats.absorb(&st.stats);
    }
    Ok(SvdResult {
        dims,
        u_rows,
        sigma: svd.sigma,
        v_rows,
        r_y,
        r_bt,
        stats,
        stages,
    })
}

/// Rows keyed `0..n`, taking zeros where `rows` has no entry.
fn fill_missing_rows(rows: Vec<DenseRow>, n: usize, k: usize) -> Vec<DenseRow> {
    let mut full: Vec<DenseRow> = (0..n as u64).map(|j| DenseRow::zeros(j, k)).collect();
    for row in rows {
        let j = row.key as usize;
        full[j] = row;
    }
    full
}
