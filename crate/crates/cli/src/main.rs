use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mrsvd::dense::SmallMatrix;
use mrsvd::engine::{default_partitions, JobStats};
use mrsvd::io::{
    read_dense_file, read_sparse_file, write_dense_file, write_sparse_rows, DenseRow, FormatError,
    SyntheticParams,
};
use mrsvd::jobs::{ata_cholesky_job, map_reduce_svd, q_job, ProjectionConfig, SvdResult};
use mrsvd::oracle::{compare, orthonormality_defect, DenseMatrix, Factorization, Tolerances};

/// Approximate rank-k SVD of sparse tall-and-fat matrices with random
/// projection and Cholesky QR on a local map/reduce engine.
#[derive(Parser, Debug)]
#[command(name = "mrsvd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sparse matrix with known singular values 2^-i
    Gen(GenArgs),
    /// Factor a sparse matrix
    Svd(SvdArgs),
    /// Cholesky QR of dense tall-and-skinny rows
    Qr(QrArgs),
    /// Check an svd output directory against a dense reference SVD
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SvdArgs {
    /// Sparse rows, `<key>\t<col>:<value> ...`
    #[arg(long)]
    input: PathBuf,
    /// Target rank
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to RSVD_WORKERS or the core count
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    partitions: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also compute V (two extra map-only jobs over Bᵀ)
    #[arg(long)]
    compute_v: bool,
}

#[derive(Args, Debug)]
struct QrArgs {
    /// Dense rows, `<key>\t<v1> <v2> ...`
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    partitions: Option<u64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// The sparse matrix that was factored
    #[arg(long)]
    input: PathBuf,
    /// Output directory of `svd`
    #[arg(long)]
    svd_dir: PathBuf,
    #[arg(long)]
    tol_reconstruction: Option<f64>,
    /// Allowed multiple of the optimal rank-k error
    #[arg(long)]
    tol_optimal_factor: Option<f64>,
    #[arg(long)]
    tol_orthonormality: Option<f64>,
    #[arg(long)]
    tol_sigma: Option<f64>,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl Failure {
    fn run(e: impl std::fmt::Display) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::InvalidParams(msg) => Failure::Usage(msg),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Svd(args) => cmd_svd(args),
        Command::Qr(args) => cmd_qr(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input file {} does not exist", path.display())))
    }
}

fn prepare_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", path.display())))
}

fn partitions(flag: Option<u64>) -> usize {
    flag.map_or_else(default_partitions, |p| p as usize)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn column(values: &[f64]) -> SmallMatrix {
    SmallMatrix::new(values.len(), 1, values.to_vec()).expect("finite values")
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode, Failure> {
    let rows = mrsvd::io::generate_synthetic(SyntheticParams {
        m: args.rows,
        n: args.cols,
        rank: args.rank,
        density: args.density,
        seed: args.seed,
    })?;
    let mut out = BufWriter::new(File::create(&args.out)?);
    let count = write_sparse_rows(&mut out, rows)?;
    out.flush()?;
    println!("wrote {count} rows to {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn stats_json(stats: &JobStats, wall_ms: u128) -> String {
    let mut value = serde_json::to_value(stats).expect("stats serialize");
    value["wall_ms"] = serde_json::Value::from(wall_ms as u64);
    serde_json::to_string_pretty(&value).expect("stats serialize") + "\n"
}

fn write_svd(dir: &Path, result: &SvdResult, wall_ms: u128) -> Result<(), Failure> {
    write_dense_file(&dir.join("U.txt"), &result.u_rows)?;
    write_text(&dir.join("S.txt"), &column(&result.sigma).to_text())?;
    if let Some(v) = &result.v_rows {
        let rows: Vec<Vec<f64>> = v.iter().map(|r| r.values.clone()).collect();
        let v = SmallMatrix::from_rows(&rows).map_err(Failure::run)?;
        write_text(&dir.join("V.txt"), &v.to_text())?;
    }
    write_text(&dir.join("R_Y.txt"), &result.r_y.to_text())?;
    write_text(&dir.join("R_BT.txt"), &result.r_bt.to_text())?;
    write_text(&dir.join("stats.json"), &stats_json(&result.stats, wall_ms))
}

fn cmd_svd(args: SvdArgs) -> Result<ExitCode, Failure> {
    require_file(&args.input)?;
    prepare_dir(&args.out_dir)?;
    let cfg = ProjectionConfig::new(args.k as usize, args.seed)?;
    let workers = partitions(args.partitions);

    let start = Instant::now();
    let a = read_sparse_file(&args.input).map_err(|e| Failure::Run(format!("input: {e}")))?;
    let result = map_reduce_svd(&a, cfg, args.compute_v, workers).map_err(Failure::run)?;
    let wall_ms = start.elapsed().as_millis();

    write_svd(&args.out_dir, &result, wall_ms)?;
    let sigma: Vec<String> = result.sigma.iter().map(|s| format!("{s:.6e}")).collect();
    println!(
        "m = {}, n = {}, k = {}, partitions = {workers}",
        result.dims.m, result.dims.n, result.dims.k
    );
    println!("sigma: {}", sigma.join(" "));
    println!("wall time: {wall_ms} ms");
    Ok(ExitCode::SUCCESS)
}

fn dense_matrix(rows: &[DenseRow]) -> DenseMatrix {
    DenseMatrix::from_rows(&rows.iter().map(|r| r.values.clone()).collect::<Vec<_>>())
}

fn cmd_qr(args: QrArgs) -> Result<ExitCode, Failure> {
    require_file(&args.input)?;
    prepare_dir(&args.out_dir)?;
    let workers = partitions(args.partitions);
    let x = read_dense_file(&args.input).map_err(|e| Failure::Run(format!("input: {e}")))?;
    let Some(first) = x.first() else {
        return Err(Failure::Run("input: no rows".into()));
    };
    let k = first.values.len();

    let (r, _) = ata_cholesky_job(&x, k, workers).map_err(Failure::run)?;
    let (q, _) = q_job(&x, &r, workers).map_err(Failure::run)?;
    write_dense_file(&args.out_dir.join("Q.txt"), &q)?;
    write_text(&args.out_dir.join("R.txt"), &r.to_text())?;
    println!("orthonormality defect max|QᵀQ - I| = {:e}", orthonormality_defect(&dense_matrix(&q)));
    Ok(ExitCode::SUCCESS)
}

fn read_small(path: &Path) -> Result<SmallMatrix, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    text.parse()
        .map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, Failure> {
    require_file(&args.input)?;
    let u_path = args.svd_dir.join("U.txt");
    let s_path = args.svd_dir.join("S.txt");
    require_file(&u_path)?;
    require_file(&s_path)?;
    let defaults = Tolerances::default();
    let tol = Tolerances {
        reconstruction: args.tol_reconstruction.unwrap_or(defaults.reconstruction),
        optimal_factor: args.tol_optimal_factor.unwrap_or(defaults.optimal_factor),
        orthonormality: args.tol_orthonormality.unwrap_or(defaults.orthonormality),
        sigma: args.tol_sigma.unwrap_or(defaults.sigma),
    };

    let a = read_sparse_file(&args.input).map_err(|e| Failure::Run(format!("input: {e}")))?;
    let u = read_dense_file(&u_path).map_err(|e| Failure::Run(format!("U.txt: {e}")))?;
    let s = read_small(&s_path)?;
    if s.cols() != 1 {
        return Err(Failure::Run(format!("S.txt: expected one column, found {}", s.cols())));
    }
    let sigma: Vec<f64> = s.data().to_vec();
    let v_path = args.svd_dir.join("V.txt");
    let v = if v_path.is_file() {
        let v = read_small(&v_path)?;
        Some(
            v.to_rows()
                .into_iter()
                .enumerate()
                .map(|(j, values)| DenseRow::new(j as u64, values))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let report = compare(
        &a,
        Factorization {
            u_rows: &u,
            sigma: &sigma,
            v_rows: v.as_deref(),
        },
    )
    .map_err(Failure::run)?;
    println!("{}", serde_json::to_string(&report).expect("report serialize"));
    let failures = report.failures(&tol);
    for f in &failures {
        eprintln!("FAIL: {f}");
    }
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
