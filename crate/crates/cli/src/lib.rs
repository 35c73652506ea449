//! Command-line front end: estimation, existence diagnostics, LLN/CLT
//! simulation campaigns and finite-difference checks.
//!
//! Every run writes `replay.json` into its output directory. It holds the
//! parsed command with all defaults filled in, so `grassmann-scatter replay
//! <dir>/replay.json` reproduces the outputs bit for bit.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success; `diagnose` found a unique GE |
//! | 1 | `diagnose` found a limit case; `gradcheck` exceeded a tolerance |
//! | 2 | no GE exists (`estimate`, `diagnose`) |
//! | 3 | I/O or parse error |
//! | 4 | inconclusive: candidate scan capped, or the solver hit `--max-iter` |
//! | 5 | numerical failure (domain or degeneracy error) |
//! | 64 | invalid arguments |

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use grassmann_scatter::asymptotics::{clt_experiment, lln_experiment, CltReport, LlnTable};
use grassmann_scatter::diagnostics::{classify_existence, ExistenceReport, Verdict, VelocityFlag};
use grassmann_scatter::estimator::{solve, GEResult, SolverOptions, SolverStatus};
use grassmann_scatter::gradcheck::gradcheck;
use grassmann_scatter::io::{matrix_to_rows, read_dataset, read_scatter, write_json, write_matrix_csv};
use grassmann_scatter::manifold::random_scatter;
use grassmann_scatter::{EmpiricalMeasure, GsError, McSpec, ScatterMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_LIMIT: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_NO_GE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INCONCLUSIVE: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;
pub const EXIT_USAGE: i32 = 64;

pub const THREADS_ENV: &str = "GRASSMANN_SCATTER_THREADS";

#[derive(Parser, Debug)]
#[command(name = "grassmann-scatter", version, about = "Grassmannian M-estimates of scatter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Cap on worker threads.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Solve for the GE of a dataset.
    Estimate(EstimateArgs),
    /// Classify existence and uniqueness of the GE of a dataset.
    Diagnose(DiagnoseArgs),
    /// Law of large numbers campaign.
    Lln(LlnArgs),
    /// Central limit theorem campaign.
    Clt(CltArgs),
    /// Finite-difference checks of the analytic derivatives.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a replay file.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SolverArgs {
    /// Residual tolerance tr((M − (r/m)Id)²).
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Fraction of each fixed-point step taken along the geodesic.
    #[arg(long, default_value_t = 1.0)]
    pub damping: f64,
}

impl SolverArgs {
    pub fn options(&self) -> Result<SolverOptions, GsError> {
        let opts = SolverOptions { tol: self.tol, max_iter: self.max_iter, damping: self.damping, ..SolverOptions::default() };
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EstimateArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub input: PathBuf,
    /// Expected ambient dimension.
    #[arg(long)]
    pub m: Option<usize>,
    /// Expected subspace dimension.
    #[arg(long)]
    pub r: Option<usize>,
    /// Starting scatter matrix (CSV or JSON); identity when absent.
    #[arg(long)]
    pub start: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Threshold below which |I_P(V)| counts as zero.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct LlnArgs {
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 31)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "25,100,400,1600")]
    pub grid: Vec<usize>,
    /// Σ* file; drawn from the seed when absent.
    #[arg(long)]
    pub sigma_star: Option<PathBuf>,
    /// Log-eigenvalue spread of a seeded random Σ*.
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct CltArgs {
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    #[arg(long, default_value_t = 29)]
    pub seed: u64,
    #[arg(long, default_value_t = 4000)]
    pub reps: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Monte Carlo draws for σ∞².
    #[arg(long, default_value_t = 200_000)]
    pub mc_draws: usize,
    /// Σ* file; identity when absent.
    #[arg(long)]
    pub sigma_star: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per suite.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// A replay.json written by an earlier run.
    pub file: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Replay {
    version: String,
    #[serde(flatten)]
    command: Command,
}

/// Maps a library error to its exit code.
pub fn exit_code(e: &GsError) -> i32 {
    match e {
        GsError::Io(_) | GsError::Parse(_) => EXIT_IO,
        GsError::Usage(_) => EXIT_USAGE,
        GsError::Existence { .. } => EXIT_NO_GE,
        GsError::Domain(_) | GsError::Degeneracy(_) | GsError::EmptyFlag(_) => EXIT_NUMERICAL,
    }
}

/// Parses `args` and runs the command. Argument errors exit with 64, help and version with 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<i32, GsError> {
    if let Command::Replay(args) = command {
        return replay(&args);
    }
    let out = output_dir(&command).to_path_buf();
    fs::create_dir_all(&out)?;
    write_json(&out.join("replay.json"), &Replay { version: env!("CARGO_PKG_VERSION").into(), command: command.clone() })?;
    match command {
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Lln(a) => cmd_lln(&a),
        Command::Clt(a) => cmd_clt(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Replay(_) => unreachable!("handled above"),
    }
}

fn output_dir(command: &Command) -> &Path {
    match command {
        Command::Estimate(a) => &a.out,
        Command::Diagnose(a) => &a.out,
        Command::Lln(a) => &a.out,
        Command::Clt(a) => &a.out,
        Command::Gradcheck(a) => &a.out,
        Command::Replay(_) => unreachable!("replay has no output directory of its own"),
    }
}

fn replay(args: &ReplayArgs) -> Result<i32, GsError> {
    let text = fs::read_to_string(&args.file)?;
    let recorded: Replay = serde_json::from_str(&text)?;
    let mut command = recorded.command;
    if let Some(out) = &args.out {
        match &mut command {
            Command::Estimate(a) => a.out = out.clone(),
            Command::Diagnose(a) => a.out = out.clone(),
            Command::Lln(a) => a.out = out.clone(),
            Command::Clt(a) => a.out = out.clone(),
            Command::Gradcheck(a) => a.out = out.clone(),
            Command::Replay(_) => unreachable!("replay files never record a replay"),
        }
    }
    execute(command)
}

fn load_checked(input: &Path, m: Option<usize>, r: Option<usize>) -> Result<EmpiricalMeasure, GsError> {
    let meas = read_dataset(input)?;
    if m.is_some_and(|m| m != meas.m()) || r.is_some_and(|r| r != meas.r()) {
        return Err(GsError::Usage(format!(
            "dataset has (m, r) = ({}, {}), flags say ({:?}, {:?})",
            meas.m(),
            meas.r(),
            m,
            r
        )));
    }
    Ok(meas)
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    status: &'a str,
    converged: bool,
    residual: Option<f64>,
    iterations: Option<usize>,
    estimate: Option<Vec<Vec<f64>>>,
    boundary_flag: Option<&'a VelocityFlag>,
    error: Option<String>,
    witness: Option<Vec<Vec<f64>>>,
    existence: Option<ExistenceReport>,
}

fn status_name(status: &SolverStatus) -> &'static str {
    match status {
        SolverStatus::Converged => "Converged",
        SolverStatus::DivergedToBoundary { .. } => "DivergedToBoundary",
        SolverStatus::MaxIterations => "MaxIterations",
    }
}

fn write_trace(path: &Path, result: &GEResult) -> Result<(), GsError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &result.trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<i32, GsError> {
    let meas = load_checked(&a.input, a.m, a.r)?;
    let opts = a.solver.options()?;
    let start = match &a.start {
        Some(p) => read_scatter(p)?,
        None => ScatterMatrix::identity(meas.m()),
    };
    let report_path = a.out.join("result.json");
    let result = match solve(&meas, &start, &opts) {
        Ok(r) => r,
        Err(GsError::Existence { message, witness }) => {
            let existence = classify_existence(&meas, 1e-9);
            let report = EstimateReport {
                status: "NoGE",
                converged: false,
                residual: None,
                iterations: None,
                estimate: None,
                boundary_flag: None,
                error: Some(message.clone()),
                witness: witness.as_ref().map(|w| matrix_to_rows(w.basis())),
                existence: Some(existence),
            };
            write_json(&report_path, &report)?;
            eprintln!("error: existence error: {message}");
            return Ok(EXIT_NO_GE);
        }
        Err(e) => return Err(e),
    };
    write_matrix_csv(&a.out.join("estimate.csv"), result.estimate.matrix())?;
    write_trace(&a.out.join("trace.csv"), &result)?;
    let (flag, existence, code) = match &result.status {
        SolverStatus::Converged => (None, None, EXIT_OK),
        SolverStatus::DivergedToBoundary { flag } => (Some(flag), Some(classify_existence(&meas, 1e-9)), EXIT_NO_GE),
        SolverStatus::MaxIterations => (None, None, EXIT_INCONCLUSIVE),
    };
    let report = EstimateReport {
        status: status_name(&result.status),
        converged: result.status.is_converged(),
        residual: Some(result.residual),
        iterations: Some(result.iterations),
        estimate: Some(matrix_to_rows(result.estimate.matrix())),
        boundary_flag: flag,
        error: None,
        witness: None,
        existence,
    };
    write_json(&report_path, &report)?;
    Ok(code)
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<i32, GsError> {
    let meas = load_checked(&a.input, a.m, a.r)?;
    let report = classify_existence(&meas, a.tol);
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", report.verdict.name());
    Ok(match report.verdict {
        Verdict::Unique => EXIT_OK,
        Verdict::Limit { .. } => EXIT_LIMIT,
        Verdict::NoGE { .. } => EXIT_NO_GE,
        Verdict::Inconclusive => EXIT_INCONCLUSIVE,
    })
}

/// Seeded Σ* for campaigns without `--sigma-star`: the last stream of the seed,
/// which no replicate uses.
pub fn seeded_sigma_star(m: usize, spread: f64, seed: u64) -> ScatterMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    random_scatter(m, spread, &mut rng)
}

#[derive(Serialize)]
struct LlnSummaryFile<'a> {
    sigma_star: Vec<Vec<f64>>,
    #[serde(flatten)]
    table: LlnSummaryView<'a>,
}

#[derive(Serialize)]
struct LlnSummaryView<'a> {
    summary: &'a [grassmann_scatter::asymptotics::LlnSummary],
    loglog_slope: f64,
    monotone: bool,
    warnings: &'a [String],
}

pub fn cmd_lln(a: &LlnArgs) -> Result<i32, GsError> {
    let sigma_star = match &a.sigma_star {
        Some(p) => read_scatter(p)?,
        None => seeded_sigma_star(a.m, a.spread, a.seed),
    };
    if sigma_star.dim() != a.m {
        return Err(GsError::Usage(format!("Σ* is {0}x{0} but --m is {1}", sigma_star.dim(), a.m)));
    }
    let opts = a.solver.options()?;
    let table: LlnTable = lln_experiment(&sigma_star, a.r, &a.grid, a.reps, a.seed, &opts)?;
    let mut w = csv::Writer::from_path(a.out.join("replicates.csv"))?;
    for row in &table.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv"))?;
    for row in &table.summary {
        w.serialize(row)?;
    }
    w.flush()?;
    let file = LlnSummaryFile {
        sigma_star: matrix_to_rows(sigma_star.matrix()),
        table: LlnSummaryView {
            summary: &table.summary,
            loglog_slope: table.loglog_slope,
            monotone: table.monotone,
            warnings: &table.warnings,
        },
    };
    write_json(&a.out.join("summary.json"), &file)?;
    for warning in &table.warnings {
        eprintln!("{warning}");
    }
    println!("loglog_slope {:.4} monotone {}", table.loglog_slope, table.monotone);
    Ok(EXIT_OK)
}

pub fn cmd_clt(a: &CltArgs) -> Result<i32, GsError> {
    let sigma_star = match &a.sigma_star {
        Some(p) => read_scatter(p)?,
        None => ScatterMatrix::identity(a.m),
    };
    if sigma_star.dim() != a.m {
        return Err(GsError::Usage(format!("Σ* is {0}x{0} but --m is {1}", sigma_star.dim(), a.m)));
    }
    let opts = a.solver.options()?;
    let mc = McSpec { draws: a.mc_draws, seed: a.seed };
    let report: CltReport = clt_experiment(&sigma_star, a.r, a.n, a.reps, a.seed, &opts, &mc)?;
    let mm = a.m * a.m;
    let mut w = csv::Writer::from_path(a.out.join("replicates.csv"))?;
    let mut header = vec!["rep".to_string(), "status".to_string(), "residual".to_string()];
    for j in 0..a.m {
        for i in 0..a.m {
            header.push(format!("z_{}_{}", i + 1, j + 1));
        }
    }
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![row.rep.to_string(), row.status.clone(), row.residual.to_string()];
        if row.z.is_empty() {
            rec.extend(std::iter::repeat_n(String::new(), mm));
        } else {
            rec.extend(row.z.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    write_matrix_csv(&a.out.join("empirical_cov.csv"), &report.empirical_cov)?;
    write_matrix_csv(&a.out.join("sigma_inf.csv"), &report.sigma_inf)?;
    write_json(&a.out.join("report.json"), &report)?;
    for flag in &report.flags {
        eprintln!("{flag}");
    }
    println!("rel_frobenius_error {:.4}", report.rel_frobenius_error);
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32, GsError> {
    let report = gradcheck(a.seed, a.cases)?;
    write_json(&a.out.join("gradcheck.json"), &report)?;
    for s in &report.suites {
        println!(
            "{} {} max_error {:.3e} tolerance {:.0e}",
            if s.pass { "PASS" } else { "FAIL" },
            s.name,
            s.max_error,
            s.tolerance
        );
    }
    Ok(if report.pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}
