//! `ihtrate` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage or argument errors, 2 on runtime
//! failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ihtrate::asymptotics::{asymptotic_rate, AsymptoticParams, LimitingEsd};
use ihtrate::experiment::{
    default_rate_threshold, run_sweep, samples_from_fractions, sweep_report, write_sweep, SweepConfig,
};
use ihtrate::io;
use ihtrate::linalg::{DenseMatrix, LowRankModel};
use ihtrate::rate::{MemoryCap, RateReport, C1_UPPER};
use ihtrate::rmt::{
    esd_of_dims, quad_form_concentration_test, random_orthogonal_model, rounded_truncation_dims,
    Construction, PsdFamily, VectorFamily,
};
use ihtrate::sampling::{project_omega, uniform_sample};
use ihtrate::solver::{init_near, run_ihtsvd, SolverConfig, StepSize, UpdateForm};
use ihtrate::Error;

#[derive(Parser)]
#[command(name = "ihtrate", version, about = "Matrix completion by IHTSVD and its local convergence rate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete a matrix from observed entries
    Solve(SolveArgs),
    /// Exact local rate 1 - lambda_min(H) for a model and observation set
    Rate(RateArgs),
    /// Asymptotic rate and limiting spectral law
    Asymptotic(AsymptoticArgs),
    /// Spectrum of a row-subsampled truncated orthogonal matrix
    Esd(EsdArgs),
    /// Grid sweep over rank and sample count
    Sweep(SweepArgs),
    /// Variance decay of centred quadratic forms
    Concentration(ConcentrationArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    ProjectLast,
    MaskLast,
}

impl From<FormArg> for UpdateForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::ProjectLast => UpdateForm::ProjectLast,
            FormArg::MaskLast => UpdateForm::MaskLast,
        }
    }
}

fn parse_step(s: &str) -> Result<StepSize, String> {
    match s {
        "unit" => Ok(StepSize::Unit),
        "svp" => Ok(StepSize::Svp),
        other => other
            .parse::<f64>()
            .map(StepSize::Fixed)
            .map_err(|_| format!("expected 'unit', 'svp' or a number, got '{other}'")),
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Iteration budget
    #[arg(long, default_value_t = 3000)]
    max_iters: usize,
    /// Relative error target
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    /// unit, svp, or a positive number
    #[arg(long, default_value = "unit", value_parser = parse_step)]
    step: StepSize,
    #[arg(long, value_enum, default_value = "project-last")]
    form: FormArg,
    #[arg(long, default_value_t = 1e-12)]
    numerical_floor: f64,
}

impl SolverArgs {
    fn config(&self, rank: usize) -> SolverConfig {
        let mut config = SolverConfig::ihtsvd(rank, self.max_iters, self.eps).with_form(self.form.into());
        config.step = self.step;
        config.numerical_floor = self.numerical_floor;
        config
    }
}

#[derive(Args)]
struct SolveArgs {
    /// CSV matrix; its entries on the observation set are the observations
    #[arg(long, requires = "omega")]
    matrix: Option<PathBuf>,
    /// Observation set file ('# n1=..,n2=..' header, one 'i,j' per line)
    #[arg(long)]
    omega: Option<PathBuf>,
    /// Ground truth for error tracking
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Starting point (default: spectral initializer, or truth + noise for synthetic runs)
    #[arg(long)]
    x0: Option<PathBuf>,
    /// Synthetic instance size (used without --matrix)
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    r: usize,
    /// Number of observed entries for a synthetic instance
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of the perturbation X0 = M + G for synthetic runs
    #[arg(long, default_value_t = 1e-4)]
    noise: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Directory for completed.csv and trace.csv
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    n2: usize,
    #[arg(long)]
    r: usize,
    /// Observation set file
    #[arg(long)]
    omega: PathBuf,
    /// Ground-truth CSV (default: random orthogonal model from --seed)
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// ||X0 - M||_F used for tau, c and K(eps); 0 gives the small-error limit
    #[arg(long, default_value_t = 0.0)]
    initial_error: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = C1_UPPER)]
    c1: f64,
    /// Memory cap in bytes for W (overrides IHT_RATE_MEMCAP_BYTES)
    #[arg(long)]
    memcap: Option<u128>,
}

#[derive(Args)]
struct AsymptoticArgs {
    #[arg(long, required_unless_present = "n1", requires = "rho_s")]
    rho_r: Option<f64>,
    #[arg(long)]
    rho_s: Option<f64>,
    #[arg(long, conflicts_with_all = ["rho_r", "rho_s"], requires_all = ["n2", "r", "s"])]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    /// Write the limiting density on this many interior points
    #[arg(long, requires = "output")]
    density_points: Option<usize>,
    /// Density table path
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstructionArg {
    Plain,
    Kronecker,
}

#[derive(Args)]
struct EsdArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: f64,
    #[arg(long)]
    q: f64,
    #[arg(long, value_enum, default_value = "kronecker")]
    construction: ConstructionArg,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for eigenvalues.csv, eigenvalues.json and histogram.csv
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    n2: usize,
    /// Comma-separated ranks
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    /// Comma-separated absolute sample counts
    #[arg(long, value_delimiter = ',', conflicts_with = "sample_fractions")]
    samples: Vec<usize>,
    /// Comma-separated sample counts as fractions of n1 n2
    #[arg(long, value_delimiter = ',')]
    sample_fractions: Vec<f64>,
    #[arg(long, default_value_t = 25)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rates above this become 1 (default eps^(1/max_iters))
    #[arg(long)]
    rate_threshold: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    noise: f64,
    /// Keep per-run error traces under traces/
    #[arg(long)]
    keep_traces: bool,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VectorArg {
    Gaussian,
    KroneckerGaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatrixArg {
    Identity,
    Wishart,
}

#[derive(Args)]
struct ConcentrationArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    vector_family: VectorArg,
    #[arg(long, value_enum, default_value = "identity")]
    matrix_family: MatrixArg,
    #[arg(long, default_value_t = 0.5)]
    q: f64,
    /// Comma-separated values of n
    #[arg(long, value_delimiter = ',', default_values_t = [64, 144, 256, 400])]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_json(value: &Value) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Reads an input file; an unreadable path is the caller's mistake.
fn input<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T, Error>) -> Result<T, Error> {
    read(path).map_err(|e| match e {
        Error::Io(io_err) => usage(format!("cannot read {}: {io_err}", path.display())),
        other => other,
    })
}

fn read_matrix(path: &Path) -> Result<DenseMatrix, Error> {
    input(path, io::read_matrix)
}

fn read_omega(path: &Path, dims: (usize, usize)) -> Result<ihtrate::SamplingSet, Error> {
    input(path, |p| io::read_sampling_set(p, Some(dims)))
}

fn solve(args: SolveArgs) -> Result<(), Error> {
    let (observed, omega, truth, x0) = match &args.matrix {
        Some(path) => {
            let a = read_matrix(path)?;
            let omega = read_omega(args.omega.as_deref().unwrap(), a.shape())?;
            let truth = args.truth.as_deref().map(read_matrix).transpose()?;
            let x0 = args.x0.as_deref().map(read_matrix).transpose()?;
            (project_omega(&a, &omega)?, omega, truth, x0)
        }
        None => {
            let (n1, n2, s) = match (args.n1, args.n2, args.s) {
                (Some(n1), Some(n2), Some(s)) => (n1, n2, s),
                _ => return Err(usage("give --matrix and --omega, or --n1, --n2 and --s")),
            };
            let (_, m) = random_orthogonal_model(n1, n2, args.r, None, args.seed)?;
            let omega = match &args.omega {
                Some(path) => read_omega(path, (n1, n2))?,
                None => uniform_sample(n1, n2, s, args.seed.wrapping_add(1))?,
            };
            let x0 = match &args.x0 {
                Some(path) => read_matrix(path)?,
                None => init_near(&m, args.noise, args.seed.wrapping_add(2))?,
            };
            (project_omega(&m, &omega)?, omega, Some(m), Some(x0))
        }
    };
    let config = args.solver.config(args.r);
    let (x, trace) = run_ihtsvd(&observed, &omega, &config, x0.as_ref(), truth.as_ref())?;
    if let Some(dir) = &args.output {
        fs::create_dir_all(dir)?;
        io::write_matrix(&dir.join("completed.csv"), &x)?;
        io::write_trace(&dir.join("trace.csv"), &trace.error_norms)?;
    }
    let final_error = *trace.error_norms.last().unwrap();
    print_json(&json!({
        "n1": omega.n1(),
        "n2": omega.n2(),
        "r": args.r,
        "s": omega.len(),
        "iterations": trace.iterations_run,
        "stop_reason": trace.stop_reason,
        "step_size": trace.step_size,
        "ground_truth": trace.ground_truth,
        "initial_error": trace.error_norms[0],
        "final_error": final_error,
    }))
}

fn rate(args: RateArgs) -> Result<(), Error> {
    if let Some(cap) = args.memcap {
        std::env::set_var(ihtrate::rate::MEMCAP_ENV, cap.to_string());
    }
    MemoryCap::from_env()?;
    let omega = read_omega(&args.omega, (args.n1, args.n2))?;
    let model = match &args.matrix {
        Some(path) => {
            let m = read_matrix(path)?;
            if m.shape() != (args.n1, args.n2) {
                return Err(usage(format!(
                    "matrix is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    args.n1,
                    args.n2
                )));
            }
            LowRankModel::from_matrix(&m, args.r)?
        }
        None => random_orthogonal_model(args.n1, args.n2, args.r, None, args.seed)?.0,
    };
    let report = RateReport::compute(&model, &omega, args.initial_error, args.eps, args.c1)?;
    let mut value = serde_json::to_value(&report)?;
    let extra = json!({
        "n1": args.n1,
        "n2": args.n2,
        "r": args.r,
        "s": omega.len(),
        "sigma_r": model.sigma_r(),
    });
    value.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    print_json(&value)
}

fn asymptotic(args: AsymptoticArgs) -> Result<(), Error> {
    let params = match (args.rho_r, args.rho_s) {
        (Some(rho_r), Some(rho_s)) => AsymptoticParams::new(rho_r, rho_s)?,
        _ => AsymptoticParams::from_dims(args.n1.unwrap(), args.n2.unwrap(), args.r.unwrap(), args.s.unwrap())?,
    };
    let rho_infinity = asymptotic_rate(&params);
    let esd = if params.p > 0.0 && params.q > 0.0 && params.p < 1.0 && params.q < 1.0 {
        Some(LimitingEsd::from_params(&params)?)
    } else {
        None
    };
    let header = json!({
        "rho_r": params.rho_r,
        "rho_s": params.rho_s,
        "p": params.p,
        "q": params.q,
        "rho_infinity": rho_infinity,
        "above_boundary": params.above_boundary(),
        "lambda_minus": esd.map(|e| e.lambda_minus),
        "lambda_plus": esd.map(|e| e.lambda_plus),
        "mass_at_0": esd.map(|e| e.mass_at_0),
        "mass_at_1": esd.map(|e| e.mass_at_1),
    });
    if let (Some(points), Some(path)) = (args.density_points, &args.output) {
        let esd = esd.ok_or_else(|| usage("the density needs rho_r < 1 and 0 < rho_s < 1"))?;
        if points == 0 {
            return Err(usage("--density-points must be positive"));
        }
        let mut table = format!("# {}\nx,density\n", serde_json::to_string(&header)?);
        for k in 1..=points {
            let x = k as f64 / (points + 1) as f64;
            table.push_str(&format!("{x},{}\n", esd.density(x)?));
        }
        fs::write(path, table)?;
    }
    print_json(&header)
}

fn esd(args: EsdArgs) -> Result<(), Error> {
    let construction = match args.construction {
        ConstructionArg::Plain => Construction::Plain,
        ConstructionArg::Kronecker => Construction::Kronecker,
    };
    let dims = rounded_truncation_dims(args.n, args.p, args.q, construction)?;
    let sample = esd_of_dims(&dims, construction, args.seed)?;
    let cmp = sample.histogram(args.bins)?;
    let sidecar = json!({
        "n": sample.n,
        "p": sample.p,
        "q": sample.q,
        "construction": sample.construction,
        "seed": sample.seed,
    });
    if let Some(dir) = &args.output {
        write_esd(dir, &sample.eigenvalues, &sidecar, &cmp)?;
    }
    print_json(&json!({
        "n": sample.n,
        "rows": dims.rows,
        "cols": dims.cols,
        "requested_p": args.p,
        "requested_q": args.q,
        "effective_p": sample.p,
        "effective_q": sample.q,
        "construction": sample.construction,
        "seed": sample.seed,
        "bins": args.bins,
        "l1_distance": cmp.l1,
        "max_bin_deviation": cmp.max_deviation,
        "lambda_min": sample.eigenvalues.first(),
        "lambda_max": sample.eigenvalues.last(),
    }))
}

fn write_esd(dir: &Path, values: &[f64], sidecar: &Value, cmp: &ihtrate::rmt::HistogramComparison) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("eigenvalue\n");
    for v in values {
        csv.push_str(&format!("{v:.16e}\n"));
    }
    fs::write(dir.join("eigenvalues.csv"), csv)?;
    fs::write(dir.join("eigenvalues.json"), serde_json::to_string_pretty(sidecar)? + "\n")?;
    let mut hist = String::from("bin_lo,bin_hi,histogram,limit\n");
    for (b, (h, f)) in cmp.histogram.iter().zip(&cmp.limit).enumerate() {
        let lo = b as f64 * cmp.bin_width;
        hist.push_str(&format!("{lo},{},{h},{f}\n", lo + cmp.bin_width));
    }
    fs::write(dir.join("histogram.csv"), hist)?;
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Error> {
    let samples = if !args.samples.is_empty() {
        args.samples.clone()
    } else if !args.sample_fractions.is_empty() {
        samples_from_fractions(args.n1, args.n2, &args.sample_fractions)
    } else {
        return Err(usage("give --samples or --sample-fractions"));
    };
    let mut config = SweepConfig::new(args.n1, args.n2, args.ranks.clone(), samples);
    config.runs_per_cell = args.runs;
    config.seed = args.seed;
    config.solver = args.solver.config(1);
    config.epsilon = args.solver.eps;
    config.rate_threshold = args
        .rate_threshold
        .unwrap_or_else(|| default_rate_threshold(args.solver.eps, args.solver.max_iters));
    config.init_noise = args.noise;
    config.keep_traces = args.keep_traces;
    let cells = run_sweep(&config)?;
    if let Some(dir) = &args.output {
        write_sweep(dir, &config, &cells)?;
    }
    print_json(&serde_json::to_value(sweep_report(&config, &cells))?)
}

fn concentration(args: ConcentrationArgs) -> Result<(), Error> {
    let vector = match args.vector_family {
        VectorArg::Gaussian => VectorFamily::Gaussian,
        VectorArg::KroneckerGaussian => VectorFamily::KroneckerGaussian,
    };
    let matrix = match args.matrix_family {
        MatrixArg::Identity => PsdFamily::Identity,
        MatrixArg::Wishart => PsdFamily::Wishart,
    };
    let report = quad_form_concentration_test(vector, matrix, args.q, &args.n_grid, args.trials, args.seed)?;
    print_json(&serde_json::to_value(report)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Solve(a) => solve(a),
        Command::Rate(a) => rate(a),
        Command::Asymptotic(a) => asymptotic(a),
        Command::Esd(a) => esd(a),
        Command::Sweep(a) => sweep(a),
        Command::Concentration(a) => concentration(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_argument_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
