//! Grid sweeps over `(r, s)`: analytical rate, fitted empirical rate and
//! probability of linear convergence per cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{asymptotic_rate, AsymptoticParams};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{DenseMatrix, LowRankModel};
use crate::rate::{lambda_min_for, LAMBDA_ZERO_THRESHOLD};
use crate::rmt::random_orthogonal_model;
use crate::sampling::{degrees_of_freedom, project_omega, uniform_sample};
use crate::seed;
use crate::solver::{init_near, run_ihtsvd, SolverConfig, StopReason};

/// Outcome of fitting `e_k ~ C rate^k` to an error trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub rate: f64,
    pub converged: bool,
    /// Turning point `k0`; zero when the trace never converged.
    pub turning_point: usize,
    /// Inclusive index range used by the least-squares fit.
    pub window: (usize, usize),
}

/// Fits the exponential decay of `error_norms`.
///
/// The turning point `k0` is the first index that is at or below
/// `numerical_floor`, that fails to decrease by more than the floor, or that
/// reaches `eps` relative to the first entry (the last index otherwise).
/// Then `ln e_k` is regressed on `k` over `[floor(0.4 k0), floor(0.9 k0)]`
/// and the rate is `exp(slope)`, capped at 1. A trace that never reaches
/// `eps` yields `(1, false)`.
pub fn fit_empirical_rate(error_norms: &[f64], numerical_floor: f64, eps: f64) -> Result<RateFit> {
    if error_norms.len() < 5 {
        return Err(Error::Fit(format!(
            "need at least 5 error norms, got {}",
            error_norms.len()
        )));
    }
    if error_norms.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::invalid("error norms must be finite and nonnegative"));
    }
    let e0 = error_norms[0];
    let target = eps * e0;
    let met = error_norms.iter().position(|&e| e <= target);
    if e0 <= numerical_floor || met.is_none() {
        return Ok(RateFit {
            rate: 1.0,
            converged: false,
            turning_point: 0,
            window: (0, 0),
        });
    }
    let last = error_norms.len() - 1;
    let at_floor = error_norms.iter().position(|&e| e <= numerical_floor);
    let stalled = error_norms
        .windows(2)
        .position(|w| w[0] - w[1] <= numerical_floor)
        .map(|k| k + 1);
    let k0 = [at_floor, stalled, met, Some(last)]
        .into_iter()
        .flatten()
        .min()
        .unwrap();
    let lo = (0.4 * k0 as f64).floor() as usize;
    let hi = (0.9 * k0 as f64).floor() as usize;
    if hi <= lo {
        return Err(Error::Fit(format!(
            "turning point {k0} leaves fewer than 2 points in the fit window"
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = (lo..=hi)
        .map(|k| (k as f64, error_norms[k].max(f64::MIN_POSITIVE).ln()))
        .unzip();
    let slope = crate::rmt::linear_slope(&x, &y)?;
    Ok(RateFit {
        rate: slope.exp().min(1.0),
        converged: true,
        turning_point: k0,
        window: (lo, hi),
    })
}

/// `eps^(1/K)`: a run with a slower rate cannot reach `eps` in `K` steps.
pub fn default_rate_threshold(eps: f64, max_iters: usize) -> f64 {
    (eps.ln() / max_iters as f64).exp()
}

/// Rates strictly between `threshold` and 1 become 1.
pub fn clamp_rate(rate: f64, threshold: f64) -> f64 {
    if rate > threshold {
        1.0
    } else {
        rate
    }
}

/// Sample counts `round(f n1 n2)` for fractions `f`.
pub fn samples_from_fractions(n1: usize, n2: usize, fractions: &[f64]) -> Vec<usize> {
    fractions
        .iter()
        .map(|f| (f * (n1 * n2) as f64).round() as usize)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n1: usize,
    pub n2: usize,
    pub rank_grid: Vec<usize>,
    /// Absolute sample counts.
    pub sample_grid: Vec<usize>,
    pub runs_per_cell: usize,
    pub seed: u64,
    /// Rank is taken per cell from `rank_grid`; the field here is ignored.
    pub solver: SolverConfig,
    pub epsilon: f64,
    pub rate_threshold: f64,
    /// Standard deviation of the Gaussian perturbation `X0 = M + G`.
    pub init_noise: f64,
    pub keep_traces: bool,
}

impl SweepConfig {
    /// Defaults: `K = 3000`, `eps = 1e-8`, 25 runs, noise `1e-4`, threshold
    /// `eps^(1/K)`.
    pub fn new(n1: usize, n2: usize, rank_grid: Vec<usize>, sample_grid: Vec<usize>) -> Self {
        let max_iters = 3000;
        let epsilon = 1e-8;
        Self {
            n1,
            n2,
            rank_grid,
            sample_grid,
            runs_per_cell: 25,
            seed: 0,
            solver: SolverConfig::ihtsvd(1, max_iters, epsilon),
            epsilon,
            rate_threshold: default_rate_threshold(epsilon, max_iters),
            init_noise: 1e-4,
            keep_traces: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if self.rank_grid.is_empty() || self.sample_grid.is_empty() {
            return Err(Error::invalid("rank and sample grids must be nonempty"));
        }
        let max_rank = self.n1.min(self.n2);
        if let Some(r) = self.rank_grid.iter().find(|&&r| r == 0 || r >= max_rank) {
            return Err(Error::invalid(format!("rank {r} outside 1..{max_rank}")));
        }
        let total = self.n1 * self.n2;
        if let Some(s) = self.sample_grid.iter().find(|&&s| s == 0 || s >= total) {
            return Err(Error::invalid(format!("sample count {s} outside 1..{total}")));
        }
        if self.runs_per_cell == 0 {
            return Err(Error::invalid("runs_per_cell must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if !(self.rate_threshold > 0.0 && self.rate_threshold <= 1.0) {
            return Err(Error::invalid("rate threshold must lie in (0, 1]"));
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::invalid("init noise must be nonnegative"));
        }
        if self.solver.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }

    fn solver_for(&self, r: usize) -> SolverConfig {
        let mut config = self.solver.clone();
        config.rank = r;
        config.relative_tolerance = self.epsilon;
        config
    }
}

/// One solver run inside a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub lambda_min: f64,
    /// `1 - lambda_min` before clamping.
    pub analytical_rate_raw: f64,
    pub analytical_rate: f64,
    pub empirical_rate_raw: f64,
    pub empirical_rate: f64,
    pub converged: bool,
    pub censored: bool,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub sigma_r: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub r: usize,
    pub s: usize,
    pub rho_r: f64,
    pub rho_s: f64,
    pub analytical_mean: f64,
    pub analytical_std: f64,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    pub prob_conv_analytical: f64,
    pub prob_conv_empirical: f64,
    pub rho_infinity: f64,
    pub censored_fraction: f64,
    pub failures: Vec<String>,
    pub runs: Vec<RunRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

struct Truth {
    model: LowRankModel,
    m: DenseMatrix,
}

fn one_run(config: &SweepConfig, truth: &Truth, r: usize, s: usize, run: usize) -> Result<RunRecord> {
    let run_seed = seed::derive(config.seed, &[r as u64, s as u64, run as u64]);
    let omega = uniform_sample(config.n1, config.n2, s, seed::derive(run_seed, &[0]))?;
    // below the degrees of freedom H is singular; skip the eigensolve
    let lambda_min = if s < degrees_of_freedom(config.n1, config.n2, r) {
        0.0
    } else {
        lambda_min_for(&truth.model, &omega)?
    };
    let observed = project_omega(&truth.m, &omega)?;
    let x0 = init_near(&truth.m, config.init_noise, seed::derive(run_seed, &[1]))?;
    let solver = config.solver_for(r);
    let (_, trace) = run_ihtsvd(&observed, &omega, &solver, Some(&x0), Some(&truth.m))?;
    let fit = fit_empirical_rate(&trace.error_norms, solver.numerical_floor, config.epsilon)?;
    let analytical_rate_raw = 1.0 - lambda_min;
    Ok(RunRecord {
        run,
        seed: run_seed,
        lambda_min,
        analytical_rate_raw,
        analytical_rate: clamp_rate(analytical_rate_raw, config.rate_threshold),
        empirical_rate_raw: fit.rate,
        empirical_rate: clamp_rate(fit.rate, config.rate_threshold),
        converged: fit.converged,
        censored: !fit.converged && trace.stop_reason == StopReason::MaxIters,
        stop_reason: trace.stop_reason,
        iterations: trace.iterations_run,
        sigma_r: truth.model.sigma_r(),
        trace: config.keep_traces.then_some(trace.error_norms),
    })
}

/// Runs every `(r, s)` cell. Each rank shares one ground truth across its
/// sample counts; every run draws a fresh observation set and initializer
/// from a seed derived from `(seed, r, s, run)`, so results do not depend on
/// grid order or thread count. Run failures are recorded in their cell.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<CellResult>> {
    config.validate()?;
    let truths: BTreeMap<usize, Truth> = config
        .rank_grid
        .par_iter()
        .map(|&r| {
            let (model, m) = random_orthogonal_model(
                config.n1,
                config.n2,
                r,
                None,
                seed::derive(config.seed, &[r as u64]),
            )?;
            Ok((r, Truth { model, m }))
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = config
        .rank_grid
        .iter()
        .flat_map(|&r| config.sample_grid.iter().map(move |&s| (r, s)))
        .collect();
    let tasks: Vec<(usize, usize, usize)> = cells
        .iter()
        .flat_map(|&(r, s)| (0..config.runs_per_cell).map(move |k| (r, s, k)))
        .collect();
    let outcomes: Vec<Result<RunRecord>> = tasks
        .par_iter()
        .map(|&(r, s, k)| one_run(config, &truths[&r], r, s, k))
        .collect();

    let mut outcomes = outcomes.into_iter();
    let mut results = Vec::with_capacity(cells.len());
    for &(r, s) in &cells {
        let mut runs = Vec::new();
        let mut failures = Vec::new();
        for (k, outcome) in outcomes.by_ref().take(config.runs_per_cell).enumerate() {
            match outcome {
                Ok(record) => runs.push(record),
                Err(e) => failures.push(format!("run {k}: {e}")),
            }
        }
        results.push(summarize(config, r, s, runs, failures)?);
    }
    Ok(results)
}

fn summarize(
    config: &SweepConfig,
    r: usize,
    s: usize,
    runs: Vec<RunRecord>,
    failures: Vec<String>,
) -> Result<CellResult> {
    let params = AsymptoticParams::from_dims(config.n1, config.n2, r, s)?;
    let analytical: Vec<f64> = runs.iter().map(|x| x.analytical_rate).collect();
    let empirical: Vec<f64> = runs.iter().map(|x| x.empirical_rate).collect();
    let (analytical_mean, analytical_std) = mean_std(&analytical);
    let (empirical_mean, empirical_std) = mean_std(&empirical);
    let count = runs.len().max(1) as f64;
    let frac = |pred: &dyn Fn(&RunRecord) -> bool| runs.iter().filter(|x| pred(x)).count() as f64 / count;
    Ok(CellResult {
        r,
        s,
        rho_r: params.rho_r,
        rho_s: params.rho_s,
        analytical_mean,
        analytical_std,
        empirical_mean,
        empirical_std,
        prob_conv_analytical: frac(&|x| x.lambda_min > LAMBDA_ZERO_THRESHOLD),
        prob_conv_empirical: frac(&|x| x.converged),
        rho_infinity: asymptotic_rate(&params),
        censored_fraction: frac(&|x| x.censored),
        failures,
        runs,
    })
}

pub const CELLS_HEADER: &str = "rho_r,rho_s,analytical_mean,analytical_std,empirical_mean,empirical_std,prob_conv_analytical,prob_conv_empirical,rho_infinity,censored_fraction";

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut out = String::from(CELLS_HEADER);
    out.push('\n');
    for c in cells {
        let row = [
            c.rho_r,
            c.rho_s,
            c.analytical_mean,
            c.analytical_std,
            c.empirical_mean,
            c.empirical_std,
            c.prob_conv_analytical,
            c.prob_conv_empirical,
            c.rho_infinity,
            c.censored_fraction,
        ];
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Summary written next to the cell table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub cells: usize,
    pub runs: usize,
    pub failed_runs: usize,
    /// Mean of `(empirical - analytical)^2` over runs where both clamped
    /// rates are below 1.
    pub mean_squared_rate_difference: Option<f64>,
    pub compared_runs: usize,
    pub censored_runs: usize,
}

pub fn sweep_report(config: &SweepConfig, cells: &[CellResult]) -> SweepReport {
    let runs = cells.iter().flat_map(|c| c.runs.iter());
    let diffs: Vec<f64> = runs
        .clone()
        .filter(|x| x.analytical_rate < 1.0 && x.empirical_rate < 1.0)
        .map(|x| (x.empirical_rate - x.analytical_rate).powi(2))
        .collect();
    SweepReport {
        config: config.clone(),
        cells: cells.len(),
        runs: runs.clone().count(),
        failed_runs: cells.iter().map(|c| c.failures.len()).sum(),
        mean_squared_rate_difference: (!diffs.is_empty())
            .then(|| diffs.iter().sum::<f64>() / diffs.len() as f64),
        compared_runs: diffs.len(),
        censored_runs: runs.filter(|x| x.censored).count(),
    }
}

/// Writes `cells.csv`, `report.json` and, when traces were kept,
/// `traces/r{r}_s{s}_run{k}.csv`.
pub fn write_sweep(dir: &Path, config: &SweepConfig, cells: &[CellResult]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("cells.csv"), cells_csv(cells))?;
    let report = sweep_report(config, cells);
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if config.keep_traces {
        let traces = dir.join("traces");
        fs::create_dir_all(&traces)?;
        for cell in cells {
            for run in &cell.runs {
                if let Some(trace) = &run.trace {
                    let name = format!("r{}_s{}_run{}.csv", cell.r, cell.s, run.run);
                    io::write_trace(&traces.join(name), trace)?;
                }
            }
        }
    }
    Ok(())
}
