//! Projected gradient descent for rank-constrained matrix completion:
//! IHTSVD (unit step) and SVP (step `n1 n2 / s`).

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_shape, rank_r_project, DenseMatrix};
use crate::sampling::SamplingSet;
use crate::seed;

/// Number of consecutive non-improving iterations that ends a run.
pub const STAGNATION_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// `eta = 1`, the IHTSVD iteration.
    Unit,
    /// `eta = n1 n2 / s`, singular value projection.
    Svp,
    Fixed(f64),
}

impl StepSize {
    pub fn value(self, omega: &SamplingSet) -> f64 {
        match self {
            StepSize::Unit => 1.0,
            StepSize::Svp => (omega.n1() * omega.n2()) as f64 / omega.len() as f64,
            StepSize::Fixed(eta) => eta,
        }
    }
}

/// Which of the two equivalent IHTSVD recursions to iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateForm {
    /// `X <- P_r(X - eta P_Omega(X - M))`, i.e. project after re-imposing
    /// the observations.
    #[default]
    ProjectLast,
    /// `Y <- P_Omegabar(P_r(Y)) + P_Omega(M)` started from the masked
    /// initializer. The error of every iterate is supported off Omega,
    /// which is the form the error recursion is stated for. Unit step only.
    MaskLast,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rank: usize,
    pub step: StepSize,
    pub max_iters: usize,
    pub relative_tolerance: f64,
    pub numerical_floor: f64,
    #[serde(default)]
    pub form: UpdateForm,
}

impl SolverConfig {
    pub fn ihtsvd(rank: usize, max_iters: usize, relative_tolerance: f64) -> Self {
        Self {
            rank,
            step: StepSize::Unit,
            max_iters,
            relative_tolerance,
            numerical_floor: 1e-12,
            form: UpdateForm::ProjectLast,
        }
    }

    pub fn with_form(mut self, form: UpdateForm) -> Self {
        self.form = form;
        self
    }

    pub fn validate(&self, omega: &SamplingSet) -> Result<()> {
        if self.rank == 0 || self.rank > omega.n1().min(omega.n2()) {
            return Err(Error::invalid(format!("rank {} out of range", self.rank)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.relative_tolerance > 0.0 && self.relative_tolerance < 1.0) {
            return Err(Error::invalid("relative tolerance must lie in (0, 1)"));
        }
        if !(self.numerical_floor >= 0.0) {
            return Err(Error::invalid("numerical floor must be nonnegative"));
        }
        let eta = self.step.value(omega);
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!("step size {eta} must be positive")));
        }
        if self.form == UpdateForm::MaskLast && eta != 1.0 {
            return Err(Error::invalid("the masked update form requires a unit step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    ToleranceMet,
    Stagnated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverTrace {
    /// `||X_k - M||_F` with ground truth, else `||P_Omega(X_k - M)||_F`;
    /// entry `k` belongs to iterate `k`, starting at 0.
    pub error_norms: Vec<f64>,
    pub iterations_run: usize,
    pub stop_reason: StopReason,
    pub step_size: f64,
    pub rank: usize,
    pub ground_truth: bool,
}

fn check_observed(observed: &DenseMatrix, omega: &SamplingSet) -> Result<Vec<bool>> {
    ensure_shape(observed, omega.n1(), omega.n2())?;
    let mask = omega.mask();
    let n2 = omega.n2();
    for (pos, &seen) in mask.iter().enumerate() {
        if !seen && observed[(pos / n2, pos % n2)] != 0.0 {
            return Err(Error::invalid(format!(
                "observed matrix is nonzero at unobserved entry ({}, {})",
                pos / n2,
                pos % n2
            )));
        }
    }
    Ok(mask)
}

/// Writes `P_Omegabar(x) + observed` given the row-major mask of Omega.
fn impose_observed(x: &mut DenseMatrix, observed: &DenseMatrix, mask: &[bool]) {
    let n2 = x.ncols();
    for (pos, &seen) in mask.iter().enumerate() {
        if seen {
            let (i, j) = (pos / n2, pos % n2);
            x[(i, j)] = observed[(i, j)];
        }
    }
}

fn observed_residual(x: &DenseMatrix, observed: &DenseMatrix, mask: &[bool]) -> f64 {
    let n2 = x.ncols();
    mask.iter()
        .enumerate()
        .filter(|(_, &seen)| seen)
        .map(|(pos, _)| {
            let (i, j) = (pos / n2, pos % n2);
            (x[(i, j)] - observed[(i, j)]).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// One projected-gradient step `P_r(X - eta P_Omega(X - M))`, where
/// `observed = P_Omega(M)`.
pub fn pgd_step(
    x: &DenseMatrix,
    observed: &DenseMatrix,
    omega: &SamplingSet,
    r: usize,
    eta: f64,
) -> Result<DenseMatrix> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("step size {eta} must be positive")));
    }
    ensure_shape(x, omega.n1(), omega.n2())?;
    ensure_shape(observed, omega.n1(), omega.n2())?;
    let mut z = x.clone();
    for &(i, j) in omega.indices() {
        z[(i, j)] -= eta * (x[(i, j)] - observed[(i, j)]);
    }
    rank_r_project(&z, r)
}

/// Spectral initializer `P_r(P_Omega(M))`.
pub fn spectral_init(observed: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    rank_r_project(observed, r)
}

/// `M + G` with `G` i.i.d. `N(0, sigma^2)`, deterministic per seed.
pub fn init_near(m: &DenseMatrix, sigma: f64, seed: u64) -> Result<DenseMatrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise level {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let mut rng = seed::rng(seed);
    let noise = DMatrix::from_fn(m.nrows(), m.ncols(), |_, _| {
        sigma * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(m + noise)
}

/// Runs the iteration from `x0` (or the spectral initializer) until the
/// iteration budget, the relative tolerance against `ground_truth`, or
/// stagnation of the tracked error.
///
/// An iteration counts as stagnant when its tracked error fails to set a new
/// minimum above `numerical_floor`; ten in a row stop the run.
pub fn run_ihtsvd(
    observed: &DenseMatrix,
    omega: &SamplingSet,
    config: &SolverConfig,
    x0: Option<&DenseMatrix>,
    ground_truth: Option<&DenseMatrix>,
) -> Result<(DenseMatrix, SolverTrace)> {
    config.validate(omega)?;
    let mask = check_observed(observed, omega)?;
    if let Some(m) = ground_truth {
        ensure_shape(m, omega.n1(), omega.n2())?;
    }
    let eta = config.step.value(omega);
    let r = config.rank;

    let mut x = match x0 {
        Some(x0) => {
            ensure_shape(x0, omega.n1(), omega.n2())?;
            x0.clone()
        }
        None => spectral_init(observed, r)?,
    };
    if config.form == UpdateForm::MaskLast {
        impose_observed(&mut x, observed, &mask);
    }

    let metric = |x: &DenseMatrix| match ground_truth {
        Some(m) => (x - m).norm(),
        None => observed_residual(x, observed, &mask),
    };

    let mut errors = Vec::with_capacity(config.max_iters.min(1 << 16) + 1);
    errors.push(metric(&x));
    let target = config.relative_tolerance * errors[0];
    let mut best = errors[0];
    let mut stagnant = 0usize;
    let mut stop = StopReason::MaxIters;

    for _ in 0..config.max_iters {
        x = match config.form {
            UpdateForm::ProjectLast => pgd_step(&x, observed, omega, r, eta)?,
            UpdateForm::MaskLast => {
                let mut next = rank_r_project(&x, r)?;
                impose_observed(&mut next, observed, &mask);
                next
            }
        };
        let e = metric(&x);
        errors.push(e);

        if ground_truth.is_some() && errors[0] > 0.0 && e <= target {
            stop = StopReason::ToleranceMet;
            break;
        }
        if e < best && e > config.numerical_floor {
            best = e;
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= STAGNATION_WINDOW {
                stop = StopReason::Stagnated;
                break;
            }
        }
    }

    let iterations_run = errors.len() - 1;
    Ok((
        x,
        SolverTrace {
            error_norms: errors,
            iterations_run,
            stop_reason: stop,
            step_size: eta,
            rank: r,
            ground_truth: ground_truth.is_some(),
        },
    ))
}

/// Checks `e_{k+1} <= (1 - lambda_min) e_k + (c1 / sigma_r) e_k^2` along the
/// whole trace, with absolute slack `1e-10`.
pub fn check_descent_inequality(
    trace: &SolverTrace,
    lambda_min: f64,
    sigma_r: f64,
    c1: f64,
) -> bool {
    first_descent_violation(trace, lambda_min, sigma_r, c1).is_none()
}

/// Index `k` of the first step where the descent bound fails.
pub fn first_descent_violation(
    trace: &SolverTrace,
    lambda_min: f64,
    sigma_r: f64,
    c1: f64,
) -> Option<usize> {
    let q = c1 / sigma_r;
    trace.error_norms.windows(2).position(|w| {
        let (e, next) = (w[0], w[1]);
        next > (1.0 - lambda_min) * e + q * e * e + 1e-10
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LowRankModel;
    use crate::rate;
    use crate::sampling::{complement, project_omega, uniform_sample};

    fn rank_r(n1: usize, n2: usize, r: usize, seed: u64) -> DenseMatrix {
        let mut rng = seed::rng(seed);
        let a = DMatrix::from_fn(n1, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(r, n2, |_, _| rng.sample::<f64, _>(StandardNormal));
        a * b
    }

    #[test]
    fn fixed_point_for_any_step() {
        let m = rank_r(8, 6, 2, 1);
        let omega = uniform_sample(8, 6, 30, 2).unwrap();
        let obs = project_omega(&m, &omega).unwrap();
        for eta in [0.5, 1.0, 48.0 / 30.0, 3.0] {
            let next = pgd_step(&m, &obs, &omega, 2, eta).unwrap();
            assert!((next - &m).amax() < 1e-10);
        }
    }

    #[test]
    fn unit_step_is_ihtsvd_composition() {
        let m = rank_r(8, 6, 2, 4);
        let omega = uniform_sample(8, 6, 30, 5).unwrap();
        let obs = project_omega(&m, &omega).unwrap();
        let x = init_near(&m, 0.1, 6).unwrap();
        let step = pgd_step(&x, &obs, &omega, 2, 1.0).unwrap();
        let bar = complement(&omega);
        let composed =
            rank_r_project(&(project_omega(&x, &bar).unwrap() + &obs), 2).unwrap();
        assert!((step - composed).amax() < 1e-12);
    }

    #[test]
    fn svp_step_uses_inverse_sampling_rate() {
        let m = rank_r(8, 6, 2, 7);
        let omega = uniform_sample(8, 6, 24, 8).unwrap();
        let obs = project_omega(&m, &omega).unwrap();
        let x = init_near(&m, 0.1, 9).unwrap();
        let eta = StepSize::Svp.value(&omega);
        assert_eq!(eta, 2.0);
        let gradient = project_omega(&(&x - &m), &omega).unwrap();
        let expected = rank_r_project(&(&x - gradient * 2.0), 2).unwrap();
        let step = pgd_step(&x, &obs, &omega, 2, eta).unwrap();
        assert!((step - expected).amax() < 1e-12);
    }

    #[test]
    fn invalid_steps_and_ranks() {
        let omega = uniform_sample(4, 4, 8, 1).unwrap();
        let z = DMatrix::zeros(4, 4);
        assert!(pgd_step(&z, &z, &omega, 2, 0.0).is_err());
        assert!(pgd_step(&z, &z, &omega, 5, 1.0).is_err());
        let bad = SolverConfig::ihtsvd(0, 10, 1e-8);
        assert!(run_ihtsvd(&z, &omega, &bad, None, None).is_err());
        let mut masked = SolverConfig::ihtsvd(1, 10, 1e-8).with_form(UpdateForm::MaskLast);
        masked.step = StepSize::Svp;
        assert!(run_ihtsvd(&z, &omega, &masked, None, None).is_err());
    }

    #[test]
    fn rank_one_completion_of_ones() {
        // One missing entry of the all-ones matrix. Closed form: the missing
        // value is m[i][0] * m[0][j] / m[0][0] = 1, and H is the 1x1 scalar
        // (1 - 1/n1)(1 - 1/n2), so each step shrinks the error by
        // rho = 1 - (1 - 1/n1)(1 - 1/n2).
        let (n1, n2) = (30, 30);
        let m = DMatrix::from_element(n1, n2, 1.0);
        let indices = (0..n1 * n2 - 1).map(|p| (p / n2, p % n2)).collect();
        let omega = SamplingSet::new(n1, n2, indices).unwrap();
        let obs = project_omega(&m, &omega).unwrap();
        let config = SolverConfig::ihtsvd(1, 50, 1e-12);
        let (x, trace) = run_ihtsvd(&obs, &omega, &config, None, Some(&m)).unwrap();
        assert!((x - &m).amax() < 1e-10);
        let rho: f64 = 1.0 - (1.0 - 1.0 / n1 as f64) * (1.0 - 1.0 / n2 as f64);
        let predicted = (1e-12f64.ln() / rho.ln()).ceil() as usize + 1;
        assert!(trace.iterations_run <= predicted, "{trace:?}");
        let e = &trace.error_norms;
        for k in 1..4 {
            assert!((e[k + 1] / e[k] - rho).abs() < 1e-3, "{e:?}");
        }
    }

    #[test]
    fn start_at_truth_stays_there() {
        let m = rank_r(6, 5, 2, 10);
        let omega = uniform_sample(6, 5, 20, 11).unwrap();
        let obs = project_omega(&m, &omega).unwrap();
        let config = SolverConfig::ihtsvd(2, 100, 1e-8);
        let (_, trace) = run_ihtsvd(&obs, &omega, &config, Some(&m), Some(&m)).unwrap();
        assert!(trace.error_norms.iter().all(|&e| e <= 1e-12));
        assert_eq!(trace.error_norms.len(), trace.iterations_run + 1);
        assert_eq!(trace.stop_reason, StopReason::Stagnated);
    }

    #[test]
    fn init_near_properties() {
        let m = rank_r(20, 20, 2, 12);
        assert_eq!(init_near(&m, 0.0, 3).unwrap(), m);
        assert_eq!(init_near(&m, 0.5, 3).unwrap(), init_near(&m, 0.5, 3).unwrap());
        assert!(init_near(&m, -1.0, 3).is_err());
        let sigma = 1e-4;
        let expect = sigma * 20.0;
        for seed in 0..100 {
            let d = (init_near(&m, sigma, seed).unwrap() - &m).norm();
            // chi with 400 degrees of freedom: sd about 3.5% of the mean
            assert!((d - expect).abs() <= 0.15 * expect, "seed {seed}: {d}");
        }
    }

    #[test]
    fn masked_form_keeps_error_off_omega() {
        let m = rank_r(10, 8, 2, 13);
        let omega = uniform_sample(10, 8, 50, 14).unwrap();
        let obs = project_omega(&m, &omega).unwrap();
        let x0 = init_near(&m, 1e-3, 15).unwrap();
        let mut x = x0;
        let mask = omega.mask();
        impose_observed(&mut x, &obs, &mask);
        for _ in 0..20 {
            let mut next = rank_r_project(&x, 2).unwrap();
            impose_observed(&mut next, &obs, &mask);
            x = next;
            let e = &x - &m;
            let on_omega = project_omega(&e, &omega).unwrap();
            assert!(on_omega.amax() <= 1e-12);
        }
    }

    #[test]
    fn algorithm_trace_rate_matches_analytical_rate() {
        let (n1, n2, r, s) = (20, 16, 2, 160);
        let m = rank_r(n1, n2, r, 16);
        let model = LowRankModel::from_matrix(&m, r).unwrap();
        let omega = uniform_sample(n1, n2, s, 17).unwrap();
        let w = rate::build_w(&complement(&omega), &model).unwrap();
        let lambda = rate::lambda_min_h(&w).unwrap();
        assert!(lambda > 0.0);
        let obs = project_omega(&m, &omega).unwrap();
        let x0 = init_near(&m, 1e-4, 18).unwrap();
        let config = SolverConfig::ihtsvd(r, 3000, 1e-8);
        let (_, trace) = run_ihtsvd(&obs, &omega, &config, Some(&x0), Some(&m)).unwrap();
        assert_eq!(trace.stop_reason, StopReason::ToleranceMet);
        let fit = crate::experiment::fit_empirical_rate(&trace.error_norms, 1e-12, 1e-8).unwrap();
        assert!(fit.converged);
        assert!(
            (fit.rate - (1.0 - lambda)).abs() <= 0.02,
            "fitted {} vs analytical {}",
            fit.rate,
            1.0 - lambda
        );
    }

    #[test]
    fn descent_inequality_examples() {
        let zero = SolverTrace {
            error_norms: vec![0.0; 5],
            iterations_run: 4,
            stop_reason: StopReason::MaxIters,
            step_size: 1.0,
            rank: 1,
            ground_truth: true,
        };
        assert!(check_descent_inequality(&zero, 0.3, 1.0, 9.0));

        let mut geometric = zero.clone();
        geometric.error_norms = (0..20).map(|k| 1e-3 * 0.5f64.powi(k)).collect();
        assert!(check_descent_inequality(&geometric, 0.5, 1.0, 9.0));
        geometric.error_norms[7] *= 3.0;
        assert!(!check_descent_inequality(&geometric, 0.5, 1.0, 9.0));
        assert_eq!(first_descent_violation(&geometric, 0.5, 1.0, 9.0), Some(6));
    }

    #[test]
    fn descent_inequality_holds_inside_region() {
        let (n1, n2, r, s) = (12, 10, 1, 80);
        let m = rank_r(n1, n2, r, 19);
        let model = LowRankModel::from_matrix(&m, r).unwrap();
        let omega = uniform_sample(n1, n2, s, 20).unwrap();
        let w = rate::build_w(&complement(&omega), &model).unwrap();
        let lambda = rate::lambda_min_h(&w).unwrap();
        let c1 = rate::C1_UPPER;
        let radius = rate::roc_radius(lambda, model.sigma_r(), c1);
        let mut x0 = init_near(&m, 1.0, 21).unwrap();
        let d = &x0 - &m;
        x0 = &m + d * (0.9 * radius / (&x0 - &m).norm());
        let obs = project_omega(&m, &omega).unwrap();
        let config = SolverConfig::ihtsvd(r, 2000, 1e-10).with_form(UpdateForm::MaskLast);
        let (_, trace) = run_ihtsvd(&obs, &omega, &config, Some(&x0), Some(&m)).unwrap();
        assert!(check_descent_inequality(&trace, lambda, model.sigma_r(), c1));
        // nonincreasing after the first step
        assert!(trace.error_norms[1..].windows(2).all(|w| w[1] <= w[0] + 1e-10));
    }
}
