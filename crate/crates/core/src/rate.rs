//! Local convergence rate of IHTSVD: the matrix `H`, its smallest
//! eigenvalue, the region of convergence and the iteration bound `K(eps)`.
//!
//! `H = S^T (P_Vperp kron P_Uperp) S` restricted to the unobserved entries
//! factors as `H = W W^T` with `W = S^T (V_perp kron U_perp)`. `W` has one
//! row per unobserved entry and `(n1 - r)(n2 - r)` columns, so the smallest
//! eigenvalue of `H` is `sigma_min(W)^2` when `W` is wide and zero when it is
//! tall. Vectorization stacks columns: entry `(i, j)` maps to `i + n1 j`.

use std::env;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, LowRankModel};
use crate::sampling::{self, SamplingSet};
use crate::special::exp_integral_e1;

/// Upper end of the bracket on the Taylor-residual constant, `4 (1 + sqrt 2)`.
pub const C1_UPPER: f64 = 4.0 * (1.0 + std::f64::consts::SQRT_2);
/// Lower end of the bracket, `1 + 1 / sqrt 2`.
pub const C1_LOWER: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;

/// Smallest eigenvalues below this are reported as exactly zero.
pub const LAMBDA_ZERO_THRESHOLD: f64 = 1e-8;
/// Allowed excursion of the unclipped spectrum outside `[0, 1]`.
pub const SPECTRUM_TOL: f64 = 1e-8;

pub const DEFAULT_MEMCAP_BYTES: u128 = 2 << 30;
pub const MEMCAP_ENV: &str = "IHT_RATE_MEMCAP_BYTES";

/// Byte budget for assembling `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryCap(pub u128);

impl Default for MemoryCap {
    fn default() -> Self {
        MemoryCap(DEFAULT_MEMCAP_BYTES)
    }
}

impl MemoryCap {
    /// Reads `IHT_RATE_MEMCAP_BYTES`, falling back to 2 GiB.
    pub fn from_env() -> Result<Self> {
        match env::var(MEMCAP_ENV) {
            Ok(raw) => raw
                .trim()
                .parse::<u128>()
                .map(MemoryCap)
                .map_err(|_| Error::invalid(format!("{MEMCAP_ENV}={raw} is not a byte count"))),
            Err(_) => Ok(MemoryCap::default()),
        }
    }
}

/// Bytes needed to hold `W` for the given instance.
pub fn w_bytes(omega_bar: &SamplingSet, rank: usize) -> u128 {
    let cols = (omega_bar.n1() - rank) as u128 * (omega_bar.n2() - rank) as u128;
    omega_bar.len() as u128 * cols * std::mem::size_of::<f64>() as u128
}

/// Assembles `W` under the memory cap taken from the environment.
pub fn build_w(omega_bar: &SamplingSet, model: &LowRankModel) -> Result<DenseMatrix> {
    build_w_with_cap(omega_bar, model, MemoryCap::from_env()?)
}

pub fn build_w_with_cap(
    omega_bar: &SamplingSet,
    model: &LowRankModel,
    cap: MemoryCap,
) -> Result<DenseMatrix> {
    let (n1, n2) = model.shape();
    if (omega_bar.n1(), omega_bar.n2()) != (n1, n2) {
        return Err(Error::ShapeMismatch {
            expected_rows: n1,
            expected_cols: n2,
            rows: omega_bar.n1(),
            cols: omega_bar.n2(),
        });
    }
    let r = model.rank();
    let required = w_bytes(omega_bar, r);
    if required > cap.0 {
        return Err(Error::ResourceLimit {
            required_bytes: required,
            cap_bytes: cap.0,
        });
    }
    let u_perp = model.u_perp();
    let v_perp = model.v_perp();
    let (ku, kv) = (n1 - r, n2 - r);
    let mut w = DMatrix::zeros(omega_bar.len(), ku * kv);
    for (row, &(i, j)) in omega_bar.indices().iter().enumerate() {
        for b in 0..kv {
            let vb = v_perp[(j, b)];
            for a in 0..ku {
                w[(row, a + ku * b)] = vb * u_perp[(i, a)];
            }
        }
    }
    Ok(w)
}

/// Smallest eigenvalue of `H = W W^T`, clipped to `[0, 1]` and snapped to
/// zero below [`LAMBDA_ZERO_THRESHOLD`].
pub fn lambda_min_h(w: &DenseMatrix) -> Result<f64> {
    let (rows, cols) = w.shape();
    if rows == 0 {
        return Err(Error::invalid("W has no rows: every entry is observed"));
    }
    if rows > cols {
        return Ok(0.0);
    }
    let values = linalg::singular_values(w)?;
    let smallest = values[values.len() - 1];
    let raw = smallest * smallest;
    if !(-SPECTRUM_TOL..=1.0 + SPECTRUM_TOL).contains(&raw) {
        return Err(Error::SpectrumOutOfRange { value: raw });
    }
    let clipped = raw.clamp(0.0, 1.0);
    Ok(if clipped < LAMBDA_ZERO_THRESHOLD { 0.0 } else { clipped })
}

/// `lambda_min(H)` straight from a model and its observation set.
pub fn lambda_min_for(model: &LowRankModel, omega: &SamplingSet) -> Result<f64> {
    let (n1, n2) = model.shape();
    if !sampling::dof_satisfied(n1, n2, model.rank(), omega.len()) {
        return Ok(0.0);
    }
    let w = build_w(&sampling::complement(omega), model)?;
    lambda_min_h(&w)
}

/// Radius `lambda_min sigma_r / c1` of the guaranteed region of convergence.
pub fn roc_radius(lambda_min: f64, sigma_r: f64, c1: f64) -> f64 {
    lambda_min * sigma_r / c1
}

/// `K(eps)` together with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationBound {
    pub k_of_eps: f64,
    pub tau: f64,
    pub c_const: f64,
}

/// Iterations after which `||X_k - M|| <= eps ||X_0 - M||` is guaranteed.
///
/// `c = 1/(rho log(1/rho)) * (E1(log 1/(rho + tau(1-rho))) - E1(log 1/rho)
///      + 1/2 log(log(1/rho) / log(1/(rho + tau(1-rho))))) + 1`
/// and `K = log(1/eps) / log(1/rho) + c`, with
/// `tau = c1 ||X_0 - M|| / (sigma_r lambda_min)`.
pub fn iteration_bound(
    eps: f64,
    lambda_min: f64,
    initial_error: f64,
    sigma_r: f64,
    c1: f64,
) -> Result<IterationBound> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("eps = {eps} must lie in (0, 1]")));
    }
    if !(lambda_min > 0.0 && lambda_min <= 1.0) {
        return Err(Error::invalid(format!(
            "lambda_min = {lambda_min} must lie in (0, 1]"
        )));
    }
    if !(initial_error >= 0.0 && sigma_r > 0.0 && c1 > 0.0) {
        return Err(Error::invalid(
            "initial error must be nonnegative, sigma_r and c1 positive",
        ));
    }
    let tau = c1 * initial_error / (sigma_r * lambda_min);
    if tau >= 1.0 {
        return Err(Error::OutsideRegion { tau });
    }
    let rho = 1.0 - lambda_min;
    if rho <= 0.0 {
        return Err(Error::Domain(
            "the closed-form constant is singular at rho = 0 (lambda_min = 1)".into(),
        ));
    }
    let log_inv_rho = -rho.ln();
    let shifted = rho + tau * (1.0 - rho);
    let log_inv_shifted = -shifted.ln();
    let bracket = exp_integral_e1(log_inv_shifted)? - exp_integral_e1(log_inv_rho)?
        + 0.5 * (log_inv_rho / log_inv_shifted).ln();
    let c_const = bracket / (rho * log_inv_rho) + 1.0;
    let k_of_eps = -eps.ln() / log_inv_rho + c_const;
    Ok(IterationBound {
        k_of_eps,
        tau,
        c_const,
    })
}

/// Analytical rate summary of one `(M, Omega)` instance.
///
/// Non-finite fields serialize as JSON `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub lambda_min: f64,
    pub rho: f64,
    pub roc_radius: f64,
    #[serde(rename = "K_of_eps", with = "nonfinite")]
    pub k_of_eps: f64,
    #[serde(with = "nonfinite")]
    pub tau: f64,
    #[serde(with = "nonfinite")]
    pub c_const: f64,
}

impl RateReport {
    /// Assembles the report from `lambda_min(H)`. With `lambda_min = 0`
    /// there is no guarantee: `rho = 1` and `K`, `tau`, `c` are infinite.
    pub fn from_lambda(
        lambda_min: f64,
        sigma_r: f64,
        c1: f64,
        initial_error: f64,
        eps: f64,
    ) -> Result<Self> {
        let rho = 1.0 - lambda_min;
        let radius = roc_radius(lambda_min, sigma_r, c1);
        if lambda_min == 0.0 {
            return Ok(Self {
                lambda_min,
                rho,
                roc_radius: radius,
                k_of_eps: f64::INFINITY,
                tau: f64::INFINITY,
                c_const: f64::INFINITY,
            });
        }
        let bound = iteration_bound(eps, lambda_min, initial_error, sigma_r, c1)?;
        Ok(Self {
            lambda_min,
            rho,
            roc_radius: radius,
            k_of_eps: bound.k_of_eps,
            tau: bound.tau,
            c_const: bound.c_const,
        })
    }

    pub fn compute(
        model: &LowRankModel,
        omega: &SamplingSet,
        initial_error: f64,
        eps: f64,
        c1: f64,
    ) -> Result<Self> {
        let lambda = lambda_min_for(model, omega)?;
        Self::from_lambda(lambda, model.sigma_r(), c1, initial_error, eps)
    }
}

mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::null_projectors;
    use crate::sampling::{complement, uniform_sample};
    use crate::seed;
    use nalgebra::DVector;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn model(n1: usize, n2: usize, r: usize, seed: u64) -> LowRankModel {
        let mut rng = seed::rng(seed);
        let a = DMatrix::from_fn(n1, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(r, n2, |_, _| rng.sample::<f64, _>(StandardNormal));
        LowRankModel::from_matrix(&(a * b), r).unwrap()
    }

    /// `S^T (P_V kron P_U) S` by explicit Kronecker product.
    fn h_direct(omega_bar: &SamplingSet, model: &LowRankModel) -> DenseMatrix {
        let (pu, pv) = null_projectors(model);
        let big = pv.kronecker(&pu);
        let n1 = model.shape().0;
        let pos: Vec<usize> = omega_bar.indices().iter().map(|&(i, j)| i + n1 * j).collect();
        DMatrix::from_fn(pos.len(), pos.len(), |a, b| big[(pos[a], pos[b])])
    }

    fn remark_two_model() -> LowRankModel {
        LowRankModel::new(
            DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn remark_two_adversarial_pattern() {
        let model = remark_two_model();
        let omega = SamplingSet::new(3, 2, vec![(0, 0), (0, 1), (1, 0), (1, 1)]).unwrap();
        let bar = complement(&omega);
        assert_eq!(bar.indices(), &[(2, 0), (2, 1)]);
        let w = build_w(&bar, &model).unwrap();
        let h = &w * w.transpose();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        assert_eq!(lambda_min_h(&w).unwrap(), 0.0);
        assert!(sampling::dof_satisfied(3, 2, 1, 4));
    }

    #[test]
    fn full_rank_model_gives_empty_w() {
        let m = model(4, 4, 4, 1);
        let omega = uniform_sample(4, 4, 10, 2).unwrap();
        let w = build_w(&complement(&omega), &m).unwrap();
        assert_eq!(w.shape(), (6, 0));
        assert_eq!(lambda_min_h(&w).unwrap(), 0.0);
    }

    #[test]
    fn factorized_matches_direct_kronecker() {
        for (n1, n2, r, s, seed) in [(5, 4, 1, 12, 3), (8, 6, 2, 30, 4), (20, 20, 2, 300, 5), (10, 7, 3, 60, 6)] {
            let m = model(n1, n2, r, seed);
            let omega = uniform_sample(n1, n2, s, seed + 100).unwrap();
            let bar = complement(&omega);
            let w = build_w(&bar, &m).unwrap();
            let direct = h_direct(&bar, &m);
            assert!((&w * w.transpose() - &direct).amax() < 1e-10);
            if w.nrows() <= w.ncols() {
                let lam = linalg::lambda_min_sym(&direct).unwrap();
                let via_w = lambda_min_h(&w).unwrap();
                let expected = if lam < LAMBDA_ZERO_THRESHOLD { 0.0 } else { lam };
                assert!((via_w - expected).abs() < 1e-10, "{via_w} vs {lam}");
            }
        }
    }

    #[test]
    fn tall_w_is_rank_deficient() {
        let m = model(6, 5, 2, 7);
        let dof = sampling::degrees_of_freedom(6, 5, 2);
        let omega = uniform_sample(6, 5, dof - 1, 8).unwrap();
        let w = build_w(&complement(&omega), &m).unwrap();
        assert!(w.nrows() > w.ncols());
        assert_eq!(lambda_min_h(&w).unwrap(), 0.0);
    }

    #[test]
    fn single_unobserved_entry() {
        let m = model(5, 4, 1, 9);
        let all_but: Vec<_> = (0..20).filter(|&p| p != 7).map(|p| (p / 4, p % 4)).collect();
        let omega = SamplingSet::new(5, 4, all_but).unwrap();
        let w = build_w(&complement(&omega), &m).unwrap();
        let (i, j) = (1, 3);
        let expected = m.u_perp().row(i).norm_squared() * m.v_perp().row(j).norm_squared();
        let lam = lambda_min_h(&w).unwrap();
        assert!((lam - expected).abs() < 1e-12);
        assert!(lam > 0.0 && lam < 1.0);
    }

    #[test]
    fn memory_cap_is_enforced() {
        let m = model(6, 5, 1, 10);
        let omega = uniform_sample(6, 5, 10, 11).unwrap();
        let bar = complement(&omega);
        let need = w_bytes(&bar, 1);
        assert_eq!(need, 20 * 20 * 8);
        let err = build_w_with_cap(&bar, &m, MemoryCap(need - 1)).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit { required_bytes, .. } if required_bytes == need));
        assert!(build_w_with_cap(&bar, &m, MemoryCap(need)).is_ok());
    }

    #[test]
    fn lambda_is_monotone_under_nested_sampling() {
        let (n1, n2, r) = (7, 6, 1);
        for t in 0..200u64 {
            let m = model(n1, n2, r, 1000 + t);
            let small = uniform_sample(n1, n2, 20, 2000 + t).unwrap();
            // grow small by a few random extra entries
            let mut extra: Vec<_> = complement(&small).indices().to_vec();
            let mut rng = seed::rng(3000 + t);
            let take = rng.random_range(1..=5);
            let mut grown = small.indices().to_vec();
            for _ in 0..take {
                let k = rng.random_range(0..extra.len());
                grown.push(extra.swap_remove(k));
            }
            let big = SamplingSet::new(n1, n2, grown).unwrap();
            let a = lambda_min_for(&m, &small).unwrap();
            let b = lambda_min_for(&m, &big).unwrap();
            assert!(b >= a - 1e-12, "trial {t}: {a} -> {b}");
        }
    }

    #[test]
    fn roc_radius_examples() {
        assert_eq!(roc_radius(0.0, 3.0, C1_UPPER), 0.0);
        assert_eq!(roc_radius(0.3, 4.0, C1_UPPER), 2.0 * roc_radius(0.3, 2.0, C1_UPPER));
        assert!((roc_radius(0.5, 2.0, C1_UPPER) - 0.103_553_390_593_273_8).abs() < 1e-15);
    }

    #[test]
    fn iteration_bound_limits() {
        let b = iteration_bound(1e-6, 0.3, 0.0, 1.0, C1_UPPER).unwrap();
        assert_eq!(b.tau, 0.0);
        assert_eq!(b.c_const, 1.0);
        assert!((b.k_of_eps - (1e6f64.ln() / (1.0 / 0.7f64).ln() + 1.0)).abs() < 1e-12);

        let tiny = iteration_bound(1e-6, 0.3, 1e-14, 1.0, C1_UPPER).unwrap();
        assert!((tiny.c_const - 1.0).abs() < 1e-6);

        let one = iteration_bound(1.0, 0.3, 0.01, 1.0, C1_UPPER).unwrap();
        assert!((one.k_of_eps - one.c_const).abs() < 1e-15);
    }

    #[test]
    fn iteration_bound_high_precision_value() {
        // lambda_min = 0.5, eps = 1e-8, tau = 0.1; the closed form evaluated
        // with mpmath at 50 digits gives
        //   c = 1.4375831241172562078..., K = 28.013007883216154990...
        let (lambda, sigma_r, c1) = (0.5, 1.0, C1_UPPER);
        let initial_error = 0.1 * sigma_r * lambda / c1;
        let b = iteration_bound(1e-8, lambda, initial_error, sigma_r, c1).unwrap();
        assert!((b.tau - 0.1).abs() < 1e-15);
        assert!((b.c_const - C_MPMATH).abs() < 1e-12, "{}", b.c_const);
        assert!((b.k_of_eps - K_MPMATH).abs() < 1e-12, "{}", b.k_of_eps);
    }

    const C_MPMATH: f64 = 1.437_583_124_117_256_2;
    const K_MPMATH: f64 = 28.013_007_883_216_155;

    #[test]
    fn iteration_bound_errors() {
        assert!(matches!(
            iteration_bound(1e-6, 0.1, 1.0, 1.0, C1_UPPER),
            Err(Error::OutsideRegion { .. })
        ));
        assert!(iteration_bound(0.0, 0.1, 0.0, 1.0, C1_UPPER).is_err());
        assert!(iteration_bound(1e-3, 0.0, 0.0, 1.0, C1_UPPER).is_err());
        assert!(matches!(
            iteration_bound(1e-3, 1.0, 0.0, 1.0, C1_UPPER),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn report_invariants_and_json() {
        let r = RateReport::from_lambda(0.25, 2.0, C1_UPPER, 0.001, 1e-8).unwrap();
        assert_eq!(r.rho, 1.0 - r.lambda_min);
        assert_eq!(r.roc_radius, 0.25 * 2.0 / C1_UPPER);
        assert!(r.k_of_eps.is_finite());
        let json = serde_json::to_value(r).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        for k in ["lambda_min", "rho", "roc_radius", "K_of_eps", "tau", "c_const"] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
        assert_eq!(keys.len(), 6);

        let none = RateReport::from_lambda(0.0, 2.0, C1_UPPER, 0.001, 1e-8).unwrap();
        assert_eq!(none.rho, 1.0);
        assert!(none.k_of_eps.is_infinite());
        let json = serde_json::to_string(&none).unwrap();
        assert!(json.contains("\"K_of_eps\":null"));
        let back: RateReport = serde_json::from_str(&json).unwrap();
        assert!(back.k_of_eps.is_infinite());
    }
}
