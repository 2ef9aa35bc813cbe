//! Random-matrix experiments: Haar sampling, spectra of row-subsampled
//! truncations, histogram comparison against the limiting law, and
//! quadratic-form concentration statistics.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::LimitingEsd;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, DenseMatrix, LowRankModel};
use crate::sampling::partial_permutation;
use crate::seed::{self, Rng};

/// Tolerance on eigenvalues outside `[0, 1]` before clipping.
pub const ESD_TOL: f64 = 1e-8;
const SPLIT_TOL: f64 = 1e-6;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal factor of the thin QR of `g`. With `sign_correct`, each
/// column is multiplied by the sign of the matching diagonal entry of `R`,
/// which makes the factor Haar distributed for Gaussian `g`.
pub fn qr_orthogonal_factor(g: &DenseMatrix, sign_correct: bool) -> DenseMatrix {
    let qr = g.clone().qr();
    let mut q = qr.q();
    if sign_correct {
        let r = qr.r();
        for (k, mut col) in q.column_iter_mut().enumerate() {
            if r[(k, k)] < 0.0 {
                col.neg_mut();
            }
        }
    }
    q
}

/// `n x k` matrix with Haar-distributed orthonormal columns (the first `k`
/// columns of a Haar orthogonal matrix).
pub fn haar_frame(n: usize, k: usize, rng: &mut Rng) -> DenseMatrix {
    qr_orthogonal_factor(&gaussian_matrix(n, k, rng), true)
}

/// Haar-distributed `n x n` orthogonal matrix.
pub fn haar_orthogonal(n: usize, seed: u64) -> DenseMatrix {
    let mut rng = seed::rng(seed);
    haar_frame(n, n, &mut rng)
}

/// `M = U_r diag(sigma) V_r^T` with `U, V` Haar. `singular_values` defaults
/// to `r, r-1, ..., 1`. The model carries the remaining Haar columns as its
/// null bases.
pub fn random_orthogonal_model(
    n1: usize,
    n2: usize,
    r: usize,
    singular_values: Option<&[f64]>,
    seed: u64,
) -> Result<(LowRankModel, DenseMatrix)> {
    if r == 0 || r > n1.min(n2) {
        return Err(Error::invalid(format!("rank {r} outside 1..={}", n1.min(n2))));
    }
    let sigma: Vec<f64> = match singular_values {
        Some(values) => values.to_vec(),
        None => (1..=r).rev().map(|v| v as f64).collect(),
    };
    if sigma.len() != r {
        return Err(Error::invalid(format!("{} singular values for rank {r}", sigma.len())));
    }
    let u = haar_orthogonal(n1, seed::derive(seed, &[0]));
    let v = haar_orthogonal(n2, seed::derive(seed, &[1]));
    let model = LowRankModel::new(
        u.columns(0, r).into_owned(),
        DVector::from_vec(sigma),
        v.columns(0, r).into_owned(),
        u.columns(r, n1 - r).into_owned(),
        v.columns(r, n2 - r).into_owned(),
    )?;
    let m = model.matrix();
    Ok((model, m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    /// Sub-block of a single Haar orthogonal matrix.
    Plain,
    /// Sub-block of `Q1 (x) Q2` with independent Haar factors of side `sqrt(n)`.
    Kronecker,
}

impl std::str::FromStr for Construction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Construction::Plain),
            "kronecker" => Ok(Construction::Kronecker),
            other => Err(Error::invalid(format!(
                "unknown construction '{other}', expected plain or kronecker"
            ))),
        }
    }
}

/// Integral dimensions of a truncation: `rows = pn`, `cols = qn`, and for
/// the Kronecker construction the factor side and per-factor column count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationDims {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub factor_side: Option<usize>,
    pub factor_cols: Option<usize>,
}

impl TruncationDims {
    pub fn p(&self) -> f64 {
        self.rows as f64 / self.n as f64
    }

    pub fn q(&self) -> f64 {
        self.cols as f64 / self.n as f64
    }
}

fn integral(value: f64, name: &str, strict: bool) -> Result<usize> {
    let rounded = value.round();
    if strict && (value - rounded).abs() > SPLIT_TOL {
        return Err(Error::invalid(format!(
            "{name} = {value} is not an integer"
        )));
    }
    Ok(rounded as usize)
}

fn split(n: usize, p: f64, q: f64, construction: Construction, strict: bool) -> Result<TruncationDims> {
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if !(p > 0.0 && p <= 1.0) || !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("p = {p} and q = {q} must lie in (0, 1]")));
    }
    let rows = integral(p * n as f64, "pn", strict)?;
    let (cols, factor_side, factor_cols) = match construction {
        Construction::Plain => (integral(q * n as f64, "qn", strict)?, None, None),
        Construction::Kronecker => {
            let side = integral((n as f64).sqrt(), "sqrt(n)", true)?;
            if side * side != n {
                return Err(Error::invalid(format!("sqrt(n) = {} is not an integer", (n as f64).sqrt())));
            }
            let a = integral(q.sqrt() * side as f64, "sqrt(q) sqrt(n)", strict)?;
            (a * a, Some(side), Some(a))
        }
    };
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!("empty truncation for n = {n}, p = {p}, q = {q}")));
    }
    Ok(TruncationDims {
        n,
        rows,
        cols,
        factor_side,
        factor_cols,
    })
}

/// Exact dimensions; a non-integral split is an argument error naming the
/// offending dimension.
pub fn truncation_dims(n: usize, p: f64, q: f64, construction: Construction) -> Result<TruncationDims> {
    split(n, p, q, construction, true)
}

/// Dimensions rounded to the nearest integers; `p()` and `q()` report the
/// effective ratios.
pub fn rounded_truncation_dims(
    n: usize,
    p: f64,
    q: f64,
    construction: Construction,
) -> Result<TruncationDims> {
    split(n, p, q, construction, false)
}

/// `W_pq`: `pn` uniformly chosen rows of the first `qn` columns of a Haar
/// (or Kronecker-of-Haar) orthogonal matrix.
pub fn sample_truncation(dims: &TruncationDims, construction: Construction, seed: u64) -> Result<DenseMatrix> {
    let mut rng = seed::rng(seed);
    let rows = partial_permutation(dims.n, dims.rows, &mut rng);
    match construction {
        Construction::Plain => {
            let frame = haar_frame(dims.n, dims.cols, &mut rng);
            Ok(frame.select_rows(rows.iter()))
        }
        Construction::Kronecker => {
            let (side, a) = match (dims.factor_side, dims.factor_cols) {
                (Some(side), Some(a)) => (side, a),
                _ => return Err(Error::invalid("dimensions were not split for a Kronecker construction")),
            };
            let f1 = haar_frame(side, a, &mut rng);
            let f2 = haar_frame(side, a, &mut rng);
            // row i1 * side + i2, column j1 * a + j2 of F1 (x) F2
            Ok(DMatrix::from_fn(dims.rows, dims.cols, |k, col| {
                let (i1, i2) = (rows[k] / side, rows[k] % side);
                let (j1, j2) = (col / a, col % a);
                f1[(i1, j1)] * f2[(i2, j2)]
            }))
        }
    }
}

/// Sorted eigenvalues of `W W^T` for a `rows x cols` block with orthonormal
/// columns in an ambient orthogonal matrix, padded with zeros to `rows`
/// entries. Values beyond `[-1e-8, 1 + 1e-8]` are an error; the rest are
/// clipped to `[0, 1]`.
pub fn gram_spectrum(w: &DenseMatrix) -> Result<Vec<f64>> {
    let (rows, cols) = w.shape();
    let gram = if rows <= cols {
        w * w.transpose()
    } else {
        w.transpose() * w
    };
    let mut values = symmetric_eigenvalues(&gram)?;
    for &v in &values {
        if v < -ESD_TOL || v > 1.0 + ESD_TOL {
            return Err(Error::SpectrumOutOfRange { value: v });
        }
    }
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    if rows > cols {
        let mut padded = vec![0.0; rows - cols];
        padded.extend(values);
        values = padded;
    }
    Ok(values)
}

/// Spectrum of `count` uniformly chosen rows of `frame`.
pub fn row_subsampled_spectrum(frame: &DenseMatrix, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 || count > frame.nrows() {
        return Err(Error::invalid(format!(
            "cannot select {count} of {} rows",
            frame.nrows()
        )));
    }
    let mut rng = seed::rng(seed);
    let rows = partial_permutation(frame.nrows(), count, &mut rng);
    gram_spectrum(&frame.select_rows(rows.iter()))
}

/// Empirical spectral distribution of `W_pq W_pq^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsdSample {
    pub eigenvalues: Vec<f64>,
    pub n: usize,
    pub p: f64,
    pub q: f64,
    pub construction: Construction,
    pub seed: u64,
}

impl EsdSample {
    pub fn limit(&self) -> Result<LimitingEsd> {
        limit_for(self.p, self.q)
    }

    pub fn histogram(&self, bins: usize) -> Result<HistogramComparison> {
        histogram_comparison(&self.eigenvalues, self.p, self.q, bins)
    }
}

/// ESD of a truncation with exactly integral dimensions.
pub fn esd_of_truncation(
    n: usize,
    p: f64,
    q: f64,
    construction: Construction,
    seed: u64,
) -> Result<EsdSample> {
    let dims = truncation_dims(n, p, q, construction)?;
    esd_of_dims(&dims, construction, seed)
}

pub fn esd_of_dims(dims: &TruncationDims, construction: Construction, seed: u64) -> Result<EsdSample> {
    let w = sample_truncation(dims, construction, seed)?;
    Ok(EsdSample {
        eigenvalues: gram_spectrum(&w)?,
        n: dims.n,
        p: dims.p(),
        q: dims.q(),
        construction,
        seed,
    })
}

// The limit for p = 1 or q = 1 is a point mass; nudge into the open square.
fn limit_for(p: f64, q: f64) -> Result<LimitingEsd> {
    let clamp = |x: f64| x.clamp(1e-12, 1.0 - 1e-12);
    LimitingEsd::new(clamp(p), clamp(q))
}

/// Scaled histogram of a spectrum next to the bin-averaged limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramComparison {
    pub bin_width: f64,
    /// `count_b / (count w)`.
    pub histogram: Vec<f64>,
    /// Bin-averaged limiting density with the atoms at 0 and 1 added to the
    /// first and last bins.
    pub limit: Vec<f64>,
    /// `sum_b w |histogram_b - limit_b|`.
    pub l1: f64,
    /// `max_b |histogram_b - limit_b|`.
    pub max_deviation: f64,
}

pub fn histogram_comparison(values: &[f64], p: f64, q: f64, bins: usize) -> Result<HistogramComparison> {
    if bins < 10 {
        return Err(Error::invalid(format!("need at least 10 bins, got {bins}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("empty spectrum"));
    }
    let esd = limit_for(p, q)?;
    let w = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let scale = 1.0 / (values.len() as f64 * w);
    let histogram: Vec<f64> = counts.iter().map(|&c| c as f64 * scale).collect();
    let mut limit: Vec<f64> = (0..bins)
        .map(|b| esd.continuous_mass_between(b as f64 * w, (b + 1) as f64 * w) / w)
        .collect();
    limit[0] += esd.mass_at_0 / w;
    limit[bins - 1] += esd.mass_at_1 / w;
    let deviations: Vec<f64> = histogram.iter().zip(&limit).map(|(h, f)| (h - f).abs()).collect();
    Ok(HistogramComparison {
        bin_width: w,
        l1: deviations.iter().sum::<f64>() * w,
        max_deviation: deviations.iter().cloned().fold(0.0, f64::max),
        histogram,
        limit,
    })
}

/// L1 distance between the scaled histogram and the limit.
pub fn histogram_distance(sample: &EsdSample, bins: usize) -> Result<f64> {
    Ok(sample.histogram(bins)?.l1)
}

/// `count` i.i.d. draws from the limiting law by inverse CDF, sorted.
pub fn sample_from_limit(p: f64, q: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    let table = limit_for(p, q)?.quantile_table(4096);
    let mut rng = seed::rng(seed);
    let mut values: Vec<f64> = (0..count).map(|_| table.quantile(rng.random::<f64>())).collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// Sylvester Hadamard matrix of order `2^k`.
pub fn hadamard(k: u32) -> DenseMatrix {
    let mut h = DMatrix::from_element(1, 1, 1.0);
    for _ in 0..k {
        let m = h.nrows();
        let mut next = DMatrix::zeros(2 * m, 2 * m);
        next.view_mut((0, 0), (m, m)).copy_from(&h);
        next.view_mut((0, m), (m, m)).copy_from(&h);
        next.view_mut((m, 0), (m, m)).copy_from(&h);
        next.view_mut((m, m), (m, m)).copy_from(&(-&h));
        h = next;
    }
    h
}

/// `[0.6 sqrt(2/n) H; 0.8 sqrt(2/n) H]` with `H` Hadamard of order `n/2`:
/// an `n x n/2` matrix with orthonormal columns whose rows do not
/// concentrate.
pub fn non_concentrated_example(n: usize) -> Result<DenseMatrix> {
    if n < 2 || n % 2 != 0 || !(n / 2).is_power_of_two() {
        return Err(Error::invalid(format!("n/2 must be a power of two, got n = {n}")));
    }
    let half = n / 2;
    let h = hadamard(half.trailing_zeros());
    let scale = (2.0 / n as f64).sqrt();
    let mut e = DMatrix::zeros(n, half);
    e.view_mut((0, 0), (half, half)).copy_from(&(&h * (0.6 * scale)));
    e.view_mut((half, 0), (half, half)).copy_from(&(&h * (0.8 * scale)));
    Ok(e)
}

/// `max_i |a_i^T M a_i - tr(M) / n|` over the rows `a_i` of an `n x k`
/// frame; small values mean the rows concentrate for this `M`.
pub fn row_quadratic_deviation(frame: &DenseMatrix, m: &DenseMatrix) -> Result<f64> {
    let (n, k) = frame.shape();
    if m.shape() != (k, k) {
        return Err(Error::ShapeMismatch {
            expected_rows: k,
            expected_cols: k,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let centre = m.trace() / n as f64;
    let am = frame * m;
    Ok(am
        .row_iter()
        .zip(frame.row_iter())
        .map(|(x, a)| (x.dot(&a) - centre).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorFamily {
    /// `a` with `qn` i.i.d. `N(0, 1/n)` entries.
    Gaussian,
    /// `a = b (x) c` with `b, c` each `qn` i.i.d. `N(0, 1/n)` entries.
    KroneckerGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdFamily {
    Identity,
    /// `G G^T` scaled to unit spectral norm, drawn once per `n`. For the
    /// Kronecker family the matrix is `A (x) B` of two such factors.
    Wishart,
}

impl std::str::FromStr for VectorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(VectorFamily::Gaussian),
            "kronecker_gaussian" | "kronecker-gaussian" => Ok(VectorFamily::KroneckerGaussian),
            other => Err(Error::invalid(format!("unknown vector family '{other}'"))),
        }
    }
}

impl std::str::FromStr for PsdFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PsdFamily::Identity),
            "wishart" => Ok(PsdFamily::Wishart),
            other => Err(Error::invalid(format!("unknown matrix family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPoint {
    pub n: usize,
    /// Length of each Gaussian factor, `round(q n)`.
    pub dim: usize,
    pub mean: f64,
    pub variance: f64,
    /// Exact variance where a closed form exists (Gaussian family).
    pub predicted_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub vector_family: VectorFamily,
    pub matrix_family: PsdFamily,
    pub q: f64,
    pub trials: usize,
    pub points: Vec<ConcentrationPoint>,
    /// Least-squares slope of `ln variance` against `ln n`.
    pub slope: f64,
}

fn wishart_unit(dim: usize, rng: &mut Rng) -> Result<DenseMatrix> {
    let g = gaussian_matrix(dim, dim, rng);
    let m = &g * g.transpose();
    let top = *symmetric_eigenvalues(&m)?.last().unwrap();
    Ok(m / top)
}

fn quad(m: &Option<DenseMatrix>, x: &DVector<f64>) -> f64 {
    match m {
        None => x.norm_squared(),
        Some(m) => x.dot(&(m * x)),
    }
}

fn trace_of(m: &Option<DenseMatrix>, dim: usize) -> f64 {
    m.as_ref().map_or(dim as f64, |m| m.trace())
}

/// Least-squares slope of `y` against `x`.
pub fn linear_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Fit(format!("need two or more paired points, got {}", x.len())));
    }
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy / sxx)
}

/// Sample mean and variance of `a^T M a - tr(M) / m` for each `n`, where
/// `m = n` (Gaussian) or `n^2` (Kronecker), and the fitted log-log decay
/// slope of the variance in `n`.
pub fn quad_form_concentration_test(
    vector_family: VectorFamily,
    matrix_family: PsdFamily,
    q: f64,
    n_grid: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("q = {q} must lie in (0, 1]")));
    }
    if trials < 2 || n_grid.is_empty() {
        return Err(Error::invalid("need at least two trials and one n"));
    }
    let mut points = Vec::with_capacity(n_grid.len());
    for (idx, &n) in n_grid.iter().enumerate() {
        let dim = (q * n as f64).round() as usize;
        if dim == 0 {
            return Err(Error::invalid(format!("q n rounds to zero at n = {n}")));
        }
        let cell_seed = seed::derive(seed, &[idx as u64, n as u64]);
        let mut mrng = seed::rng(seed::derive(cell_seed, &[u64::MAX]));
        let (ma, mb) = match matrix_family {
            PsdFamily::Identity => (None, None),
            PsdFamily::Wishart => (
                Some(wishart_unit(dim, &mut mrng)?),
                match vector_family {
                    VectorFamily::Gaussian => None,
                    VectorFamily::KroneckerGaussian => Some(wishart_unit(dim, &mut mrng)?),
                },
            ),
        };
        let nf = n as f64;
        let sd = 1.0 / nf.sqrt();
        let centre = match vector_family {
            VectorFamily::Gaussian => trace_of(&ma, dim) / nf,
            VectorFamily::KroneckerGaussian => trace_of(&ma, dim) * trace_of(&mb, dim) / (nf * nf),
        };
        let stats: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(seed::derive(cell_seed, &[t as u64]));
                let mut draw = || DVector::from_fn(dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
                let value = match vector_family {
                    VectorFamily::Gaussian => quad(&ma, &draw()),
                    // (b (x) c)^T (A (x) B)(b (x) c) = (b^T A b)(c^T B c)
                    VectorFamily::KroneckerGaussian => {
                        let b = draw();
                        let c = draw();
                        quad(&ma, &b) * quad(&mb, &c)
                    }
                };
                value - centre
            })
            .collect();
        let mean = stats.iter().sum::<f64>() / trials as f64;
        let variance = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let predicted_variance = match vector_family {
            VectorFamily::Gaussian => {
                let fro2 = ma.as_ref().map_or(dim as f64, |m| m.norm_squared());
                Some(2.0 * fro2 / (nf * nf))
            }
            VectorFamily::KroneckerGaussian => None,
        };
        points.push(ConcentrationPoint {
            n,
            dim,
            mean,
            variance,
            predicted_variance,
        });
    }
    let slope = if points.len() >= 2 {
        let x: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
        let y: Vec<f64> = points.iter().map(|p| p.variance.ln()).collect();
        linear_slope(&x, &y)?
    } else {
        f64::NAN
    };
    Ok(ConcentrationReport {
        vector_family,
        matrix_family,
        q,
        trials,
        points,
        slope,
    })
}
