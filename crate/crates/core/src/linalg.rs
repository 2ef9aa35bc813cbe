//! Dense kernels: SVD, rank-r projection, null-space projectors and the
//! first-order residual of the rank-r projection.

use faer::{Mat, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Real rectangular matrix carrying every numerical quantity in the crate.
pub type DenseMatrix = DMatrix<f64>;

/// Orthonormality tolerance for factor checks.
pub const ORTHO_TOL: f64 = 1e-10;
/// Relative reconstruction tolerance of the SVD.
pub const RECON_TOL: f64 = 1e-9;


/// Thin singular value decomposition with nonincreasing singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub left_vectors: DenseMatrix,
    pub singular_values: DVector<f64>,
    pub right_vectors: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled = &self.left_vectors * DMatrix::from_diagonal(&self.singular_values);
        scaled * self.right_vectors.transpose()
    }

    /// Sum of the leading `r` singular triplets.
    pub fn truncate(&self, r: usize) -> DenseMatrix {
        let u = self.left_vectors.columns(0, r);
        let v = self.right_vectors.columns(0, r);
        let mut us = u.into_owned();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.singular_values[j];
        }
        us * v.transpose()
    }
}

pub(crate) fn ensure_finite(a: &DenseMatrix) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{}x{} matrix has non-finite entries",
            a.nrows(),
            a.ncols()
        )))
    }
}

pub(crate) fn ensure_shape(a: &DenseMatrix, rows: usize, cols: usize) -> Result<()> {
    if a.shape() == (rows, cols) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected_rows: rows,
            expected_cols: cols,
            rows: a.nrows(),
            cols: a.ncols(),
        })
    }
}

fn to_faer(a: &DenseMatrix) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(m: MatRef<'_, f64>) -> DenseMatrix {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    ensure_finite(a)?;
    let (rows, cols) = a.shape();
    let m = rows.min(cols);
    if m == 0 {
        return Ok(SvdResult {
            left_vectors: DMatrix::zeros(rows, 0),
            singular_values: DVector::zeros(0),
            right_vectors: DMatrix::zeros(cols, 0),
        });
    }
    // faer returns the singular values in nonincreasing order
    let f = to_faer(a)
        .thin_svd()
        .map_err(|_| Error::NoConvergence { rows, cols })?;
    let s = f.S().column_vector();
    Ok(SvdResult {
        left_vectors: from_faer(f.U()),
        singular_values: DVector::from_fn(m, |k, _| s[k]),
        right_vectors: from_faer(f.V()),
    })
}

/// Singular values alone, nonincreasing.
pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>> {
    ensure_finite(a)?;
    let (rows, cols) = a.shape();
    if rows.min(cols) == 0 {
        return Ok(Vec::new());
    }
    to_faer(a)
        .singular_values()
        .map_err(|_| Error::NoConvergence { rows, cols })
}

/// Companion diagnostic of a rank-r projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionDiagnostic {
    /// `sigma_r == sigma_{r+1}` up to round-off: the projection is not unique.
    pub degenerate_gap: bool,
    pub sigma_r: f64,
    pub sigma_next: Option<f64>,
}

fn check_rank(r: usize, rows: usize, cols: usize) -> Result<()> {
    if r == 0 || r > rows.min(cols) {
        Err(Error::invalid(format!(
            "rank {r} outside 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )))
    } else {
        Ok(())
    }
}

/// Best rank-r approximation in Frobenius norm.
pub fn rank_r_project(a: &DenseMatrix, r: usize) -> Result<DenseMatrix> {
    rank_r_project_diagnosed(a, r).map(|(p, _)| p)
}

pub fn rank_r_project_diagnosed(
    a: &DenseMatrix,
    r: usize,
) -> Result<(DenseMatrix, ProjectionDiagnostic)> {
    check_rank(r, a.nrows(), a.ncols())?;
    let f = svd(a)?;
    let sigma_r = f.singular_values[r - 1];
    let sigma_next = (r < f.singular_values.len()).then(|| f.singular_values[r]);
    let scale = f.singular_values[0].max(f64::MIN_POSITIVE);
    let degenerate_gap = sigma_next
        .map(|s| sigma_r > 0.0 && (sigma_r - s) <= 1e-12 * scale)
        .unwrap_or(false);
    Ok((
        f.truncate(r),
        ProjectionDiagnostic {
            degenerate_gap,
            sigma_r,
            sigma_next,
        },
    ))
}

/// Orthonormal basis of the orthogonal complement of the span of `q`'s columns.
///
/// `q` must have orthonormal columns. Returns an `n x (n - k)` matrix, with
/// zero columns when `q` is square.
pub fn orthonormal_complement(q: &DenseMatrix) -> DenseMatrix {
    let (n, k) = q.shape();
    if k >= n {
        return DMatrix::zeros(n, 0);
    }
    let mut stacked = DMatrix::zeros(n, k + n);
    stacked.view_mut((0, 0), (n, k)).copy_from(q);
    stacked
        .view_mut((0, k), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    let full_q = stacked.qr().q();
    full_q.columns(k, n - k).into_owned()
}

fn max_gram_defect(q: &DenseMatrix) -> f64 {
    let g = q.transpose() * q;
    let k = g.nrows();
    (g - DMatrix::identity(k, k)).amax()
}

/// Factors of a rank-r ground truth together with complementary null bases.
#[derive(Debug, Clone)]
pub struct LowRankModel {
    u_r: DenseMatrix,
    sigma_r: DVector<f64>,
    v_r: DenseMatrix,
    u_perp: DenseMatrix,
    v_perp: DenseMatrix,
}

impl LowRankModel {
    pub fn new(
        u_r: DenseMatrix,
        sigma_r: DVector<f64>,
        v_r: DenseMatrix,
        u_perp: DenseMatrix,
        v_perp: DenseMatrix,
    ) -> Result<Self> {
        let (n1, r) = u_r.shape();
        let n2 = v_r.nrows();
        check_rank(r, n1, n2)?;
        ensure_shape(&v_r, n2, r)?;
        ensure_shape(&u_perp, n1, n1 - r)?;
        ensure_shape(&v_perp, n2, n2 - r)?;
        if sigma_r.len() != r {
            return Err(Error::invalid(format!(
                "{} singular values for rank {r}",
                sigma_r.len()
            )));
        }
        if sigma_r[r - 1] <= 0.0 || sigma_r.iter().zip(sigma_r.iter().skip(1)).any(|(a, b)| b > a)
        {
            return Err(Error::invalid(
                "singular values must be positive and nonincreasing",
            ));
        }
        for (name, basis) in [("U_r", &u_r), ("V_r", &v_r), ("U_perp", &u_perp), ("V_perp", &v_perp)] {
            if basis.ncols() > 0 && max_gram_defect(basis) > ORTHO_TOL {
                return Err(Error::invalid(format!("{name} is not orthonormal")));
            }
        }
        if (u_r.transpose() * &u_perp).amax() > ORTHO_TOL
            || (v_r.transpose() * &v_perp).amax() > ORTHO_TOL
        {
            return Err(Error::invalid("null bases are not orthogonal to the factors"));
        }
        Ok(Self {
            u_r,
            sigma_r,
            v_r,
            u_perp,
            v_perp,
        })
    }

    /// Factors a matrix of rank `r` (the `r`-th singular value must clear
    /// `max(n1, n2) eps sigma_1`) and completes the null bases.
    pub fn from_matrix(m: &DenseMatrix, r: usize) -> Result<Self> {
        check_rank(r, m.nrows(), m.ncols())?;
        let f = svd(m)?;
        // numerical rank, same cutoff as LAPACK's default rank estimate
        let cutoff = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * f.singular_values[0];
        if f.singular_values[r - 1] <= cutoff {
            return Err(Error::invalid(format!("matrix has rank below {r}")));
        }
        let u_r = f.left_vectors.columns(0, r).into_owned();
        let v_r = f.right_vectors.columns(0, r).into_owned();
        let u_perp = orthonormal_complement(&u_r);
        let v_perp = orthonormal_complement(&v_r);
        let sigma = f.singular_values.rows(0, r).into_owned();
        Self::new(u_r, sigma, v_r, u_perp, v_perp)
    }

    pub fn rank(&self) -> usize {
        self.u_r.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u_r.nrows(), self.v_r.nrows())
    }

    pub fn u_r(&self) -> &DenseMatrix {
        &self.u_r
    }

    pub fn v_r(&self) -> &DenseMatrix {
        &self.v_r
    }

    pub fn u_perp(&self) -> &DenseMatrix {
        &self.u_perp
    }

    pub fn v_perp(&self) -> &DenseMatrix {
        &self.v_perp
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.sigma_r
    }

    /// Smallest nonzero singular value of the ground truth.
    pub fn sigma_r(&self) -> f64 {
        self.sigma_r[self.rank() - 1]
    }

    pub fn matrix(&self) -> DenseMatrix {
        let mut us = self.u_r.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.sigma_r[j];
        }
        us * self.v_r.transpose()
    }
}

/// Returns `(P_U_perp, P_V_perp)`.
pub fn null_projectors(model: &LowRankModel) -> (DenseMatrix, DenseMatrix) {
    let pu = model.u_perp() * model.u_perp().transpose();
    let pv = model.v_perp() * model.v_perp().transpose();
    (pu, pv)
}

/// Residual of the first-order expansion of the rank-r projection around M:
/// `P_r(M + delta) - M - delta + P_U_perp * delta * P_V_perp`.
pub fn taylor_residual(model: &LowRankModel, delta: &DenseMatrix) -> Result<DenseMatrix> {
    let (n1, n2) = model.shape();
    ensure_shape(delta, n1, n2)?;
    let m = model.matrix();
    let projected = rank_r_project(&(&m + delta), model.rank())?;
    let (pu, pv) = null_projectors(model);
    Ok(projected - m - delta + pu * delta * pv)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min_sym(a: &DenseMatrix) -> Result<f64> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::invalid(format!("{rows}x{cols} matrix is not square")));
    }
    if rows == 0 {
        return Err(Error::invalid("empty matrix has no eigenvalues"));
    }
    ensure_finite(a)?;
    if (a - a.transpose()).amax() > 1e-10 {
        return Err(Error::invalid("matrix is not symmetric within 1e-10"));
    }
    Ok(symmetric_eigenvalues(a)?[0])
}

/// Sorted (nondecreasing) eigenvalues of a symmetric matrix, read from its
/// lower triangle.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::invalid(format!("{rows}x{cols} matrix is not square")));
    }
    ensure_finite(a)?;
    if rows == 0 {
        return Ok(Vec::new());
    }
    let mut values = to_faer(a)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| Error::NoConvergence { rows, cols })?;
    values.sort_by(f64::total_cmp);
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = seed::rng(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn rank_r_matrix(rows: usize, cols: usize, r: usize, seed: u64) -> DenseMatrix {
        gaussian(rows, r, seed) * gaussian(r, cols, seed + 1)
    }

    #[test]
    fn svd_of_identity_and_diagonal() {
        let f = svd(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(f.singular_values.as_slice(), &[1.0, 1.0, 1.0]);
        let f = svd(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]))).unwrap();
        assert!((f.singular_values[0] - 3.0).abs() < 1e-15);
        assert!((f.singular_values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal() {
        for (rows, cols) in [(5, 4), (4, 5), (7, 7), (1, 3)] {
            let a = gaussian(rows, cols, 11);
            let f = svd(&a).unwrap();
            assert!((f.reconstruct() - &a).norm() <= RECON_TOL * a.norm());
            assert!(max_gram_defect(&f.left_vectors) <= ORTHO_TOL);
            assert!(max_gram_defect(&f.right_vectors) <= ORTHO_TOL);
            let s = f.singular_values.as_slice();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rank_r_project_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let p = rank_r_project(&d, 1).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0]));
        assert!((p - expected).amax() < 1e-14);

        let m = rank_r_matrix(6, 5, 2, 3);
        assert!((rank_r_project(&m, 2).unwrap() - &m).norm() < 1e-9 * m.norm().max(1.0));

        assert!(rank_r_project(&m, 0).is_err());
        assert!(rank_r_project(&m, 6).is_err());
    }

    #[test]
    fn degenerate_gap_flagged() {
        let (_, diag) = rank_r_project_diagnosed(&DMatrix::identity(3, 3), 1).unwrap();
        assert!(diag.degenerate_gap);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let (_, diag) = rank_r_project_diagnosed(&d, 1).unwrap();
        assert!(!diag.degenerate_gap);
    }

    #[test]
    fn eckart_young_against_random_candidates() {
        let a = gaussian(6, 5, 21);
        let best = rank_r_project(&a, 2).unwrap();
        let err = (&a - &best).norm();
        // reference truncation from the raw nalgebra SVD
        let raw = a.clone().svd(true, true);
        let mut idx: Vec<usize> = (0..5).collect();
        idx.sort_by(|&i, &j| raw.singular_values[j].total_cmp(&raw.singular_values[i]));
        let u = raw.u.as_ref().unwrap();
        let vt = raw.v_t.as_ref().unwrap();
        let mut reference = DMatrix::zeros(6, 5);
        for &k in &idx[..2] {
            reference += raw.singular_values[k] * u.column(k) * vt.row(k);
        }
        assert!((&best - reference).amax() < 1e-10);
        for t in 0..1000 {
            let cand = rank_r_matrix(6, 5, 2, 1000 + 2 * t);
            // scale candidates so they are comparable in size
            let cand = &cand * (a.norm() / cand.norm());
            assert!(err <= (&a - cand).norm() + 1e-9);
        }
    }

    #[test]
    fn complement_and_projectors() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let model = LowRankModel::from_matrix(&m, 1).unwrap();
        let (pu, pv) = null_projectors(&model);
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        assert!((&pu - &expected).amax() < 1e-15);
        assert!((&pv - &expected).amax() < 1e-15);

        let full = LowRankModel::from_matrix(&gaussian(3, 3, 5), 3).unwrap();
        let (pu, pv) = null_projectors(&full);
        assert_eq!(pu.shape(), (3, 3));
        assert_eq!(pu.amax(), 0.0);
        assert_eq!(pv.amax(), 0.0);

        let m = rank_r_matrix(5, 4, 2, 9);
        let model = LowRankModel::from_matrix(&m, 2).unwrap();
        let (pu, pv) = null_projectors(&model);
        assert!((pu.trace() - 3.0).abs() < 1e-10);
        assert!((pv.trace() - 2.0).abs() < 1e-10);
        for p in [&pu, &pv] {
            assert!((p * p - p).amax() < 1e-10);
            assert!((p - p.transpose()).amax() < 1e-10);
        }
        assert!((&pu * &m).amax() < 1e-9);
        assert!((&m * &pv).amax() < 1e-9);
    }

    #[test]
    fn model_rejects_bad_factors() {
        let m = rank_r_matrix(4, 3, 1, 2);
        let good = LowRankModel::from_matrix(&m, 1).unwrap();
        let bad_sigma = DVector::from_vec(vec![-1.0]);
        assert!(LowRankModel::new(
            good.u_r().clone(),
            bad_sigma,
            good.v_r().clone(),
            good.u_perp().clone(),
            good.v_perp().clone()
        )
        .is_err());
        assert!(LowRankModel::new(
            good.u_r().clone(),
            good.singular_values().clone(),
            good.v_r().clone(),
            good.u_perp() * 2.0,
            good.v_perp().clone()
        )
        .is_err());
        assert!(LowRankModel::from_matrix(&m, 2).is_err());
    }

    #[test]
    fn taylor_residual_zero_and_bound() {
        let m = rank_r_matrix(6, 5, 2, 31);
        let model = LowRankModel::from_matrix(&m, 2).unwrap();
        let r0 = taylor_residual(&model, &DMatrix::zeros(6, 5)).unwrap();
        assert!(r0.amax() < 1e-9);

        let c1 = 4.0 * (1.0 + 2f64.sqrt());
        let sigma_r = model.sigma_r();
        let mut delta = gaussian(6, 5, 77);
        delta *= 0.01 * sigma_r / delta.norm();
        let res = taylor_residual(&model, &delta).unwrap();
        assert!(res.norm() <= c1 / sigma_r * delta.norm_squared());

        assert!(taylor_residual(&model, &DMatrix::zeros(5, 5)).is_err());
    }

    #[test]
    fn lambda_min_sym_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        assert_eq!(lambda_min_sym(&d).unwrap(), 0.0);
        assert!((lambda_min_sym(&DMatrix::identity(4, 4)).unwrap() - 1.0).abs() < 1e-15);
        let mut asym = DMatrix::identity(2, 2);
        asym[(0, 1)] = 1.0;
        assert!(lambda_min_sym(&asym).is_err());
        assert!(lambda_min_sym(&DMatrix::zeros(0, 0)).is_err());
    }
}
