//! Observation sets, masking operators and the incoherence metric.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{ensure_shape, DenseMatrix};
use crate::seed::{self, Rng};

/// Observed index pairs `(i, j)` of an `n1 x n2` matrix, 0-based and sorted
/// in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingSet {
    n1: usize,
    n2: usize,
    indices: Vec<(usize, usize)>,
}

impl SamplingSet {
    /// Builds a set from arbitrary-order pairs. Rejects duplicates, pairs out
    /// of range, and cardinalities outside `1..n1*n2`.
    pub fn new(n1: usize, n2: usize, mut indices: Vec<(usize, usize)>) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(Error::invalid("sampling set dimensions must be positive"));
        }
        let total = n1 * n2;
        if indices.is_empty() || indices.len() >= total {
            return Err(Error::invalid(format!(
                "|omega| = {} must lie in 1..{total}",
                indices.len()
            )));
        }
        if let Some(&(i, j)) = indices.iter().find(|&&(i, j)| i >= n1 || j >= n2) {
            return Err(Error::invalid(format!(
                "index ({i}, {j}) outside a {n1}x{n2} matrix"
            )));
        }
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "duplicate index ({}, {})",
                w[0].0, w[0].1
            )));
        }
        Ok(Self { n1, n2, indices })
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.indices.binary_search(&(i, j)).is_ok()
    }

    /// Row-major membership mask of length `n1 * n2`.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n1 * self.n2];
        for &(i, j) in &self.indices {
            mask[i * self.n2 + j] = true;
        }
        mask
    }

    fn check_matrix(&self, a: &DenseMatrix) -> Result<()> {
        ensure_shape(a, self.n1, self.n2)
    }
}

/// Draws `count` distinct positions out of `0..population` by a partial
/// Fisher-Yates shuffle. Order is the shuffle order.
pub fn partial_permutation(population: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..population).collect();
    let (chosen, _) = positions.partial_shuffle(rng, count);
    chosen.to_vec()
}

/// Uniformly random `s`-subset of the `n1 x n2` grid, deterministic per seed.
pub fn uniform_sample(n1: usize, n2: usize, s: usize, seed: u64) -> Result<SamplingSet> {
    let total = n1 * n2;
    if s == 0 || s >= total {
        return Err(Error::invalid(format!("s = {s} must lie in 1..{total}")));
    }
    let mut rng = seed::rng(seed);
    let indices = partial_permutation(total, s, &mut rng)
        .into_iter()
        .map(|pos| (pos / n2, pos % n2))
        .collect();
    SamplingSet::new(n1, n2, indices)
}

/// `P_Omega`: keeps the observed entries and zeros the rest.
pub fn project_omega(a: &DenseMatrix, omega: &SamplingSet) -> Result<DenseMatrix> {
    omega.check_matrix(a)?;
    let mut out = DMatrix::zeros(omega.n1, omega.n2);
    for &(i, j) in omega.indices() {
        out[(i, j)] = a[(i, j)];
    }
    Ok(out)
}

/// Unobserved pairs, row-major ordered.
pub fn complement(omega: &SamplingSet) -> SamplingSet {
    let mask = omega.mask();
    let indices = mask
        .iter()
        .enumerate()
        .filter(|(_, &seen)| !seen)
        .map(|(pos, _)| (pos / omega.n2, pos % omega.n2))
        .collect();
    SamplingSet {
        n1: omega.n1,
        n2: omega.n2,
        indices,
    }
}

/// Degrees of freedom `(n1 + n2 - r) r` of a rank-r `n1 x n2` matrix.
pub fn degrees_of_freedom(n1: usize, n2: usize, r: usize) -> usize {
    (n1 + n2 - r) * r
}

/// Whether `s` observations reach the degrees of freedom of the problem.
pub fn dof_satisfied(n1: usize, n2: usize, r: usize, s: usize) -> bool {
    s >= degrees_of_freedom(n1, n2, r)
}

/// `mu = (n / r) * max_i ||Q[i, :]||^2` for an orthonormal `n x r` factor.
pub fn incoherence(q: &DenseMatrix) -> Result<f64> {
    let (n, r) = q.shape();
    if r == 0 || n == 0 {
        return Err(Error::invalid("incoherence needs a nonempty factor"));
    }
    let gram = q.transpose() * q;
    if (gram - DMatrix::identity(r, r)).amax() > 1e-8 {
        return Err(Error::invalid("factor columns are not orthonormal within 1e-8"));
    }
    let max_row = q
        .row_iter()
        .map(|row| row.norm_squared())
        .fold(0.0, f64::max);
    Ok(n as f64 / r as f64 * max_row)
}
