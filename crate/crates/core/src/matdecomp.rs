//! Rank-revealing decompositions, orthonormal range/nullspace bases and
//! (weighted) pseudoinverses.
//!
//! Everything here is built on a full SVD, so range and nullspace bases come
//! from the same orthogonal factors.
//!
//! Basis sign and ordering are unspecified. Compare projectors (`B·Bᵀ`), not
//! raw bases.

use std::cell::Cell;
use std::sync::Once;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used when callers do not pick one.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

thread_local! {
    static DECOMPOSITIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of rank-revealing decompositions performed on this thread so far.
pub fn decomposition_count() -> usize {
    DECOMPOSITIONS.with(Cell::get)
}

/// How singular values are compared against the rank cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// `σ ≤ tol·σ_max` counts as zero.
    Relative(f64),
    /// `σ ≤ tol` counts as zero.
    Absolute(f64),
}

#[derive(Debug, Clone)]
pub struct RankRevealing {
    pub rank: usize,
    /// Orthonormal basis of the column space, `m × rank`.
    pub range_basis: DMatrix<f64>,
    /// Orthonormal basis of the nullspace, `n × (n − rank)`.
    pub null_basis: DMatrix<f64>,
    /// All `min(m, n)` singular values, descending.
    pub singular_values: DVector<f64>,
    /// Orthonormal basis of the row space, `n × rank`.
    pub row_basis: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl RankRevealing {
    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    /// Moore–Penrose pseudoinverse at the decomposition's rank cutoff.
    pub fn pinv(&self) -> DMatrix<f64> {
        let mut vs = self.row_basis.clone();
        for (j, mut col) in vs.column_iter_mut().enumerate() {
            col /= self.singular_values[j];
        }
        vs * self.range_basis.transpose()
    }

    /// `U·Σ·Vᵀ` using every singular value, including those below the cutoff.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let p = self.singular_values.len();
        let mut us = self.u.columns(0, p).into_owned();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.singular_values[j];
        }
        us * self.v.columns(0, p).transpose()
    }

    pub fn nullity(&self) -> usize {
        self.null_basis.ncols()
    }
}

/// SVD-based rank reveal with a cutoff relative to the largest singular value.
pub fn rank_reveal(a: &DMatrix<f64>, tol: f64) -> Result<RankRevealing> {
    rank_reveal_with(a, Threshold::Relative(tol))
}

pub fn rank_reveal_with(a: &DMatrix<f64>, threshold: Threshold) -> Result<RankRevealing> {
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidMatrix);
    }
    DECOMPOSITIONS.with(|c| c.set(c.get() + 1));

    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(RankRevealing {
            rank: 0,
            range_basis: DMatrix::zeros(m, 0),
            null_basis: DMatrix::identity(n, n),
            singular_values: DVector::zeros(0),
            row_basis: DMatrix::zeros(n, 0),
            u: DMatrix::zeros(m, 0),
            v: DMatrix::zeros(n, 0),
        });
    }

    let (u, singular_values, v) = full_svd(a)?;
    let cutoff = match threshold {
        Threshold::Relative(tol) => tol * singular_values[0],
        Threshold::Absolute(tol) => tol,
    };
    let rank = singular_values.iter().take_while(|&&s| s > cutoff).count();

    let range_basis = u.columns(0, rank).into_owned();
    let row_basis = v.columns(0, rank).into_owned();
    let null_basis = v.columns(rank, n - rank).into_owned();

    Ok(RankRevealing {
        rank,
        range_basis,
        null_basis,
        singular_values,
        row_basis,
        u,
        v,
    })
}

/// Full SVD `A = U·Σ·Vᵀ` with `U` square `m×m`, `V` square `n×n` and the
/// `min(m, n)` singular values in nonincreasing order.
fn full_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    static SEQUENTIAL: Once = Once::new();
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
    let (m, n) = a.shape();
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let svd = fa.svd().map_err(|_| Error::InvalidMatrix)?;
    let (fu, fv, fs) = (svd.U(), svd.V(), svd.S().column_vector());
    Ok((
        DMatrix::from_fn(m, m, |i, j| fu[(i, j)]),
        DVector::from_fn(m.min(n), |i, _| fs[i]),
        DMatrix::from_fn(n, n, |i, j| fv[(i, j)]),
    ))
}

/// Orthonormal basis of the complement of `span(basis)`; `basis` must have
/// orthonormal columns.
pub fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = basis.shape();
    if r == 0 {
        return DMatrix::identity(n, n);
    }
    let qr = basis.clone().qr();
    let mut q_t = DMatrix::identity(n, n);
    qr.q_tr_mul(&mut q_t);
    q_t.rows(r, n - r).transpose()
}

pub fn pinv(a: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    Ok(rank_reveal(a, tol)?.pinv())
}

/// `W^{1/2}·(A·W^{1/2})⁺` for symmetric positive-definite `W`.
pub fn weighted_pinv(a: &DMatrix<f64>, w: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if w.nrows() != a.ncols() || w.ncols() != a.ncols() {
        return Err(Error::dim("weighted_pinv weight", a.ncols(), w.nrows()));
    }
    let w_half = spd_sqrt(w)?;
    Ok(&w_half * pinv(&(a * &w_half), tol)?)
}

fn check_spd_input(w: &DMatrix<f64>) -> Result<()> {
    if !w.is_square() {
        return Err(Error::NotPositiveDefinite);
    }
    if !w.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidMatrix);
    }
    let scale = w.amax().max(f64::MIN_POSITIVE);
    if (w - w.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(())
}

/// Cholesky factor of an SPD matrix; failure is reported, never regularized.
pub fn spd_cholesky(w: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    check_spd_input(w)?;
    Cholesky::new(w.clone()).ok_or(Error::NotPositiveDefinite)
}

pub fn spd_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(w)?.inverse())
}

/// Symmetric square root of an SPD matrix.
pub fn spd_sqrt(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_cholesky(w)?;
    let eig = SymmetricEigen::new(w.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Orthonormalizes the columns of `cols` by modified Gram–Schmidt (two passes),
/// dropping columns whose remaining norm falls below `tol` times the largest
/// input column norm.
pub fn orthonormalize(cols: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let scale = cols
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0_f64, f64::max);
    let mut kept: Vec<DVector<f64>> = Vec::new();
    if scale == 0.0 {
        return DMatrix::zeros(cols.nrows(), 0);
    }
    for c in cols.column_iter() {
        let mut v = c.into_owned();
        for _ in 0..2 {
            for q in &kept {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let nrm = v.norm();
        if nrm > tol * scale {
            kept.push(v / nrm);
        }
    }
    if kept.is_empty() {
        DMatrix::zeros(cols.nrows(), 0)
    } else {
        DMatrix::from_columns(&kept)
    }
}

/// Orthogonal projector `B·Bᵀ` onto the span of an orthonormal basis.
pub fn projector(basis: &DMatrix<f64>) -> DMatrix<f64> {
    basis * basis.transpose()
}

/// Largest singular value (spectral norm); zero for empty matrices.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}
