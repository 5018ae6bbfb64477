//! Lexicographic least squares over a cascade of unconstrained levels
//! `min ‖A_i·z − a_i‖`, solved by sequential nullspace recursion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matdecomp::{rank_reveal_with, Threshold, DEFAULT_RANK_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LevelKind {
    /// Rows act on joint accelerations `q̈`.
    Motion,
    /// Rows act on controlled constraint forces `f_f`.
    Force,
    Generic,
}

/// One priority level; lower `priority` values are solved first.
#[derive(Debug, Clone)]
pub struct TaskLevel {
    pub a: DMatrix<f64>,
    pub target: DVector<f64>,
    pub priority: i32,
    pub kind: LevelKind,
    pub name: String,
}

impl TaskLevel {
    pub fn new(
        a: DMatrix<f64>,
        target: DVector<f64>,
        priority: i32,
        kind: LevelKind,
    ) -> Result<Self> {
        if a.nrows() != target.len() {
            return Err(Error::dim("task level target", a.nrows(), target.len()));
        }
        Ok(Self {
            a,
            target,
            priority,
            kind,
            name: String::new(),
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn residual(&self, z: &DVector<f64>) -> f64 {
        (&self.a * z - &self.target).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexOptions {
    /// Rank cutoff for each projected level, relative to the Frobenius norm
    /// of that level's unprojected matrix.
    pub tol: f64,
    /// Tikhonov damping `λ` applied to every level (0 disables it).
    pub damping: f64,
}

impl Default for LexOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_RANK_TOL,
            damping: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LexSolution {
    pub z: DVector<f64>,
    /// `‖A_i·z − a_i‖`, in the order the levels were given.
    pub residuals: Vec<f64>,
    /// Rank each level contributed after projection, in input order.
    pub level_ranks: Vec<usize>,
    /// Dimension of the freedom left after the last level.
    pub remaining_dim: usize,
}

pub fn lex_solve(levels: &[TaskLevel], dim: usize, tol: f64) -> Result<LexSolution> {
    lex_solve_with(
        levels,
        dim,
        &LexOptions {
            tol,
            ..LexOptions::default()
        },
    )
}

pub fn lex_solve_with(levels: &[TaskLevel], dim: usize, opts: &LexOptions) -> Result<LexSolution> {
    let scales: Vec<f64> = levels.iter().map(|l| l.a.norm()).collect();
    lex_solve_scaled(levels, dim, opts, &scales)
}

/// Like [`lex_solve_with`], with the rank cutoff of level `i` taken as
/// `tol·scales[i]`. Callers that hand in levels already mapped into a reduced
/// coordinate system pass the norms of the original levels, so that a level
/// whose reduced matrix is pure roundoff is recognized as rank zero.
pub fn lex_solve_scaled(
    levels: &[TaskLevel],
    dim: usize,
    opts: &LexOptions,
    scales: &[f64],
) -> Result<LexSolution> {
    if scales.len() != levels.len() {
        return Err(Error::dim("level scales", levels.len(), scales.len()));
    }
    for l in levels {
        if l.a.ncols() != dim {
            return Err(Error::dim("task level width", dim, l.a.ncols()));
        }
        if l.a.nrows() != l.target.len() {
            return Err(Error::dim("task level target", l.a.nrows(), l.target.len()));
        }
    }
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by_key(|&i| levels[i].priority);

    let mut z = DVector::zeros(dim);
    let mut n = DMatrix::identity(dim, dim);
    let mut level_ranks = vec![0; levels.len()];
    for &i in &order {
        let level = &levels[i];
        if n.ncols() == 0 {
            break;
        }
        if level.rows() == 0 {
            continue;
        }
        let b = &level.a * &n;
        let r = &level.target - &level.a * &z;
        let cutoff = opts.tol * scales[i];
        let rr = rank_reveal_with(&b, Threshold::Absolute(cutoff))?;
        let w = if opts.damping > 0.0 {
            damped_solve(&rr, &r, opts.damping)
        } else {
            rr.pinv() * &r
        };
        z += &n * w;
        n = &n * &rr.null_basis;
        level_ranks[i] = rr.rank;
    }
    let residuals = levels.iter().map(|l| l.residual(&z)).collect();
    Ok(LexSolution {
        z,
        residuals,
        level_ranks,
        remaining_dim: n.ncols(),
    })
}

/// `V·diag(σ/(σ² + λ²))·Uᵀ·r` over the retained singular directions.
fn damped_solve(rr: &crate::matdecomp::RankRevealing, r: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let ur = rr.range_basis.transpose() * r;
    let scaled = DVector::from_iterator(
        rr.rank,
        ur.iter()
            .zip(rr.singular_values.iter())
            .map(|(u, s)| u * s / (s * s + lambda * lambda)),
    );
    &rr.row_basis * scaled
}
