//! Sparse analytical motion/force control.
//!
//! Instead of decomposing the stacked dynamics `D·y = d`, the solution set of
//! the constrained dynamics is written directly in terms of a few small
//! orthonormal bases:
//!
//! ```text
//! q̈   = J_c⁺·c_c + Z_c·z_c
//! f_f = U_f·z_f + (I − U_f·U_fᵀ)·f̂_f
//! τ   = (Z_sᵀSᵀ)⁺·Z_sᵀ·(M·q̈ + h − J_fᵀ·f_f) + Z_ss·z_ss
//! ```
//!
//! Force tasks then only see `z_f` and motion tasks only see `z_c`, so the two
//! hierarchies are solved independently. The bases come from four SVDs (`J_s`,
//! `J_f`, `J_f·Z_s`, `S̄·J_sᵀ`); `J_c` and `Z_sᵀSᵀ` are never decomposed.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::constraints::{ConstraintSet, RankReport};
use crate::error::{Error, Result};
use crate::lexls::{lex_solve_scaled, LevelKind, LexOptions, TaskLevel};
use crate::matdecomp::{
    orthonormalize, rank_reveal, rank_reveal_with, spd_inverse, weighted_pinv, Threshold,
    DEFAULT_RANK_TOL,
};
use crate::rbd::{Kinematics, RobotModel, RobotState};

/// Bases and inverses for one constraint configuration.
#[derive(Debug, Clone)]
pub struct SparseDecomposition {
    pub base_dim: usize,
    pub nv: usize,
    pub k_s: usize,
    pub k_f: usize,
    /// `k̂_s`, `k̂_f`, `k̂ = k̂_s + k̂_f`.
    pub rank_s: usize,
    pub rank_f: usize,
    pub rank_c: usize,
    /// Nullspace basis of `J_s`, `nv × (nv − k̂_s)`.
    pub z_s: DMatrix<f64>,
    /// `J_s⁺`.
    pub j_s_pinv: DMatrix<f64>,
    /// Range basis of `J_f`, `k_f × k̂_f`.
    pub u_f: DMatrix<f64>,
    /// Nullspace basis of `J_f·Z_s`.
    pub z_fs: DMatrix<f64>,
    /// Nullspace basis of `J_c`, built as `Z_s·Z_fs`.
    pub z_c: DMatrix<f64>,
    /// `J_c⁺ = [Z_s(J_fZ_s)⁺, (I − Z_s(J_fZ_s)⁺J_f)J_s⁺]`.
    pub j_c_pinv: DMatrix<f64>,
    /// `[−S·J_sᵀ(S̄·J_sᵀ)⁺, I]`: a generalized inverse of `Z_sᵀSᵀ` applied to
    /// `Z_sᵀ`. It is the pseudoinverse only when `k̂_s = b`.
    pub torque_projector_blocks: DMatrix<f64>,
    /// `(Z_sᵀSᵀ)⁺·Z_sᵀ = (I − Z_ss·Z_ssᵀ)·torque_projector_blocks`.
    pub torque_projector: DMatrix<f64>,
    /// Nullspace basis of `Z_sᵀSᵀ`, `n × (k̂_s − b)`.
    pub z_ss: DMatrix<f64>,
    /// Report of the sufficiently-constrained test from `S̄·J_sᵀ`.
    pub support_report: RankReport,
}

impl SparseDecomposition {
    pub fn n(&self) -> usize {
        self.nv - self.base_dim
    }

    fn check(&self, cs: &ConstraintSet) -> Result<()> {
        if cs.nv() != self.nv {
            return Err(Error::StaleDecomposition("velocity dimension changed"));
        }
        if cs.k_s() != self.k_s || cs.k_f() != self.k_f {
            return Err(Error::StaleDecomposition("constraint row count changed"));
        }
        Ok(())
    }
}

/// Runs the four decompositions and assembles every basis.
pub fn decompose(cs: &ConstraintSet, base_dim: usize, tol: f64) -> Result<SparseDecomposition> {
    let nv = cs.nv();
    let b = base_dim;
    if b > nv {
        return Err(Error::dim("base dimension", nv, b));
    }
    let n = nv - b;
    let (j_s, j_f) = (cs.j_s(), cs.j_f());

    let svd_s = rank_reveal(j_s, tol)?;
    let svd_f = rank_reveal(j_f, tol)?;
    let j_s_t_base = j_s.columns(0, b).transpose();
    let svd_sb = rank_reveal(&j_s_t_base, tol)?;

    let support_report = RankReport {
        rank: svd_sb.rank,
        base_dim: b,
        singular_values: svd_sb.singular_values.iter().copied().collect(),
        rank_j_s: svd_s.rank,
    };
    if !support_report.sufficient() {
        return Err(Error::NotSufficientlyConstrained(support_report));
    }

    let z_s = svd_s.null_basis.clone();
    let j_s_pinv = svd_s.pinv();
    let jfzs = j_f * &z_s;
    // Measured against J_f so that a fully dependent block reads as rank 0.
    let f_scale = svd_f.singular_values.iter().copied().fold(0.0, f64::max);
    let svd_fs = rank_reveal_with(&jfzs, Threshold::Absolute(tol * f_scale))?;
    if svd_fs.rank != svd_f.rank {
        return Err(Error::DependentConstraints {
            rank_c: svd_s.rank + svd_fs.rank,
            rank_f: svd_f.rank,
            rank_s: svd_s.rank,
        });
    }
    let z_fs = svd_fs.null_basis.clone();
    let z_c = &z_s * &z_fs;

    let zs_jfzs_pinv = &z_s * svd_fs.pinv();
    let (k_s, k_f) = (cs.k_s(), cs.k_f());
    let mut j_c_pinv = DMatrix::zeros(nv, k_f + k_s);
    j_c_pinv.columns_mut(0, k_f).copy_from(&zs_jfzs_pinv);
    let oblique = DMatrix::identity(nv, nv) - &zs_jfzs_pinv * j_f;
    j_c_pinv.columns_mut(k_f, k_s).copy_from(&(oblique * &j_s_pinv));

    // S·J_sᵀ is the joint block of J_sᵀ.
    let sj_s_t = j_s.columns(b, n).transpose();
    let mut blocks = DMatrix::zeros(n, nv);
    blocks
        .columns_mut(0, b)
        .copy_from(&(-&sj_s_t * svd_sb.pinv()));
    blocks.columns_mut(b, n).fill_with_identity();

    // τ ∈ null(Z_sᵀSᵀ) ⇔ Sᵀτ = J_sᵀλ with S̄J_sᵀλ = 0.
    let z_ss = orthonormalize(&(&sj_s_t * &svd_sb.null_basis), tol);
    let torque_projector = &blocks - &z_ss * (z_ss.transpose() * &blocks);

    Ok(SparseDecomposition {
        base_dim: b,
        nv,
        k_s,
        k_f,
        rank_s: svd_s.rank,
        rank_f: svd_f.rank,
        rank_c: svd_s.rank + svd_f.rank,
        z_s,
        j_s_pinv,
        u_f: svd_f.range_basis,
        z_fs,
        z_c,
        j_c_pinv,
        torque_projector_blocks: blocks,
        torque_projector,
        z_ss,
        support_report,
    })
}

#[derive(Debug, Clone)]
pub struct MotionSolution {
    pub z_c: DVector<f64>,
    pub qdd: DVector<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForceSolution {
    pub z_f: DVector<f64>,
    pub f_f: DVector<f64>,
    pub residuals: Vec<f64>,
}

/// Motion hierarchy over `z_c`: `‖A·Z_c·z_c + A·J_c⁺c_c − a‖`.
pub fn solve_motion(
    dec: &SparseDecomposition,
    cs: &ConstraintSet,
    levels: &[TaskLevel],
    opts: &LexOptions,
) -> Result<MotionSolution> {
    dec.check(cs)?;
    let particular = &dec.j_c_pinv * cs.c_c();
    let reduced = levels
        .iter()
        .map(|l| {
            if l.a.ncols() != dec.nv {
                return Err(Error::dim("motion task width", dec.nv, l.a.ncols()));
            }
            Ok(TaskLevel {
                a: &l.a * &dec.z_c,
                target: &l.target - &l.a * &particular,
                priority: l.priority,
                kind: l.kind,
                name: l.name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scales: Vec<f64> = levels.iter().map(|l| l.a.norm()).collect();
    let sol = lex_solve_scaled(&reduced, dec.z_c.ncols(), opts, &scales)?;
    let qdd = particular + &dec.z_c * &sol.z;
    Ok(MotionSolution {
        z_c: sol.z,
        qdd,
        residuals: sol.residuals,
    })
}

/// Force hierarchy over `z_f`:
/// `‖A·U_f·z_f − a + A·(I − U_f·U_fᵀ)·f̂_f‖`.
pub fn solve_force(
    dec: &SparseDecomposition,
    cs: &ConstraintSet,
    levels: &[TaskLevel],
    f_hat: Option<&DVector<f64>>,
    opts: &LexOptions,
) -> Result<ForceSolution> {
    dec.check(cs)?;
    let k_f = dec.k_f;
    let fixed = if dec.rank_f < k_f {
        let f_hat = f_hat.ok_or(Error::MissingForceMeasurement {
            rank: dec.rank_f,
            rows: k_f,
        })?;
        if f_hat.len() != k_f {
            return Err(Error::dim("force measurement", k_f, f_hat.len()));
        }
        f_hat - &dec.u_f * (dec.u_f.transpose() * f_hat)
    } else {
        DVector::zeros(k_f)
    };
    let reduced = levels
        .iter()
        .map(|l| {
            if l.a.ncols() != k_f {
                return Err(Error::dim("force task width", k_f, l.a.ncols()));
            }
            Ok(TaskLevel {
                a: &l.a * &dec.u_f,
                target: &l.target - &l.a * &fixed,
                priority: l.priority,
                kind: l.kind,
                name: l.name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scales: Vec<f64> = levels.iter().map(|l| l.a.norm()).collect();
    let sol = lex_solve_scaled(&reduced, dec.u_f.ncols(), opts, &scales)?;
    let f_f = &dec.u_f * &sol.z + fixed;
    Ok(ForceSolution {
        z_f: sol.z,
        f_f,
        residuals: sol.residuals,
    })
}

/// How `M·q̈ + h` is evaluated during torque recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TorquePath {
    /// Recursive Newton–Euler, no mass matrix.
    #[default]
    Rnea,
    /// Explicit `M·q̈ + h`.
    Matrix,
}

/// `τ₁ = M·q̈ + h − J_fᵀ·f_f`.
fn generalized_load(
    kin: &Kinematics<'_>,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    path: TorquePath,
) -> Result<DVector<f64>> {
    let nv = cs.nv();
    if qdd.len() != nv {
        return Err(Error::dim("joint accelerations", nv, qdd.len()));
    }
    if f_f.len() != cs.k_f() {
        return Err(Error::dim("controlled forces", cs.k_f(), f_f.len()));
    }
    let mqh = match path {
        TorquePath::Rnea => kin.inverse_dynamics(qdd, &[])?,
        TorquePath::Matrix => kin.mass_matrix() * qdd + kin.bias_forces(),
    };
    Ok(mqh - cs.j_f().transpose() * f_f)
}

pub(crate) fn recover_torques_kin(
    kin: &Kinematics<'_>,
    dec: &SparseDecomposition,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    z_ss: Option<&DVector<f64>>,
    path: TorquePath,
) -> Result<DVector<f64>> {
    dec.check(cs)?;
    let tau1 = generalized_load(kin, cs, qdd, f_f, path)?;
    let mut tau = &dec.torque_projector * tau1;
    if let Some(z) = z_ss {
        if z.len() != dec.z_ss.ncols() {
            return Err(Error::dim("z_ss", dec.z_ss.ncols(), z.len()));
        }
        tau += &dec.z_ss * z;
    }
    Ok(tau)
}

/// `τ = (Z_sᵀSᵀ)⁺·Z_sᵀ·(M·q̈ + h − J_fᵀ·f_f) + Z_ss·z_ss` (`z_ss = 0` when absent).
pub fn recover_torques(
    model: &RobotModel,
    state: &RobotState,
    dec: &SparseDecomposition,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    z_ss: Option<&DVector<f64>>,
    path: TorquePath,
) -> Result<DVector<f64>> {
    recover_torques_kin(&Kinematics::new(model, state), dec, cs, qdd, f_f, z_ss, path)
}

pub(crate) fn optimize_supporting_forces_kin(
    kin: &Kinematics<'_>,
    dec: &SparseDecomposition,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    w_f_inv: &DMatrix<f64>,
    path: TorquePath,
) -> Result<DVector<f64>> {
    dec.check(cs)?;
    if dec.z_ss.ncols() == 0 {
        return Err(Error::TrivialNullspace);
    }
    if w_f_inv.shape() != (dec.k_s, dec.k_s) {
        return Err(Error::dim("supporting-force weight", dec.k_s, w_f_inv.nrows()));
    }
    crate::matdecomp::spd_cholesky(w_f_inv)?;
    let (b, n) = (dec.base_dim, dec.n());
    let tau1 = generalized_load(kin, cs, qdd, f_f, path)?;

    // Q = J_s⁺·W_f⁻¹·J_s⁺ᵀ + Z_s·Z_sᵀ; the supporting-force cost equals
    // (τ₁ − Sᵀτ)ᵀ·Q·(τ₁ − Sᵀτ) on every torque that satisfies the projected
    // dynamics.
    let q = &dec.j_s_pinv * w_f_inv * dec.j_s_pinv.transpose() + &dec.z_s * dec.z_s.transpose();
    let sq = q.rows(b, n).into_owned();
    let sqst = sq.columns(b, n).into_owned();
    let w = spd_inverse(&sqst)?;
    let tau0 = &w * (&sq * &tau1);

    // Minimize (τ − τ₀)ᵀW⁻¹(τ − τ₀) subject to Z_sᵀSᵀτ = Z_sᵀτ₁.
    let zs_st = dec.z_s.rows(b, n).transpose();
    let rhs = dec.z_s.transpose() * &tau1;
    let bw = weighted_pinv(&zs_st, &w, DEFAULT_RANK_TOL)?;
    let tau = &bw * rhs + (&tau0 - &bw * (&zs_st * &tau0));
    Ok(tau)
}

/// Torque that minimizes `f_sᵀ·W_f⁻¹·f_s` over the `Z_ss` freedom while
/// keeping `q̈` and `f_f`.
pub fn optimize_supporting_forces(
    model: &RobotModel,
    state: &RobotState,
    dec: &SparseDecomposition,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    w_f_inv: &DMatrix<f64>,
    path: TorquePath,
) -> Result<DVector<f64>> {
    optimize_supporting_forces_kin(&Kinematics::new(model, state), dec, cs, qdd, f_f, w_f_inv, path)
}

pub(crate) fn recover_fs_kin(
    kin: &Kinematics<'_>,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    tau: &DVector<f64>,
) -> Result<DVector<f64>> {
    let model = kin.model();
    let b = model.base_dim();
    if tau.len() != model.n_joints() {
        return Err(Error::dim("joint torques", model.n_joints(), tau.len()));
    }
    let tau1 = generalized_load(kin, cs, qdd, f_f, TorquePath::Rnea)?;
    let mut r = tau1.clone();
    let mut joints = r.rows_mut(b, model.n_joints());
    joints -= tau;
    let jst = cs.j_s().transpose();
    let rr = rank_reveal(&jst, DEFAULT_RANK_TOL)?;
    let f_s = rr.pinv() * &r;
    let residual = (&jst * &f_s - &r).norm();
    let scale = tau1.norm() + tau.norm();
    if residual > 1e-8 * scale {
        return Err(Error::InconsistentDynamics { residual });
    }
    Ok(f_s)
}

/// Minimum-norm `f_s` with `J_sᵀf_s = M·q̈ + h − J_fᵀf_f − Sᵀτ`.
pub fn recover_fs(
    model: &RobotModel,
    state: &RobotState,
    cs: &ConstraintSet,
    qdd: &DVector<f64>,
    f_f: &DVector<f64>,
    tau: &DVector<f64>,
) -> Result<DVector<f64>> {
    recover_fs_kin(&Kinematics::new(model, state), cs, qdd, f_f, tau)
}

/// Tolerances and switches for one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOptions {
    /// Relative rank cutoff of the four decompositions.
    pub rank_tol: f64,
    /// Per-level cutoff and damping of both hierarchies.
    pub lex: LexOptions,
    /// Run the force and motion hierarchies on two threads.
    pub parallel: bool,
    pub torque_path: TorquePath,
    /// `W_f⁻¹` for supporting-force optimization; `None` keeps `z_ss = 0`.
    pub force_weights: Option<DMatrix<f64>>,
    /// Recover `f_s` for diagnostics.
    pub recover_supporting_forces: bool,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            lex: LexOptions::default(),
            parallel: false,
            torque_path: TorquePath::Rnea,
            force_weights: None,
            recover_supporting_forces: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub decompose: Duration,
    pub solve: Duration,
    pub torque: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub qdd: DVector<f64>,
    pub f_f: DVector<f64>,
    pub tau: DVector<f64>,
    /// Supporting forces recovered from the dynamics, when requested.
    pub f_s: Option<DVector<f64>>,
    pub z_c: DVector<f64>,
    pub z_f: DVector<f64>,
    /// Coordinates of `τ` along `Z_ss`.
    pub z_ss: DVector<f64>,
    pub motion_residuals: Vec<f64>,
    pub force_residuals: Vec<f64>,
    /// Whether the supporting-force optimization produced `τ`.
    pub force_optimized: bool,
    pub ranks: (usize, usize, usize),
    pub timings: Timings,
}

/// One controller tick: decompose, solve both hierarchies, recover torques.
pub fn control_tick(
    model: &RobotModel,
    state: &RobotState,
    cs: &ConstraintSet,
    levels: &[TaskLevel],
    f_hat: Option<&DVector<f64>>,
    options: &ControlOptions,
) -> Result<ControlSolution> {
    let start = Instant::now();
    let mut motion = Vec::new();
    let mut force = Vec::new();
    for (i, l) in levels.iter().enumerate() {
        match l.kind {
            LevelKind::Motion => motion.push(l.clone()),
            LevelKind::Force => force.push(l.clone()),
            LevelKind::Generic => return Err(Error::UntaggedLevel(i)),
        }
    }

    let dec = decompose(cs, model.base_dim(), options.rank_tol)?;
    let t_dec = start.elapsed();

    let t0 = Instant::now();
    let run_force = || solve_force(&dec, cs, &force, f_hat, &options.lex);
    let run_motion = || solve_motion(&dec, cs, &motion, &options.lex);
    let (fs, ms) = if options.parallel {
        rayon::join(run_force, run_motion)
    } else {
        (run_force(), run_motion())
    };
    let (fs, ms) = (fs?, ms?);
    let t_solve = t0.elapsed();

    let t1 = Instant::now();
    let kin = Kinematics::new(model, state);
    let (tau, force_optimized) = match &options.force_weights {
        Some(w) => match optimize_supporting_forces_kin(&kin, &dec, cs, &ms.qdd, &fs.f_f, w, options.torque_path) {
            Ok(tau) => (tau, true),
            Err(Error::TrivialNullspace) => (
                recover_torques_kin(&kin, &dec, cs, &ms.qdd, &fs.f_f, None, options.torque_path)?,
                false,
            ),
            Err(e) => return Err(e),
        },
        None => (
            recover_torques_kin(&kin, &dec, cs, &ms.qdd, &fs.f_f, None, options.torque_path)?,
            false,
        ),
    };
    let t_torque = t1.elapsed();
    let f_s = if options.recover_supporting_forces {
        Some(recover_fs_kin(&kin, cs, &ms.qdd, &fs.f_f, &tau)?)
    } else {
        None
    };
    let z_ss = dec.z_ss.transpose() * &tau;
    Ok(ControlSolution {
        qdd: ms.qdd,
        f_f: fs.f_f,
        tau,
        f_s,
        z_c: ms.z_c,
        z_f: fs.z_f,
        z_ss,
        motion_residuals: ms.residuals,
        force_residuals: fs.residuals,
        force_optimized,
        ranks: (dec.rank_s, dec.rank_f, dec.rank_c),
        timings: Timings {
            decompose: t_dec,
            solve: t_solve,
            torque: t_torque,
            total: start.elapsed(),
        },
    })
}

#[cfg(test)]
mod tests;
