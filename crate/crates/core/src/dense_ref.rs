//! Reference solver on the stacked dynamics `D·y = d`, `y = [q̈; f_c; τ]`:
//!
//! ```text
//! D = [ M    −J_cᵀ  −Sᵀ ]     d = [ −h  ]
//!     [ J_c   0      0  ]         [ c_c ]
//! ```
//!
//! The solution set `y* + K·z_D` comes from one decomposition of `D`.
//! Also hosts the decomposition benchmark against the sparse pipeline.

use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::instances::{random_instance, InstanceParams};
use crate::lexls::{lex_solve_with, LevelKind, LexOptions, TaskLevel};
use crate::matdecomp::{rank_reveal, DEFAULT_RANK_TOL};
use crate::rbd::{Kinematics, RobotModel, RobotState};
use crate::sparse_solver::decompose;

/// Offsets of the blocks of `y`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YLayout {
    pub qdd: Range<usize>,
    pub f_f: Range<usize>,
    pub f_s: Range<usize>,
    pub tau: Range<usize>,
}

impl YLayout {
    pub fn width(&self) -> usize {
        self.tau.end
    }
}

#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub d_mat: DMatrix<f64>,
    pub d_vec: DVector<f64>,
    pub layout: YLayout,
}

pub fn build_dense(model: &RobotModel, state: &RobotState, cs: &ConstraintSet) -> Result<DenseProblem> {
    let kin = Kinematics::new(model, state);
    Ok(build_dense_from(&kin.mass_matrix(), &kin.bias_forces(), cs, model.base_dim()))
}

/// Stacks `D` and `d` from precomputed `M` and `h`.
pub fn build_dense_from(m: &DMatrix<f64>, h: &DVector<f64>, cs: &ConstraintSet, base_dim: usize) -> DenseProblem {
    let nv = cs.nv();
    let n = nv - base_dim;
    let (k_f, k) = (cs.k_f(), cs.k());
    let layout = YLayout {
        qdd: 0..nv,
        f_f: nv..nv + k_f,
        f_s: nv + k_f..nv + k,
        tau: nv + k..nv + k + n,
    };
    let mut d_mat = DMatrix::zeros(nv + k, layout.width());
    d_mat.view_mut((0, 0), (nv, nv)).copy_from(m);
    d_mat.view_mut((0, nv), (nv, k)).copy_from(&(-cs.j_c().transpose()));
    for j in 0..n {
        d_mat[(base_dim + j, nv + k + j)] = -1.0;
    }
    d_mat.view_mut((nv, 0), (k, nv)).copy_from(&cs.j_c());
    let mut d_vec = DVector::zeros(nv + k);
    d_vec.rows_mut(0, nv).copy_from(&(-h));
    d_vec.rows_mut(nv, k).copy_from(&cs.c_c());
    DenseProblem { d_mat, d_vec, layout }
}

impl DenseProblem {
    /// Embeds a level over `q̈` into `y` coordinates.
    pub fn lift_motion(&self, level: &TaskLevel) -> Result<TaskLevel> {
        self.lift(level, self.layout.qdd.clone())
    }

    /// Embeds a level over `f_f` into `y` coordinates.
    pub fn lift_force(&self, level: &TaskLevel) -> Result<TaskLevel> {
        self.lift(level, self.layout.f_f.clone())
    }

    fn lift(&self, level: &TaskLevel, cols: Range<usize>) -> Result<TaskLevel> {
        if level.a.ncols() != cols.len() {
            return Err(Error::dim("lifted level width", cols.len(), level.a.ncols()));
        }
        let mut a = DMatrix::zeros(level.rows(), self.layout.width());
        a.columns_mut(cols.start, cols.len()).copy_from(&level.a);
        Ok(TaskLevel {
            a,
            target: level.target.clone(),
            priority: level.priority,
            kind: LevelKind::Generic,
            name: level.name.clone(),
        })
    }

    /// Pins the part of `f_f` that the dynamics cannot observe
    /// (`null(J_fᵀ)`) to a measurement, as a level over `y`.
    pub fn measurement_level(&self, cs: &ConstraintSet, f_hat: &DVector<f64>, priority: i32) -> Result<TaskLevel> {
        let null = rank_reveal(&cs.j_f().transpose(), DEFAULT_RANK_TOL)?.null_basis;
        let lvl = TaskLevel::new(null.transpose(), null.transpose() * f_hat, priority, LevelKind::Generic)?;
        self.lift_force(&lvl)
    }

    pub fn split(&self, y: &DVector<f64>) -> DenseSolutionParts {
        let get = |r: &Range<usize>| y.rows(r.start, r.len()).into_owned();
        DenseSolutionParts {
            qdd: get(&self.layout.qdd),
            f_f: get(&self.layout.f_f),
            f_s: get(&self.layout.f_s),
            tau: get(&self.layout.tau),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseSolutionParts {
    pub qdd: DVector<f64>,
    pub f_f: DVector<f64>,
    pub f_s: DVector<f64>,
    pub tau: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub y: DVector<f64>,
    pub parts: DenseSolutionParts,
    /// Column count of `K`.
    pub nullity: usize,
    pub rank: usize,
    pub residuals: Vec<f64>,
}

/// `y = D⁺d + K·z_D` with `z_D` from the lexicographic cascade.
pub fn dense_lex_solve(dp: &DenseProblem, levels: &[TaskLevel], opts: &LexOptions) -> Result<DenseSolution> {
    let width = dp.layout.width();
    if let Some(l) = levels.iter().find(|l| l.a.ncols() != width) {
        return Err(Error::dim("dense level width", width, l.a.ncols()));
    }
    // The dynamics and constraint equations form the top level.
    let top = levels.iter().map(|l| l.priority).min().unwrap_or(0).saturating_sub(1);
    let mut all = Vec::with_capacity(levels.len() + 1);
    all.push(TaskLevel {
        a: dp.d_mat.clone(),
        target: dp.d_vec.clone(),
        priority: top,
        kind: LevelKind::Generic,
        name: "dynamics".into(),
    });
    all.extend(levels.iter().cloned());
    let sol = lex_solve_with(&all, width, opts)?;
    let residual = sol.residuals[0];
    if residual > 1e-8 * (dp.d_vec.norm() + dp.d_mat.norm() * sol.z.norm()) {
        return Err(Error::InfeasibleConstraints { residual });
    }
    let rank = sol.level_ranks[0];
    Ok(DenseSolution {
        parts: dp.split(&sol.z),
        y: sol.z,
        nullity: width - rank,
        rank,
        residuals: sol.residuals[1..].to_vec(),
    })
}

/// Effect of a torque through the rigid-contact dynamics: the unique `q̈` and
/// the unique generalized forces `J_fᵀf_f`, `J_sᵀf_s`.
#[derive(Debug, Clone)]
pub struct TorqueEffect {
    pub qdd: DVector<f64>,
    pub jf_t_ff: DVector<f64>,
    pub js_t_fs: DVector<f64>,
}

/// Solves `M·q̈ + h − J_cᵀf_c = Sᵀτ`, `J_c·q̈ = c_c` through the Schur
/// complement `J_c·M⁻¹·J_cᵀ` (pseudoinverted when `J_c` is rank deficient).
pub fn torque_effect(
    model: &RobotModel,
    state: &RobotState,
    cs: &ConstraintSet,
    tau: &DVector<f64>,
) -> Result<TorqueEffect> {
    let kin = Kinematics::new(model, state);
    let m = kin.mass_matrix();
    let h = kin.bias_forces();
    let b = model.base_dim();
    let mut rhs = -h;
    let mut joints = rhs.rows_mut(b, model.n_joints());
    joints += tau;
    let chol = crate::matdecomp::spd_cholesky(&m)?;
    let jc = cs.j_c();
    let minv_jct = chol.solve(&jc.transpose());
    let lambda = &jc * &minv_jct;
    let free = chol.solve(&rhs);
    let f_c = crate::matdecomp::pinv(&lambda, 1e-12)? * (cs.c_c() - &jc * &free);
    let qdd = free + minv_jct * &f_c;
    let (k_f, k_s) = (cs.k_f(), cs.k_s());
    Ok(TorqueEffect {
        qdd,
        jf_t_ff: cs.j_f().transpose() * f_c.rows(0, k_f),
        js_t_fs: cs.j_s().transpose() * f_c.rows(k_f, k_s),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub base_dim: usize,
    pub n: usize,
    pub k_s: usize,
    pub k_f: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub sparse_decompose_ms: f64,
    pub dense_decompose_ms: f64,
    pub ratio: f64,
    pub sparse_std_ms: f64,
    pub dense_std_ms: f64,
    /// Median wall-clock of a full tick (decompose + both hierarchies +
    /// torques) against build + dense lexicographic solve, when requested.
    pub sparse_end_to_end_ms: Option<f64>,
    pub dense_end_to_end_ms: Option<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len().max(2).saturating_sub(1) as f64).sqrt()
}

/// Times the conversion to an unconstrained problem: the sparse
/// decomposition (plus `J_c⁺c_c`) against decomposing `D` (plus `D⁺d`).
/// Runs on the calling thread only.
pub fn bench(params: InstanceParams, repetitions: usize, seed: u64, end_to_end: bool) -> Result<BenchReport> {
    let repetitions = repetitions.max(1);
    let inst = random_instance(params, seed)?;
    let (model, state, cs) = (&inst.model, &inst.state, &inst.constraints);
    let dp = build_dense(model, state, cs)?;
    let b = model.base_dim();

    // warm-up
    for _ in 0..3 {
        let _ = decompose(cs, b, DEFAULT_RANK_TOL)?;
        let _ = rank_reveal(&dp.d_mat, DEFAULT_RANK_TOL)?;
    }
    let mut sparse = Vec::with_capacity(repetitions);
    let mut dense = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        let dec = decompose(cs, b, DEFAULT_RANK_TOL)?;
        let p = &dec.j_c_pinv * cs.c_c();
        sparse.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(p);

        let t = Instant::now();
        let rr = rank_reveal(&dp.d_mat, DEFAULT_RANK_TOL)?;
        let y = rr.pinv() * &dp.d_vec;
        dense.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box((y, rr.null_basis));
    }
    let (sparse_std_ms, dense_std_ms) = (std_dev(&sparse), std_dev(&dense));
    let sparse_ms = median(&mut sparse);
    let dense_ms = median(&mut dense);

    let (mut e2e_s, mut e2e_d) = (None, None);
    if end_to_end {
        let mut r = crate::instances::rng(seed ^ 0x5eed);
        let (motion, force) = crate::instances::random_levels(&mut r, model.nv(), cs.k_f());
        let f_hat = crate::instances::random_vector(&mut r, cs.k_f());
        let mut levels = motion.clone();
        levels.extend(force.iter().cloned());
        let opts = crate::sparse_solver::ControlOptions {
            recover_supporting_forces: false,
            ..Default::default()
        };
        let mut ts = Vec::with_capacity(repetitions);
        let mut td = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            let sol = crate::sparse_solver::control_tick(model, state, cs, &levels, Some(&f_hat), &opts)?;
            ts.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(sol);

            let t = Instant::now();
            let dp = build_dense(model, state, cs)?;
            let mut dl = vec![dp.measurement_level(cs, &f_hat, i32::MIN)?];
            for l in &motion {
                dl.push(dp.lift_motion(l)?);
            }
            for l in &force {
                dl.push(dp.lift_force(l)?);
            }
            let sol = dense_lex_solve(&dp, &dl, &LexOptions::default())?;
            td.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(sol);
        }
        e2e_s = Some(median(&mut ts));
        e2e_d = Some(median(&mut td));
    }

    Ok(BenchReport {
        base_dim: b,
        n: params.n,
        k_s: params.k_s,
        k_f: params.k_f,
        repetitions,
        seed,
        sparse_decompose_ms: sparse_ms,
        dense_decompose_ms: dense_ms,
        ratio: dense_ms / sparse_ms,
        sparse_std_ms,
        dense_std_ms,
        sparse_end_to_end_ms: e2e_s,
        dense_end_to_end_ms: e2e_d,
    })
}
