//! Verification suites behind `sparse-wbc verify`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde_json::{json, Value};
use sparse_wbc::dense_ref::{build_dense, dense_lex_solve, torque_effect};
use sparse_wbc::instances::{instance_batch, random_levels, random_matrix, random_spd, random_state, random_vector, rng, Instance};
use sparse_wbc::lexls::LexOptions;
use sparse_wbc::matdecomp::{pinv, projector, rank_reveal, spd_inverse, spd_sqrt, weighted_pinv, DEFAULT_RANK_TOL};
use sparse_wbc::rbd::{integrate, BaseKind, Kinematics, RobotModel, RobotState};
use sparse_wbc::sparse_solver::{control_tick, decompose, recover_torques, solve_force, solve_motion, ControlOptions, TorquePath};
use sparse_wbc::tasks::{min_jerk, Trajectory};

#[derive(Debug, Clone)]
pub struct Tolerances {
    pub oracle: f64,
    pub identity: f64,
    pub dynamics: f64,
    pub jacobian: f64,
    pub weighted: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            oracle: 1e-8,
            identity: 1e-9,
            dynamics: 1e-9,
            jacobian: 1e-6,
            weighted: 1e-10,
        }
    }
}

/// Outcome of one named check over many cases.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    /// Informational checks are reported but do not affect the exit code.
    pub gating: bool,
    pub cases: usize,
    pub failures: usize,
    pub max_residual: f64,
    pub errors: Vec<String>,
}

impl Check {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            gating: true,
            cases: 0,
            failures: 0,
            max_residual: 0.0,
            errors: Vec::new(),
        }
    }

    fn informational(mut self) -> Self {
        self.gating = false;
        self
    }

    fn record(&mut self, residual: f64) {
        self.cases += 1;
        if residual.is_nan() || residual > self.tolerance {
            self.failures += 1;
        }
        if residual.is_nan() {
            self.max_residual = f64::NAN;
        } else if !self.max_residual.is_nan() {
            self.max_residual = self.max_residual.max(residual);
        }
    }

    fn error(&mut self, context: String, e: impl std::fmt::Display) {
        self.cases += 1;
        self.failures += 1;
        self.errors.push(format!("{context}: {e}"));
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn to_json(&self) -> Value {
        json!({
            "name": self.name,
            "passed": self.passed(),
            "gating": self.gating,
            "tolerance": self.tolerance,
            "cases": self.cases,
            "failures": self.failures,
            "max_residual": if self.max_residual.is_finite() { json!(self.max_residual) } else { json!(null) },
            "errors": self.errors,
        })
    }
}

pub struct Suite {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

pub struct Report {
    pub seed: u64,
    pub instances: usize,
    pub suites: Vec<Suite>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites
            .iter()
            .flat_map(|s| &s.checks)
            .all(|c| !c.gating || c.passed())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "seed": self.seed,
            "instances": self.instances,
            "passed": self.passed(),
            "suites": self.suites.iter().map(|s| json!({
                "name": s.name,
                "passed": s.checks.iter().all(|c| !c.gating || c.passed()),
                "seconds": s.seconds,
                "checks": s.checks.iter().map(Check::to_json).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<28} {:>6} {:>6} {:>12} {:>10}  status\n",
            "suite", "check", "cases", "fail", "max resid", "tol"
        );
        for s in &self.suites {
            for c in &s.checks {
                let status = match (c.passed(), c.gating) {
                    (true, _) => "ok",
                    (false, true) => "FAIL",
                    (false, false) => "deviates (informational)",
                };
                out += &format!(
                    "{:<12} {:<28} {:>6} {:>6} {:>12.3e} {:>10.1e}  {status}\n",
                    s.name, c.name, c.cases, c.failures, c.max_residual, c.tolerance
                );
            }
        }
        out
    }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn rel_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn timed(name: &'static str, f: impl FnOnce() -> Vec<Check>) -> Suite {
    let t = Instant::now();
    let checks = f();
    Suite {
        name,
        checks,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Sparse tick against the dense lexicographic solve.
fn oracle(batch: &[Instance], seed: u64, tol: &Tolerances) -> Vec<Check> {
    let mut qdd = Check::new("qdd", tol.oracle);
    let mut f_f = Check::new("f_f", tol.oracle);
    let mut effect = Check::new("torque_effect", tol.oracle);
    let mut dyn_res = Check::new("dense_dynamics_residual", tol.oracle);
    for (i, inst) in batch.iter().enumerate() {
        let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
        let mut r = rng(seed.wrapping_add(1000 + i as u64));
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let f_hat = random_vector(&mut r, cs.k_f()) * 10.0;
        let mut levels = motion.clone();
        levels.extend(force.iter().cloned());
        let run = || -> sparse_wbc::Result<_> {
            let sol = control_tick(m, s, cs, &levels, Some(&f_hat), &ControlOptions::default())?;
            let dp = build_dense(m, s, cs)?;
            let mut dl = vec![dp.measurement_level(cs, &f_hat, i32::MIN)?];
            for l in &motion {
                dl.push(dp.lift_motion(l)?);
            }
            for l in &force {
                dl.push(dp.lift_force(l)?);
            }
            let dense = dense_lex_solve(&dp, &dl, &LexOptions::default())?;
            let es = torque_effect(m, s, cs, &sol.tau)?;
            let ed = torque_effect(m, s, cs, &dense.parts.tau)?;
            let res = (&dp.d_mat * &dense.y - &dp.d_vec).norm() / (1.0 + dp.d_vec.norm());
            Ok((sol, dense, es, ed, res))
        };
        match run() {
            Ok((sol, dense, es, ed, res)) => {
                qdd.record(rel_v(&sol.qdd, &dense.parts.qdd));
                f_f.record(rel_v(&sol.f_f, &dense.parts.f_f));
                effect.record(rel_v(&es.qdd, &ed.qdd).max(rel_v(&es.jf_t_ff, &ed.jf_t_ff)));
                dyn_res.record(res);
            }
            Err(e) => qdd.error(format!("instance {i}"), e),
        }
    }
    vec![qdd, f_f, effect, dyn_res]
}

/// Sparse bases against directly decomposed counterparts.
fn identities(batch: &[Instance], tol: &Tolerances) -> Vec<Check> {
    let mut jc = Check::new("jc_pinv_block_formula", tol.identity);
    let mut zc = Check::new("zc_projector", tol.identity);
    let mut tp = Check::new("torque_projector", tol.identity);
    let mut blocks = Check::new("torque_projector_blocks", tol.identity).informational();
    for (i, inst) in batch.iter().enumerate() {
        let cs = &inst.constraints;
        let b = inst.model.base_dim();
        let run = || -> sparse_wbc::Result<_> {
            let dec = decompose(cs, b, DEFAULT_RANK_TOL)?;
            let j_c = cs.j_c();
            let direct_jc = pinv(&j_c, DEFAULT_RANK_TOL)?;
            let direct_zc = rank_reveal(&j_c, DEFAULT_RANK_TOL)?.null_basis;
            let n = cs.nv() - b;
            let zs_st = dec.z_s.rows(b, n).transpose();
            let direct_tp = pinv(&zs_st, DEFAULT_RANK_TOL)? * dec.z_s.transpose();
            Ok((dec, direct_jc, direct_zc, direct_tp))
        };
        match run() {
            Ok((dec, direct_jc, direct_zc, direct_tp)) => {
                jc.record(rel(&dec.j_c_pinv, &direct_jc));
                zc.record(rel(&projector(&dec.z_c), &projector(&direct_zc)));
                tp.record(rel(&dec.torque_projector, &direct_tp));
                blocks.record(rel(&dec.torque_projector_blocks, &direct_tp));
            }
            Err(e) => jc.error(format!("instance {i}"), e),
        }
    }
    vec![jc, zc, tp, blocks]
}

/// Oblique nullspace correction of `A⁺` against the weighted pseudoinverse,
/// with the metric that makes the two agree and with `W` itself.
fn weighted(seed: u64, count: usize, tol: f64) -> Vec<Check> {
    let mut inv_half = Check::new("weighted_pinv_oblique", tol);
    let mut literal = Check::new("weighted_pinv_literal_metric", tol).informational();
    let mut r = rng(seed ^ 0x77);
    for i in 0..count {
        let m = 1 + i % 5;
        let n = m + 1 + (i * 7) % 6;
        let a = random_matrix(&mut r, m, n);
        let w = random_spd(&mut r, n);
        let run = || -> sparse_wbc::Result<_> {
            let wp = weighted_pinv(&a, &w, DEFAULT_RANK_TOL)?;
            let z = rank_reveal(&a, DEFAULT_RANK_TOL)?.null_basis;
            let a_pinv = pinv(&a, DEFAULT_RANK_TOL)?;
            let eye = DMatrix::identity(n, n);
            let metric = spd_sqrt(&spd_inverse(&w)?)?;
            let oblique = (&eye - &z * pinv(&(&metric * &z), DEFAULT_RANK_TOL)? * &metric) * &a_pinv;
            let lit = (&eye - &z * pinv(&(&w * &z), DEFAULT_RANK_TOL)? * &w) * &a_pinv;
            Ok((rel(&oblique, &wp), rel(&lit, &wp)))
        };
        match run() {
            Ok((o, l)) => {
                inv_half.record(o);
                literal.record(l);
            }
            Err(e) => inv_half.error(format!("pair {i}"), e),
        }
    }
    vec![inv_half, literal]
}

/// RNEA against the mass-matrix route, both for `M·q̈ + h` and for the
/// recovered torques.
fn dynamics(batch: &[Instance], models: &[RobotModel], seed: u64, tol: &Tolerances) -> Vec<Check> {
    let mut spd = Check::new("mass_matrix_spd", 1e-12);
    let mut id = Check::new("rnea_vs_matrix", tol.dynamics);
    let mut paths = Check::new("torque_paths", tol.dynamics);
    let mut check_state = |m: &RobotModel, s: &RobotState, qdd: DVector<f64>| {
        let kin = Kinematics::new(m, s);
        let mm = kin.mass_matrix();
        let sym = (&mm - mm.transpose()).amax() / mm.amax().max(1.0);
        let chol_ok = mm.clone().cholesky().is_some();
        spd.record(if chol_ok { sym } else { f64::INFINITY });
        match kin.inverse_dynamics(&qdd, &[]) {
            Ok(t) => id.record(rel_v(&t, &(&mm * &qdd + kin.bias_forces()))),
            Err(e) => id.error(m.name().to_string(), e),
        }
    };
    let mut r = rng(seed ^ 0x1d);
    for inst in batch {
        let qdd = random_vector(&mut r, inst.model.nv());
        check_state(&inst.model, &inst.state, qdd);
    }
    for m in models {
        for _ in 0..5 {
            let s = random_state(&mut r, m);
            let qdd = random_vector(&mut r, m.nv());
            check_state(m, &s, qdd);
        }
    }
    for (i, inst) in batch.iter().enumerate() {
        let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
        let mut r = rng(seed.wrapping_add(2000 + i as u64));
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let f_hat = random_vector(&mut r, cs.k_f());
        let run = || -> sparse_wbc::Result<_> {
            let dec = decompose(cs, m.base_dim(), DEFAULT_RANK_TOL)?;
            let ms = solve_motion(&dec, cs, &motion, &LexOptions::default())?;
            let fs = solve_force(&dec, cs, &force, Some(&f_hat), &LexOptions::default())?;
            let a = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Rnea)?;
            let b = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Matrix)?;
            Ok((&a - &b).amax() / b.amax().max(1.0))
        };
        match run() {
            Ok(x) => paths.record(x),
            Err(e) => paths.error(format!("instance {i}"), e),
        }
    }
    vec![spd, id, paths]
}

fn rotation_delta(plus: &Matrix3<f64>, minus: &Matrix3<f64>) -> Vector3<f64> {
    let d = plus * minus.transpose();
    0.5 * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)])
}

/// Central differences of frame poses along each velocity coordinate.
fn fd_jacobian(m: &RobotModel, s: &RobotState, frame: sparse_wbc::rbd::FrameId, eps: f64) -> sparse_wbc::Result<DMatrix<f64>> {
    let nv = m.nv();
    let rows = m.base().task_dim();
    let mut j = DMatrix::zeros(rows, nv);
    for i in 0..nv {
        let mut e = DVector::zeros(nv);
        e[i] = 1.0;
        let plus = RobotState::new(m, integrate(m, &s.q, &e, eps), s.qd.clone())?;
        let minus = RobotState::new(m, integrate(m, &s.q, &e, -eps), s.qd.clone())?;
        let (pp, rp) = Kinematics::new(m, &plus).frame_pose(frame)?;
        let (pm, rm) = Kinematics::new(m, &minus).frame_pose(frame)?;
        let lin = (pp - pm) / (2.0 * eps);
        let ang = rotation_delta(&rp, &rm) / (2.0 * eps);
        let col: Vec<f64> = match m.base() {
            BaseKind::Planar => vec![lin.x, lin.y, ang.z],
            BaseKind::Floating => vec![lin.x, lin.y, lin.z, ang.x, ang.y, ang.z],
        };
        j.set_column(i, &DVector::from_vec(col));
    }
    Ok(j)
}

fn jacobians(batch: &[Instance], models: &[RobotModel], seed: u64, tol: &Tolerances) -> Vec<Check> {
    let mut frames = Check::new("frame_jacobian_fd", tol.jacobian);
    let mut com = Check::new("com_jacobian_fd", tol.jacobian);
    let mut r = rng(seed ^ 0x7ac);
    let mut states: Vec<(&RobotModel, RobotState)> = batch.iter().take(20).map(|i| (&i.model, i.state.clone())).collect();
    for m in models {
        for _ in 0..3 {
            states.push((m, random_state(&mut r, m)));
        }
    }
    let eps = 1e-6;
    for (m, s) in &states {
        let kin = Kinematics::new(m, s);
        let ids: Vec<_> = m.frame_names().filter_map(|n| m.frame_id(n).ok()).collect();
        for id in ids {
            match (kin.frame_jacobian(id), fd_jacobian(m, s, id, eps)) {
                (Ok(a), Ok(f)) => frames.record(rel(&a, &f)),
                (Err(e), _) | (_, Err(e)) => frames.error(m.frame_name(id).to_string(), e),
            }
        }
        let jc = kin.com_jacobian();
        let mut fd = DMatrix::zeros(jc.nrows(), m.nv());
        for i in 0..m.nv() {
            let mut e = DVector::zeros(m.nv());
            e[i] = 1.0;
            let at = |h: f64| {
                    RobotState::new(m, integrate(m, &s.q, &e, h), s.qd.clone()).map(|st| Kinematics::new(m, &st).com())
            };
            match (at(eps), at(-eps)) {
                (Ok(p), Ok(q)) => {
                    let d = (p - q) / (2.0 * eps);
                    for row in 0..jc.nrows() {
                        fd[(row, i)] = d[row];
                    }
                }
                (Err(e), _) | (_, Err(e)) => com.error(m.name().to_string(), e),
            }
        }
        com.record(rel(&jc, &fd));
    }
    vec![frames, com]
}

fn min_jerk_boundaries(seed: u64) -> Vec<Check> {
    let mut c = Check::new("min_jerk_boundaries", 0.0);
    let mut r = rng(seed ^ 0x3e);
    for _ in 0..50 {
        let x0 = random_vector(&mut r, 3);
        let xf = random_vector(&mut r, 3);
        let duration = 0.1 + random_vector(&mut r, 1)[0].abs() * 5.0;
        let run = || -> sparse_wbc::Result<f64> {
            let traj = Trajectory::new(x0.clone(), xf.clone(), duration)?;
            let a = min_jerk(&traj, 0.0)?;
            let b = min_jerk(&traj, duration)?;
            let err = (&a.x - &x0).amax()
                + (&b.x - &xf).amax()
                + a.xd.amax()
                + a.xdd.amax()
                + b.xd.amax()
                + b.xdd.amax();
            Ok(err)
        };
        match run() {
            Ok(e) => c.record(e),
            Err(e) => c.error("trajectory".into(), e),
        }
    }
    vec![c]
}

pub fn run(instances: usize, seed: u64, models: &[RobotModel], tol: &Tolerances) -> Report {
    let batch = instance_batch(instances, seed);
    let suites = vec![
        timed("oracle", || oracle(&batch, seed, tol)),
        timed("identities", || identities(&batch, tol)),
        timed("weighted", || weighted(seed, 50, tol.weighted)),
        timed("dynamics", || dynamics(&batch, models, seed, tol)),
        timed("jacobians", || jacobians(&batch, models, seed, tol)),
        timed("trajectory", || min_jerk_boundaries(seed)),
    ];
    Report { seed, instances, suites }
}
