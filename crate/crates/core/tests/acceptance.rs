//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria listed in `BLOCKED` are evaluated exactly as stated and printed,
//! but do not fail the run; every other criterion must pass.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use sparse_wbc::constraints::{contacts_by_name, is_sufficiently_constrained, ContactKind, Role};
use sparse_wbc::dense_ref::{bench, build_dense, dense_lex_solve, torque_effect};
use sparse_wbc::instances::{
    instance_batch, random_levels, random_matrix, random_model, random_spd, random_state, random_vector, rng,
    InstanceParams,
};
use sparse_wbc::lexls::LexOptions;
use sparse_wbc::matdecomp::{pinv, projector, rank_reveal, spd_inverse, spd_sqrt, weighted_pinv, DEFAULT_RANK_TOL};
use sparse_wbc::rbd::{integrate, BaseKind, Kinematics, RobotModel, RobotState};
use sparse_wbc::sim::{load_scenario, run_scenario, RunOptions, ScenarioLog};
use sparse_wbc::sparse_solver::{
    control_tick, decompose, optimize_supporting_forces, recover_fs, recover_torques, solve_force, solve_motion,
    ControlOptions, TorquePath,
};
use sparse_wbc::tasks::{min_jerk, Trajectory};

/// Criteria that cannot hold as stated; see the README for the analysis.
const BLOCKED: &[u32] = &[2, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn rel_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}

const SEED: u64 = 2024;
const INSTANCES: usize = 120;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let batch = instance_batch(INSTANCES, SEED);
    let (mut worst_motion, mut worst_effect) = (0.0f64, 0.0f64);
    let mut deficient = 0;
    let mut bases = [0usize; 2];
    for (i, inst) in batch.iter().enumerate() {
        let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
        deficient += usize::from(inst.params.rank_deficient_f);
        bases[usize::from(m.base() == BaseKind::Floating)] += 1;
        let mut r = rng(SEED + 1 + i as u64);
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let f_hat = random_vector(&mut r, cs.k_f()) * 10.0;
        let mut levels = motion.clone();
        levels.extend(force.iter().cloned());
        let sol = match control_tick(m, s, cs, &levels, Some(&f_hat), &ControlOptions::default()) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("instance {i}: sparse tick failed: {e}")),
        };
        let dp = build_dense(m, s, cs).unwrap();
        let mut dl = vec![dp.measurement_level(cs, &f_hat, i32::MIN).unwrap()];
        dl.extend(motion.iter().map(|l| dp.lift_motion(l).unwrap()));
        dl.extend(force.iter().map(|l| dp.lift_force(l).unwrap()));
        let dense = match dense_lex_solve(&dp, &dl, &LexOptions::default()) {
            Ok(d) => d,
            Err(e) => return outcome(false, format!("instance {i}: dense solve failed: {e}")),
        };
        worst_motion = worst_motion
            .max(rel_v(&sol.qdd, &dense.parts.qdd))
            .max(rel_v(&sol.f_f, &dense.parts.f_f));
        let es = torque_effect(m, s, cs, &sol.tau).unwrap();
        let ed = torque_effect(m, s, cs, &dense.parts.tau).unwrap();
        worst_effect = worst_effect
            .max(rel_v(&es.qdd, &ed.qdd))
            .max(rel_v(&es.jf_t_ff, &ed.jf_t_ff))
            .max(rel_v(&es.qdd, &sol.qdd));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_motion < 1e-8 && worst_effect < 1e-8 && secs < 60.0 && deficient > 0 && bases.iter().all(|&b| b > 0),
        format!(
            "{INSTANCES} instances ({} planar, {} spatial, {deficient} rank-deficient J_f): max rel (q̈, f_f) {worst_motion:.2e}, max rel torque effect {worst_effect:.2e}, {secs:.1} s",
            bases[0], bases[1]
        ),
    )
}

fn criterion_2() -> Outcome {
    let batch = instance_batch(INSTANCES, SEED);
    let (mut jc, mut zc, mut blocks, mut corrected) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut failing, mut failing_square) = (0, 0);
    for inst in &batch {
        let cs = &inst.constraints;
        let b = inst.model.base_dim();
        let dec = decompose(cs, b, DEFAULT_RANK_TOL).unwrap();
        let j_c = cs.j_c();
        jc = jc.max(rel(&dec.j_c_pinv, &pinv(&j_c, DEFAULT_RANK_TOL).unwrap()));
        let direct_z = rank_reveal(&j_c, DEFAULT_RANK_TOL).unwrap().null_basis;
        zc = zc.max(rel(&projector(&dec.z_c), &projector(&direct_z)));
        let zs_st = dec.z_s.rows(b, cs.nv() - b).transpose();
        let direct = pinv(&zs_st, DEFAULT_RANK_TOL).unwrap() * dec.z_s.transpose();
        let e = rel(&dec.torque_projector_blocks, &direct);
        if e > 1e-9 {
            failing += 1;
            failing_square += usize::from(cs.k_s() == b);
        }
        blocks = blocks.max(e);
        corrected = corrected.max(rel(&dec.torque_projector, &direct));
    }
    outcome(
        jc < 1e-9 && zc < 1e-9 && blocks < 1e-9,
        format!(
            "J_c⁺ {jc:.2e}, Z_cZ_cᵀ {zc:.2e}, block torque projector {blocks:.2e} ({failing}/{} instances over 1e-9, {failing_square} of them with k_s = base_dim); projector with Z_ss removed {corrected:.2e}",
            batch.len()
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let params = InstanceParams {
        base: BaseKind::Floating,
        n: 23,
        k_s: 6,
        k_f: 12,
        rank_deficient_f: false,
    };
    let r = bench(params, 200, SEED, false).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.ratio >= 3.0 && secs < 30.0,
        format!(
            "sparse {:.4} ms (std {:.4}), dense {:.4} ms (std {:.4}), ratio {:.1}x over {} repetitions, {secs:.1} s",
            r.sparse_decompose_ms, r.sparse_std_ms, r.dense_decompose_ms, r.dense_std_ms, r.ratio, r.repetitions
        ),
    )
}

fn criterion_4() -> Outcome {
    let batch = instance_batch(INSTANCES, SEED);
    let mut worst = 0.0f64;
    for (i, inst) in batch.iter().enumerate() {
        let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
        let mut r = rng(SEED + 1 + i as u64);
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let f_hat = random_vector(&mut r, cs.k_f()) * 10.0;
        let dec = decompose(cs, m.base_dim(), DEFAULT_RANK_TOL).unwrap();
        let ms = solve_motion(&dec, cs, &motion, &LexOptions::default()).unwrap();
        let fs = solve_force(&dec, cs, &force, Some(&f_hat), &LexOptions::default()).unwrap();
        let a = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Rnea).unwrap();
        let b = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Matrix).unwrap();
        worst = worst.max((&a - &b).amax() / b.amax().max(1.0));
    }
    outcome(worst < 1e-9, format!("max |τ_rnea − τ_matrix| / max(1, |τ|) = {worst:.2e} over {INSTANCES} instances"))
}

fn criterion_5() -> Outcome {
    let mut r = rng(SEED ^ 5);
    let (mut literal, mut inv_half) = (0.0f64, 0.0f64);
    for i in 0..50 {
        let m = 1 + i % 5;
        let n = m + 1 + (i * 7) % 6;
        let a = random_matrix(&mut r, m, n);
        let w = random_spd(&mut r, n);
        let wp = weighted_pinv(&a, &w, DEFAULT_RANK_TOL).unwrap();
        let z = rank_reveal(&a, DEFAULT_RANK_TOL).unwrap().null_basis;
        let a_pinv = pinv(&a, DEFAULT_RANK_TOL).unwrap();
        let eye = DMatrix::identity(n, n);
        let lit = (&eye - &z * pinv(&(&w * &z), DEFAULT_RANK_TOL).unwrap() * &w) * &a_pinv;
        literal = literal.max((&lit - &wp).amax());
        let h = spd_sqrt(&spd_inverse(&w).unwrap()).unwrap();
        let alt = (&eye - &z * pinv(&(&h * &z), DEFAULT_RANK_TOL).unwrap() * &h) * &a_pinv;
        inv_half = inv_half.max((&alt - &wp).amax());
    }
    outcome(
        literal < 1e-10,
        format!("50 pairs: max |A^(+W) − (I − Z(WZ)⁺W)A⁺| = {literal:.2e}; with W^(−1/2) in place of W: {inv_half:.2e}"),
    )
}

fn biped() -> RobotModel {
    RobotModel::load(assets().join("models/planar_biped.toml")).unwrap()
}

fn standing(model: &RobotModel) -> RobotState {
    let mut q = DVector::zeros(model.nq());
    q[1] = 0.8;
    for (i, a) in [0.3, -0.6, 0.3, -0.3, 0.6, -0.3].into_iter().enumerate() {
        q[3 + i] = a;
    }
    let mut r = rng(SEED ^ 6);
    let qd = random_vector(&mut r, model.nv()) * 0.2;
    RobotState::new(model, q, qd).unwrap()
}

fn criterion_6() -> Outcome {
    let m = biped();
    let s = standing(&m);
    let kin = Kinematics::new(&m, &s);
    let cs = contacts_by_name(
        &m,
        &kin,
        &[("l_sole", ContactKind::Flat, Role::Supporting), ("r_sole", ContactKind::Flat, Role::Supporting)],
    )
    .unwrap();
    let dec = decompose(&cs, 3, DEFAULT_RANK_TOL).unwrap();
    let mut r = rng(SEED ^ 66);
    let (motion, _) = random_levels(&mut r, cs.nv(), 0);
    let ms = solve_motion(&dec, &cs, &motion, &LexOptions::default()).unwrap();
    let f_f = DVector::zeros(0);
    let w_inv = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 0.1, 1000.0, 10.0, 0.1, 1000.0])) / 127.0;
    let cost = |tau: &DVector<f64>| {
        let f = recover_fs(&m, &s, &cs, &ms.qdd, &f_f, tau).unwrap();
        f.dot(&(&w_inv * &f))
    };
    let t0 = recover_torques(&m, &s, &dec, &cs, &ms.qdd, &f_f, None, TorquePath::Rnea).unwrap();
    let t1 = optimize_supporting_forces(&m, &s, &dec, &cs, &ms.qdd, &f_f, &w_inv, TorquePath::Rnea).unwrap();

    // Brute force: the cost is quadratic in z_ss, so sample it on the unit
    // directions and solve the resulting normal equations.
    let k = dec.z_ss.ncols();
    let c0 = cost(&t0);
    let g = DVector::from_fn(k, |i, _| {
        let e = dec.z_ss.column(i).into_owned();
        (cost(&(&t0 + &e)) - cost(&(&t0 - &e))) / 2.0
    });
    let h = DMatrix::from_fn(k, k, |i, j| {
        let (ei, ej) = (dec.z_ss.column(i).into_owned(), dec.z_ss.column(j).into_owned());
        (cost(&(&t0 + &ei + &ej)) - cost(&(&t0 + &ei - &ej)) - cost(&(&t0 - &ei + &ej)) + cost(&(&t0 - &ei - &ej))) / 4.0
    });
    let z = -h.clone().cholesky().unwrap().solve(&g);
    let t_brute = &t0 + &dec.z_ss * &z;
    let (c1, cb) = (cost(&t1), cost(&t_brute));
    let tau_err = rel_v(&t1, &t_brute);
    let cost_err = (c1 - cb).abs() / cb.abs().max(1.0);
    let e0 = torque_effect(&m, &s, &cs, &t0).unwrap();
    let e1 = torque_effect(&m, &s, &cs, &t1).unwrap();
    let motion_kept = rel_v(&e1.qdd, &e0.qdd);
    outcome(
        c1 <= c0 * (1.0 + 1e-12) && tau_err < 1e-7 && cost_err < 1e-7 && motion_kept < 1e-8,
        format!(
            "planar double support, dim z_ss = {k}: cost {c0:.4} -> {c1:.4}, brute force {cb:.4}; rel τ diff {tau_err:.2e}, rel cost diff {cost_err:.2e}, q̈ change {motion_kept:.2e}"
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut r = rng(SEED ^ 7);
    let m = random_model(&mut r, BaseKind::Floating, 6);
    let s = random_state(&mut r, &m);
    let kin = Kinematics::new(&m, &s);
    let flat = contacts_by_name(&m, &kin, &[("tip3", ContactKind::Flat, Role::Supporting)]).unwrap();
    let point = contacts_by_name(
        &m,
        &kin,
        &[("tip3", ContactKind::Point, Role::Supporting), ("tip6", ContactKind::Point, Role::Supporting)],
    )
    .unwrap();
    let (ok_flat, rf) = is_sufficiently_constrained(&flat, 6);
    let (ok_point, rp) = is_sufficiently_constrained(&point, 6);
    outcome(
        ok_flat && !ok_point && rf.rank_j_s >= 6 && rp.rank_j_s >= 6,
        format!(
            "flat foot: rank(J_sS̄ᵀ) = {}, rank(J_s) = {}; two point feet: rank(J_sS̄ᵀ) = {}, rank(J_s) = {}",
            rf.rank, rf.rank_j_s, rp.rank, rp.rank_j_s
        ),
    )
}

fn scenario(name: &str) -> (ScenarioLog, f64) {
    let start = Instant::now();
    let (script, model) = load_scenario(assets().join(format!("scenarios/{name}.toml")), None).unwrap();
    let log = run_scenario(&script, &model, &RunOptions::default()).unwrap();
    (log, start.elapsed().as_secs_f64())
}

fn criterion_8() -> Outcome {
    let (log, secs) = scenario("test1_planar");
    let m = &log.metrics;
    let Some(f) = m.forces.iter().find(|f| (f.target - 20.0).abs() < 1e-12) else {
        return outcome(false, "no 20 N force metric in the log".into());
    };
    let rate_ok = (log.control_rate - 1000.0).abs() < 1e-9;
    let duration = log.column("t").and_then(|t| t.last().copied()).unwrap_or(0.0);
    outcome(
        f.steady_state_error <= 0.02 * 20.0 && m.com_rmse <= 5e-3 && rate_ok && duration >= 8.0 - 2e-3 && secs < 120.0,
        format!(
            "steady-state force error {:.4} N ({:.3}%), force RMSE {:.4} N, COM RMSE {:.3} mm, {duration:.3} s at {} Hz, {secs:.1} s wall",
            f.steady_state_error,
            100.0 * f.relative_error,
            f.rmse,
            1e3 * m.com_rmse,
            log.control_rate
        ),
    )
}

fn criterion_9() -> Outcome {
    let (pfc, _) = scenario("test2_pfc");
    let (nopfc, _) = scenario("test2_nopfc");
    let (a, b) = (pfc.metrics.max_tau_jump, nopfc.metrics.max_tau_jump);
    let ratio = b / a.max(f64::MIN_POSITIVE);
    let step = pfc.metrics.max_normal_force_step;
    let limit = 0.05 * pfc.metrics.body_weight;
    outcome(
        ratio >= 10.0 && step <= limit,
        format!(
            "max |Δτ| with force control {a:.3} N·m, without {b:.3} N·m, ratio {ratio:.1}; controlled-foot normal-force step {step:.3} N (limit {limit:.2} N)"
        ),
    )
}

fn rotation_delta(plus: &Matrix3<f64>, minus: &Matrix3<f64>) -> Vector3<f64> {
    let d = plus * minus.transpose();
    0.5 * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)])
}

fn criterion_10() -> Outcome {
    let mut r = rng(SEED ^ 10);
    let mut models: Vec<RobotModel> = (0..8)
        .map(|i| {
            let base = if i % 2 == 0 { BaseKind::Planar } else { BaseKind::Floating };
            random_model(&mut r, base, 3 + 3 * i)
        })
        .collect();
    models.push(biped());
    let (mut spd_ok, mut sym, mut id, mut jac) = (true, 0.0f64, 0.0f64, 0.0f64);
    let eps = 1e-6;
    for m in &models {
        for _ in 0..3 {
            let s = random_state(&mut r, m);
            let kin = Kinematics::new(m, &s);
            let mm = kin.mass_matrix();
            sym = sym.max((&mm - mm.transpose()).amax() / mm.amax());
            spd_ok &= mm.clone().symmetric_eigenvalues().min() > 0.0;
            let qdd = random_vector(&mut r, m.nv());
            let t = kin.inverse_dynamics(&qdd, &[]).unwrap();
            id = id.max(rel_v(&t, &(&mm * &qdd + kin.bias_forces())));
            let names: Vec<String> = m.frame_names().map(str::to_string).collect();
            for name in names {
                let f = m.frame_id(&name).unwrap();
                let j = kin.frame_jacobian(f).unwrap();
                let mut fd = DMatrix::zeros(j.nrows(), m.nv());
                for i in 0..m.nv() {
                    let mut e = DVector::zeros(m.nv());
                    e[i] = 1.0;
                    let sp = RobotState::new(m, integrate(m, &s.q, &e, eps), s.qd.clone()).unwrap();
                    let sm = RobotState::new(m, integrate(m, &s.q, &e, -eps), s.qd.clone()).unwrap();
                    let (pp, rp) = Kinematics::new(m, &sp).frame_pose(f).unwrap();
                    let (pm, rm) = Kinematics::new(m, &sm).frame_pose(f).unwrap();
                    let lin = (pp - pm) / (2.0 * eps);
                    let ang = rotation_delta(&rp, &rm) / (2.0 * eps);
                    let col = match m.base() {
                        BaseKind::Planar => vec![lin.x, lin.y, ang.z],
                        BaseKind::Floating => vec![lin.x, lin.y, lin.z, ang.x, ang.y, ang.z],
                    };
                    fd.set_column(i, &DVector::from_vec(col));
                }
                jac = jac.max(rel(&j, &fd));
            }
        }
    }
    let mut mj = 0.0f64;
    for _ in 0..50 {
        let x0 = random_vector(&mut r, 4) * 3.0;
        let xf = random_vector(&mut r, 4) * 3.0;
        let t = 0.2 + 4.0 * random_vector(&mut r, 1)[0].abs();
        let traj = Trajectory::new(x0.clone(), xf.clone(), t).unwrap();
        let (a, b) = (min_jerk(&traj, 0.0).unwrap(), min_jerk(&traj, t).unwrap());
        mj = mj
            .max((&a.x - &x0).amax())
            .max((&b.x - &xf).amax())
            .max(a.xd.amax())
            .max(a.xdd.amax())
            .max(b.xd.amax())
            .max(b.xdd.amax());
    }
    outcome(
        spd_ok && sym < 1e-12 && id < 1e-9 && jac < 1e-6 && mj <= f64::EPSILON * 4.0,
        format!(
            "{} models: M SPD {spd_ok} (asymmetry {sym:.1e}), RNEA vs M·q̈ + h {id:.2e}, Jacobian vs FD {jac:.2e}, min-jerk boundary error {mj:.1e}",
            models.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "oracle equivalence", criterion_1),
        (2, "decomposition identities", criterion_2),
        (3, "decomposition speedup", criterion_3),
        (4, "mass-matrix-free torque path", criterion_4),
        (5, "weighted-pseudoinverse identity", criterion_5),
        (6, "supporting-force optimality", criterion_6),
        (7, "rank-condition discrimination", criterion_7),
        (8, "hand-on-wall force and COM tracking", criterion_8),
        (9, "torque continuity with force ramping", criterion_9),
        (10, "dynamics engine properties", criterion_10),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && BLOCKED.contains(&id) { " [blocked, see README]" } else { "" };
        println!("{tag} criterion {id:>2} ({name}): {}{note}", o.detail);
        if !o.pass && !BLOCKED.contains(&id) {
            unexpected.push(id);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
