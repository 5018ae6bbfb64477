use nalgebra::{DMatrix, DVector};

use super::*;
use crate::constraints::{ConstraintSet, ContactKind, Role};
use crate::dense_ref::{build_dense, dense_lex_solve, torque_effect};
use crate::instances::{instance_batch, random_instance, random_levels, random_model, random_spd, random_state, random_vector, rng, InstanceParams};
use crate::matdecomp::{decomposition_count, pinv, projector};
use crate::rbd::{self, BaseKind, Kinematics};

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn params(base: BaseKind, n: usize, k_s: usize, k_f: usize, rd: bool) -> InstanceParams {
    InstanceParams {
        base,
        n,
        k_s,
        k_f,
        rank_deficient_f: rd,
    }
}

/// Base welded to the world: `J_s = S̄`.
fn welded(n: usize, k_f: usize) -> (crate::rbd::RobotModel, crate::rbd::RobotState, ConstraintSet) {
    let m = random_model(&mut rng(31), BaseKind::Planar, n);
    let s = random_state(&mut rng(32), &m);
    let j_s = rbd::base_selection_matrix(&m);
    let kin = Kinematics::new(&m, &s);
    let mut j_f = DMatrix::zeros(k_f, m.nv());
    let mut c_f = DVector::zeros(k_f);
    if k_f > 0 {
        let f = m.frame_id(&format!("tip{n}")).unwrap();
        let j = kin.frame_jacobian(f).unwrap();
        j_f.copy_from(&j.rows(0, k_f));
        c_f.copy_from(&(-kin.jdot_qdot(f).unwrap().rows(0, k_f)));
    }
    let cs = ConstraintSet::from_blocks(j_s, DVector::zeros(3), j_f, c_f).unwrap();
    (m, s, cs)
}

#[test]
fn exactly_four_decompositions() {
    let inst = random_instance(params(BaseKind::Floating, 23, 6, 12, false), 1).unwrap();
    let before = decomposition_count();
    decompose(&inst.constraints, 6, 1e-9).unwrap();
    assert_eq!(decomposition_count() - before, 4);
}

#[test]
fn empty_controlled_block_reduces_to_support() {
    let inst = random_instance(params(BaseKind::Planar, 8, 4, 0, false), 2).unwrap();
    let cs = &inst.constraints;
    let dec = decompose(cs, 3, 1e-9).unwrap();
    let js_pinv = pinv(cs.j_s(), 1e-9).unwrap();
    assert!((&dec.j_c_pinv - js_pinv).amax() < 1e-12);
    assert!((projector(&dec.z_c) - projector(&dec.z_s)).amax() < 1e-12);
}

#[test]
fn welded_base_projector_and_torques() {
    let (m, s, cs) = welded(5, 0);
    let dec = decompose(&cs, 3, 1e-9).unwrap();
    let mut expected = DMatrix::zeros(5, 8);
    expected.columns_mut(3, 5).fill_with_identity();
    assert!((&dec.torque_projector - &expected).amax() < 1e-12);
    assert_eq!(dec.z_ss.ncols(), 0);
    let qdd = DVector::from_fn(8, |i, _| if i < 3 { 0.0 } else { (i as f64) * 0.3 - 1.0 });
    let tau = recover_torques(&m, &s, &dec, &cs, &qdd, &DVector::zeros(0), None, TorquePath::Rnea).unwrap();
    let kin = Kinematics::new(&m, &s);
    let full = kin.mass_matrix() * &qdd + kin.bias_forces();
    assert!((tau - full.rows(3, 5)).amax() < 1e-10);
}

#[test]
fn rejects_insufficient_and_dependent_sets() {
    let m = random_model(&mut rng(4), BaseKind::Floating, 6);
    let s = random_state(&mut rng(5), &m);
    let kin = Kinematics::new(&m, &s);
    let f = m.frame_id("tip3").unwrap();
    let cs = ConstraintSet::from_contacts(&kin, &[(f, ContactKind::Point, Role::Supporting)]).unwrap();
    assert!(matches!(decompose(&cs, 6, 1e-9), Err(Error::NotSufficientlyConstrained(_))));
    let cs = ConstraintSet::from_contacts(
        &kin,
        &[
            (f, ContactKind::Flat, Role::Supporting),
            (f, ContactKind::Axes(vec![2]), Role::Controlled),
        ],
    )
    .unwrap();
    assert!(matches!(decompose(&cs, 6, 1e-9), Err(Error::DependentConstraints { .. })));
}

#[test]
fn motion_without_tasks_is_min_norm_particular_solution() {
    let inst = random_instance(params(BaseKind::Floating, 12, 8, 4, false), 3).unwrap();
    let cs = &inst.constraints;
    let dec = decompose(cs, 6, 1e-9).unwrap();
    let ms = solve_motion(&dec, cs, &[], &LexOptions::default()).unwrap();
    assert_eq!(ms.z_c, DVector::zeros(dec.z_c.ncols()));
    let direct = pinv(&cs.j_c(), 1e-9).unwrap() * cs.c_c();
    assert!((&ms.qdd - direct).amax() < 1e-9);
    assert!((cs.j_c() * &ms.qdd - cs.c_c()).amax() < 1e-9);
}

#[test]
fn consistent_acceleration_is_reproduced() {
    let inst = random_instance(params(BaseKind::Planar, 9, 5, 2, false), 4).unwrap();
    let cs = &inst.constraints;
    let dec = decompose(cs, 3, 1e-9).unwrap();
    let z = random_vector(&mut rng(1), dec.z_c.ncols());
    let target = &dec.j_c_pinv * cs.c_c() + &dec.z_c * z;
    let lvl = TaskLevel::new(DMatrix::identity(cs.nv(), cs.nv()), target.clone(), 0, LevelKind::Motion).unwrap();
    let ms = solve_motion(&dec, cs, &[lvl], &LexOptions::default()).unwrap();
    assert!((ms.qdd - target).amax() < 1e-9);
}

#[test]
fn force_tracking_and_measurement_split() {
    let inst = random_instance(params(BaseKind::Floating, 14, 6, 4, false), 5).unwrap();
    let cs = &inst.constraints;
    let dec = decompose(cs, 6, 1e-9).unwrap();
    let f_des = random_vector(&mut rng(2), 4) * 10.0;
    let lvl = TaskLevel::new(DMatrix::identity(4, 4), f_des.clone(), 0, LevelKind::Force).unwrap();
    let fs = solve_force(&dec, cs, &[lvl], None, &LexOptions::default()).unwrap();
    assert!((fs.f_f - &f_des).amax() < 1e-10);

    let inst = random_instance(params(BaseKind::Floating, 14, 6, 4, true), 6).unwrap();
    let cs = &inst.constraints;
    let dec = decompose(cs, 6, 1e-9).unwrap();
    assert_eq!(dec.rank_f, 3);
    let lvl = TaskLevel::new(DMatrix::identity(4, 4), f_des.clone(), 0, LevelKind::Force).unwrap();
    assert!(matches!(
        solve_force(&dec, cs, &[lvl.clone()], None, &LexOptions::default()),
        Err(Error::MissingForceMeasurement { .. })
    ));
    let f_hat = random_vector(&mut rng(3), 4) * 10.0;
    let fs = solve_force(&dec, cs, &[lvl], Some(&f_hat), &LexOptions::default()).unwrap();
    let null = DMatrix::identity(4, 4) - projector(&dec.u_f);
    assert!((&null * &fs.f_f - &null * &f_hat).amax() < 1e-10);
}

#[test]
fn empty_controlled_force_solution() {
    let inst = random_instance(params(BaseKind::Planar, 6, 3, 0, false), 7).unwrap();
    let dec = decompose(&inst.constraints, 3, 1e-9).unwrap();
    let fs = solve_force(&dec, &inst.constraints, &[], None, &LexOptions::default()).unwrap();
    assert_eq!(fs.f_f.len(), 0);
}

#[test]
fn torque_paths_agree_and_project_dynamics() {
    for (i, inst) in instance_batch(12, 77).iter().enumerate() {
        let cs = &inst.constraints;
        let b = inst.model.base_dim();
        let dec = decompose(cs, b, 1e-9).unwrap();
        let mut r = rng(i as u64);
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let f_hat = random_vector(&mut r, cs.k_f());
        let ms = solve_motion(&dec, cs, &motion, &LexOptions::default()).unwrap();
        let fs = solve_force(&dec, cs, &force, Some(&f_hat), &LexOptions::default()).unwrap();
        let (m, s) = (&inst.model, &inst.state);
        let t_rnea = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Rnea).unwrap();
        let t_mat = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Matrix).unwrap();
        assert!((&t_rnea - &t_mat).amax() < 1e-9);
        let kin = Kinematics::new(m, s);
        let tau1 = kin.mass_matrix() * &ms.qdd + kin.bias_forces() - cs.j_f().transpose() * &fs.f_f;
        let st_tau = rbd::selection_matrix(m).transpose() * &t_rnea;
        let lhs = dec.z_s.transpose() * &tau1;
        let rhs = dec.z_s.transpose() * st_tau;
        assert!((lhs - rhs).amax() < 1e-9 * (1.0 + tau1.amax()));
        let f_s = recover_fs(m, s, cs, &ms.qdd, &fs.f_f, &t_rnea).unwrap();
        assert_eq!(f_s.len(), cs.k_s());
    }
}

#[test]
fn stale_decomposition_is_detected() {
    let a = random_instance(params(BaseKind::Planar, 6, 3, 1, false), 8).unwrap();
    let b = random_instance(params(BaseKind::Planar, 6, 4, 1, false), 9).unwrap();
    let dec = decompose(&a.constraints, 3, 1e-9).unwrap();
    assert!(matches!(
        solve_motion(&dec, &b.constraints, &[], &LexOptions::default()),
        Err(Error::StaleDecomposition(_))
    ));
}

#[test]
fn zero_load_gives_zero_supporting_force() {
    let mut m = random_model(&mut rng(12), BaseKind::Floating, 5);
    m.set_gravity(0.0);
    let mut s = random_state(&mut rng(13), &m);
    s.qd.fill(0.0);
    let kin = Kinematics::new(&m, &s);
    let cs = ConstraintSet::from_contacts(
        &kin,
        &[(m.frame_id("tip3").unwrap(), ContactKind::Flat, Role::Supporting)],
    )
    .unwrap();
    let f_s = recover_fs(&m, &s, &cs, &DVector::zeros(m.nv()), &DVector::zeros(0), &DVector::zeros(5)).unwrap();
    assert!(f_s.amax() < 1e-12);
}

#[test]
fn inconsistent_dynamics_are_reported() {
    let inst = random_instance(params(BaseKind::Planar, 6, 3, 0, false), 10).unwrap();
    let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
    let tau = DVector::from_element(6, 50.0);
    let e = recover_fs(m, s, cs, &DVector::zeros(m.nv()), &DVector::zeros(0), &tau);
    assert!(matches!(e, Err(Error::InconsistentDynamics { .. })));
}

#[test]
fn supporting_force_optimization_keeps_motion_and_lowers_cost() {
    for seed in 0..6 {
        let inst = random_instance(params(BaseKind::Planar, 10, 6, 2, false), 100 + seed).unwrap();
        let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
        let dec = decompose(cs, 3, 1e-9).unwrap();
        assert!(dec.z_ss.ncols() > 0);
        let mut r = rng(seed);
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let ms = solve_motion(&dec, cs, &motion, &LexOptions::default()).unwrap();
        let fs = solve_force(&dec, cs, &force, None, &LexOptions::default()).unwrap();
        let w = random_spd(&mut r, cs.k_s());
        let t0 = recover_torques(m, s, &dec, cs, &ms.qdd, &fs.f_f, None, TorquePath::Rnea).unwrap();
        let t1 = optimize_supporting_forces(m, s, &dec, cs, &ms.qdd, &fs.f_f, &w, TorquePath::Rnea).unwrap();
        let fs0 = recover_fs(m, s, cs, &ms.qdd, &fs.f_f, &t0).unwrap();
        let fs1 = recover_fs(m, s, cs, &ms.qdd, &fs.f_f, &t1).unwrap();
        let cost = |f: &DVector<f64>| f.dot(&(&w * f));
        assert!(cost(&fs1) <= cost(&fs0) * (1.0 + 1e-12));
        let e0 = torque_effect(m, s, cs, &t0).unwrap();
        let e1 = torque_effect(m, s, cs, &t1).unwrap();
        assert!(rel(&e1.qdd, &e0.qdd) < 1e-8);
        assert!(rel(&e1.jf_t_ff, &e0.jf_t_ff) < 1e-8);
    }
}

#[test]
fn optimization_requires_nontrivial_nullspace() {
    let inst = random_instance(params(BaseKind::Planar, 6, 3, 0, false), 11).unwrap();
    let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
    let dec = decompose(cs, 3, 1e-9).unwrap();
    let qdd = &dec.j_c_pinv * cs.c_c();
    let w = DMatrix::identity(3, 3);
    let e = optimize_supporting_forces(m, s, &dec, cs, &qdd, &DVector::zeros(0), &w, TorquePath::Rnea);
    assert!(matches!(e, Err(Error::TrivialNullspace)));
}

#[test]
fn control_tick_matches_dense_reference() {
    for (i, inst) in instance_batch(16, 5).iter().enumerate() {
        let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
        let mut r = rng(1000 + i as u64);
        let (motion, force) = random_levels(&mut r, cs.nv(), cs.k_f());
        let f_hat = random_vector(&mut r, cs.k_f()) * 10.0;
        let mut levels = motion.clone();
        levels.extend(force.iter().cloned());
        let sol = control_tick(m, s, cs, &levels, Some(&f_hat), &ControlOptions::default()).unwrap();

        let dp = build_dense(m, s, cs).unwrap();
        let mut dl = vec![dp.measurement_level(cs, &f_hat, -1).unwrap()];
        dl.extend(motion.iter().map(|l| dp.lift_motion(l).unwrap()));
        dl.extend(force.iter().map(|l| dp.lift_force(l).unwrap()));
        let dense = dense_lex_solve(&dp, &dl, &LexOptions::default()).unwrap();
        assert!(rel(&sol.qdd, &dense.parts.qdd) < 1e-8, "instance {i}: {}", rel(&sol.qdd, &dense.parts.qdd));
        assert!(rel(&sol.f_f, &dense.parts.f_f) < 1e-8, "instance {i}");

        let y = {
            let mut y = DVector::zeros(dp.layout.width());
            y.rows_mut(0, cs.nv()).copy_from(&sol.qdd);
            y.rows_mut(cs.nv(), cs.k_f()).copy_from(&sol.f_f);
            y.rows_mut(cs.nv() + cs.k_f(), cs.k_s()).copy_from(sol.f_s.as_ref().unwrap());
            y.rows_mut(cs.nv() + cs.k(), m.n_joints()).copy_from(&sol.tau);
            y
        };
        assert!((&dp.d_mat * y - &dp.d_vec).norm() < 1e-8 * (1.0 + dp.d_vec.norm()));
    }
}

#[test]
fn parallel_tick_is_identical_to_sequential() {
    let inst = random_instance(params(BaseKind::Floating, 20, 9, 6, false), 12).unwrap();
    let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
    let (motion, force) = random_levels(&mut rng(3), cs.nv(), cs.k_f());
    let mut levels = motion;
    levels.extend(force);
    let seq = control_tick(m, s, cs, &levels, None, &ControlOptions::default()).unwrap();
    let par = control_tick(
        m,
        s,
        cs,
        &levels,
        None,
        &ControlOptions {
            parallel: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(seq.qdd, par.qdd);
    assert_eq!(seq.f_f, par.f_f);
    assert_eq!(seq.tau, par.tau);
}

#[test]
fn force_and_motion_targets_are_decoupled() {
    let inst = random_instance(params(BaseKind::Planar, 12, 4, 3, false), 13).unwrap();
    let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
    let (mut levels, _) = random_levels(&mut rng(4), cs.nv(), 0);
    let force = TaskLevel::new(DMatrix::identity(3, 3), random_vector(&mut rng(5), 3), 0, LevelKind::Force).unwrap();
    levels.push(force);
    let base = control_tick(m, s, cs, &levels, None, &ControlOptions::default()).unwrap();

    let mut bumped_force = levels.clone();
    let last = bumped_force.len() - 1;
    bumped_force[last].target[0] += 3.0;
    let a = control_tick(m, s, cs, &bumped_force, None, &ControlOptions::default()).unwrap();
    assert_eq!(a.qdd, base.qdd);
    assert_ne!(a.f_f, base.f_f);

    let mut bumped_motion = levels.clone();
    bumped_motion[0].target[0] += 3.0;
    let b = control_tick(m, s, cs, &bumped_motion, None, &ControlOptions::default()).unwrap();
    assert_eq!(b.f_f, base.f_f);
    assert_ne!(b.qdd, base.qdd);
}

#[test]
fn untagged_levels_are_rejected() {
    let inst = random_instance(params(BaseKind::Planar, 6, 3, 0, false), 14).unwrap();
    let (m, s, cs) = (&inst.model, &inst.state, &inst.constraints);
    let l = TaskLevel::new(DMatrix::identity(9, 9), DVector::zeros(9), 0, LevelKind::Generic).unwrap();
    assert!(matches!(
        control_tick(m, s, cs, &[l], None, &ControlOptions::default()),
        Err(Error::UntaggedLevel(0))
    ));
}
