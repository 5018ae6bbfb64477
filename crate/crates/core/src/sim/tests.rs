use std::path::PathBuf;

use nalgebra::{DVector, Vector3};

use super::*;
use crate::constraints::{contacts_by_name, ContactKind, Role};
use crate::rbd::{FrameSpec, RobotModel};
use crate::sparse_solver::{decompose, recover_torques, TorquePath};

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}

fn biped() -> RobotModel {
    RobotModel::load(assets().join("models/planar_biped.toml")).unwrap()
}

fn standing(model: &RobotModel, height: f64) -> RobotState {
    let mut q = DVector::zeros(model.nq());
    q[1] = height;
    for (i, a) in [0.3, -0.6, 0.3, -0.3, 0.6, -0.3].into_iter().enumerate() {
        q[3 + i] = a;
    }
    RobotState::new(model, q, DVector::zeros(model.nv())).unwrap()
}

fn ground(model: &RobotModel, points: &[&str]) -> ContactModel {
    let ids = points.iter().map(|p| model.frame_id(p).unwrap()).collect();
    ContactModel::with_defaults(vec![Surface::new("ground", Vector3::y(), 0.0, ids).unwrap()])
}

#[test]
fn one_millimetre_at_rest_gives_200_newtons() {
    let m = biped();
    let contact = ground(&m, &["l_heel"]);
    let mut s = standing(&m, 0.0);
    let heel = m.frame_id("l_heel").unwrap();
    let y = Kinematics::new(&m, &s).frame_pose(heel).unwrap().0.y;
    s.q[1] -= y + 1e-3;
    let r = contact_forces(&m, &s, &contact).unwrap();
    assert!((r.points[0].normal_force - 200.0).abs() < 1e-6);
    assert!((r.points[0].force - Vector3::new(0.0, 200.0, 0.0)).norm() < 1e-6);
}

#[test]
fn separated_points_carry_no_wrench() {
    let m = biped();
    let contact = ground(&m, &["l_heel", "l_toe", "r_heel", "r_toe"]);
    let s = standing(&m, 1.0);
    let r = contact_forces(&m, &s, &contact).unwrap();
    let all: Vec<_> = r.points.iter().map(|p| p.frame).collect();
    assert!(r.points.iter().all(|p| p.penetration < 0.0 && !p.active()));
    assert_eq!(r.wrench(m.base(), &all, &Vector3::zeros()).norm(), 0.0);
    assert!(r.center_of_pressure(&all).is_none());
}

#[test]
fn tangential_force_is_viscous_and_opposes_sliding() {
    let m = biped();
    let contact = ground(&m, &["l_heel"]);
    let mut s = standing(&m, 0.0);
    let heel = m.frame_id("l_heel").unwrap();
    s.q[1] -= Kinematics::new(&m, &s).frame_pose(heel).unwrap().0.y + 1e-3;
    s.qd[0] = 0.01;
    let r = contact_forces(&m, &s, &contact).unwrap();
    let p = &r.points[0];
    assert!((p.force.x + contact.tangential_damping * p.velocity.x).abs() < 1e-9);
    assert!(p.force.x < 0.0);
}

#[test]
fn contact_work_over_a_closed_cycle_is_dissipative() {
    let contact = ContactModel::with_defaults(Vec::new());
    let (amp, bias, omega) = (2e-3, 5e-4, 40.0);
    let n = 20_000;
    let period = std::f64::consts::TAU / omega;
    let h = period / n as f64;
    let mut work = 0.0;
    for k in 0..n {
        let t = (k as f64 + 0.5) * h;
        let depth = bias + amp * (omega * t).sin();
        let rate = amp * omega * (omega * t).cos();
        let f = if depth > 0.0 { contact.normal_force(depth, rate) } else { 0.0 };
        work -= f * rate * h;
    }
    assert!(work < 0.0, "work on the body {work}");
    let undamped = ContactModel::new(DEFAULT_STIFFNESS, 0.0, 0.0, Vec::new()).unwrap();
    let mut elastic = 0.0;
    for k in 0..n {
        let t = (k as f64 + 0.5) * h;
        let depth = bias + amp * (omega * t).sin();
        let rate = amp * omega * (omega * t).cos();
        let f = if depth > 0.0 { undamped.normal_force(depth, rate) } else { 0.0 };
        elastic -= f * rate * h;
    }
    assert!(elastic.abs() < 1e-6 * work.abs().max(1.0));
}

#[test]
fn contact_parameters_are_validated() {
    assert!(ContactModel::new(0.0, 1.0, 1.0, Vec::new()).is_err());
    assert!(ContactModel::new(1.0, -1.0, 1.0, Vec::new()).is_err());
    assert!(Surface::new("s", Vector3::zeros(), 0.0, Vec::new()).is_err());
}

fn free_floating(gravity: f64) -> (RobotModel, RobotState) {
    let mut m = biped();
    m.set_gravity(gravity);
    let mut s = standing(&m, 1.0);
    for (i, v) in [0.2, -0.1, 0.3, 0.5, -0.4, 0.2, -0.3, 0.6, 0.1].into_iter().enumerate() {
        s.qd[i] = v;
    }
    (m, s)
}

fn linear_momentum(m: &RobotModel, s: &RobotState) -> DVector<f64> {
    let kin = Kinematics::new(m, s);
    (kin.com_jacobian() * &s.qd) * m.total_mass()
}

fn momentum_drift(dt: f64, steps: usize) -> (f64, f64) {
    let (m, mut s) = free_floating(0.0);
    let contact = ContactModel::with_defaults(Vec::new());
    let tau = DVector::zeros(m.n_joints());
    let p0 = linear_momentum(&m, &s);
    for _ in 0..steps {
        s = step(&m, &s, &tau, &contact, dt).unwrap().0;
    }
    ((linear_momentum(&m, &s) - &p0).norm(), p0.norm())
}

#[test]
fn free_floating_momentum_drift_is_first_order() {
    let (coarse, p0) = momentum_drift(1e-4, 1000);
    let (fine, _) = momentum_drift(5e-5, 2000);
    assert!(coarse < 1e-5 * p0, "momentum drift {coarse:e}");
    let ratio = coarse / fine;
    assert!((1.8..2.2).contains(&ratio), "drift ratio {ratio}");
}

#[test]
fn halving_the_step_halves_the_error() {
    let (m, s0) = free_floating(9.81);
    let contact = ContactModel::with_defaults(Vec::new());
    let tau = DVector::from_element(m.n_joints(), 0.5);
    let run = |dt: f64| {
        let mut s = s0.clone();
        for _ in 0..(0.2 / dt).round() as usize {
            s = step(&m, &s, &tau, &contact, dt).unwrap().0;
        }
        s.q
    };
    let (a, b, c) = (run(2e-3), run(1e-3), run(5e-4));
    let ratio = (&a - &b).norm() / (&b - &c).norm();
    assert!((1.6..2.5).contains(&ratio), "convergence ratio {ratio}");
}

#[test]
fn step_rejects_bad_input_and_reports_divergence() {
    let (m, s) = free_floating(9.81);
    let contact = ContactModel::with_defaults(Vec::new());
    let tau = DVector::zeros(m.n_joints());
    assert!(matches!(step(&m, &s, &tau, &contact, 0.0), Err(Error::InvalidDuration(_))));
    assert!(matches!(
        step(&m, &s, &DVector::zeros(2), &contact, 1e-3),
        Err(Error::DimensionError { .. })
    ));
    let huge = DVector::from_element(m.n_joints(), f64::INFINITY);
    assert!(matches!(step(&m, &s, &huge, &contact, 1e-3), Err(Error::SimulationDiverged(_))));
}

/// Biped hooked onto a bar through two points on the torso, legs hanging.
fn hanging() -> (RobotModel, RobotState, ContactModel) {
    let mut spec = biped().spec().clone();
    for (name, x) in [("hook_l", 0.1), ("hook_r", -0.1)] {
        spec.frames.push(FrameSpec {
            name: name.into(),
            link: "torso".into(),
            xyz: [x, 0.5, 0.0],
            rpy: [0.0; 3],
        });
    }
    let m = RobotModel::from_spec(spec).unwrap();
    let bar = Surface::new(
        "bar",
        Vector3::y(),
        0.0,
        vec![m.frame_id("hook_l").unwrap(), m.frame_id("hook_r").unwrap()],
    )
    .unwrap();
    let contact = ContactModel::with_defaults(vec![bar]);
    let mut q = DVector::zeros(m.nq());
    q[1] = -0.501;
    for (i, a) in [0.4, -0.3, 0.2, -0.2, 0.5, 0.1].into_iter().enumerate() {
        q[3 + i] = a;
    }
    // Newton on base height and tilt until the bar carries the robot.
    let residual = |q: &DVector<f64>| {
        let s = RobotState::new(&m, q.clone(), DVector::zeros(m.nv())).unwrap();
        let kin = Kinematics::new(&m, &s);
        let r = readings(&kin, &contact).unwrap();
        let mut g = -kin.bias_forces();
        for p in &r.points {
            let j = linear_jacobian(&kin, p.frame).unwrap();
            g += j.transpose() * DVector::from_vec(vec![p.force.x, p.force.y]);
        }
        nalgebra::Vector2::new(g[1], g[2])
    };
    for _ in 0..30 {
        let r0 = residual(&q);
        let mut jac = nalgebra::Matrix2::zeros();
        for (c, idx) in [1usize, 2].into_iter().enumerate() {
            let mut qp = q.clone();
            qp[idx] += 1e-7;
            jac.set_column(c, &((residual(&qp) - r0) / 1e-7));
        }
        let du = jac.lu().solve(&(-r0)).unwrap();
        q[1] += du[0];
        q[2] += du[1];
    }
    let s = RobotState::new(&m, q, DVector::zeros(m.nv())).unwrap();
    (m, s, contact)
}

#[test]
fn hanging_equilibrium_holds_under_recovered_torques() {
    let (m, s0, contact) = hanging();
    let kin = Kinematics::new(&m, &s0);
    let cs = contacts_by_name(&m, &kin, &[("torso", ContactKind::Flat, Role::Supporting)]).unwrap();
    let dec = decompose(&cs, m.base_dim(), 1e-10).unwrap();
    let qdd = DVector::zeros(m.nv());
    let tau = recover_torques(&m, &s0, &dec, &cs, &qdd, &DVector::zeros(0), None, TorquePath::Rnea).unwrap();
    let mut s = s0.clone();
    for _ in 0..10_000 {
        s = step(&m, &s, &tau, &contact, 1e-4).unwrap().0;
    }
    let drift = (&s.q - &s0.q).amax().max(s.qd.amax());
    assert!(drift < 1e-4, "state drift {drift:e}");
}

fn scenario(name: &str) -> (ScenarioScript, RobotModel) {
    load_scenario(assets().join(format!("scenarios/{name}.toml")), None).unwrap()
}

#[test]
fn shipped_scenarios_validate() {
    for name in ["test1_planar", "test2_pfc", "test2_nopfc"] {
        let (s, m) = scenario(name);
        assert_eq!(s.name, name);
        assert!((s.duration() - 8.0).abs() < 1e-12);
        assert!(s.validate(&m).is_ok());
    }
}

#[test]
fn invalid_scripts_are_rejected() {
    let (s, m) = scenario("test2_pfc");
    let mut bad = s.clone();
    bad.phases[0].duration = 0.0;
    assert!(matches!(bad.validate(&m), Err(Error::Scenario(_))));
    let mut bad = s.clone();
    bad.phases[1].supporting[0].frame = "nowhere".into();
    assert!(matches!(bad.validate(&m), Err(Error::UnknownFrame(_))));
    let mut bad = s.clone();
    bad.phases[0].forces[0].axis = 7;
    assert!(bad.validate(&m).is_err());
    let mut bad = s.clone();
    bad.dt = 3e-4;
    assert!(bad.validate(&m).is_err());
    assert!(ScenarioScript::from_toml_str("name = 1").is_err());
}

fn short(name: &str, duration: f64) -> (ScenarioScript, RobotModel) {
    let (mut s, m) = scenario(name);
    s.settle_time = 0.05;
    s.phases.truncate(1);
    s.phases[0].duration = duration;
    for f in &mut s.phases[0].forces {
        f.duration = Some(duration);
    }
    (s, m)
}

#[test]
fn rigid_support_commands_are_consistent_and_penetration_bounded() {
    let (s, m) = short("test1_planar", 0.2);
    let log = run_scenario(&s, &m, &RunOptions::default()).unwrap();
    assert_eq!(log.ticks, 201);
    assert_eq!(log.rows.len(), 201);
    assert!(log.metrics.max_constraint_residual <= 1e-8);
    assert!(log.metrics.max_penetration < 5e-3);
    let f = log.column("fhat_r_hand_fx").unwrap();
    assert!(f.iter().all(|v| v.is_finite()));
}

#[test]
fn runs_are_deterministic() {
    let (s, m) = short("test2_pfc", 0.1);
    let dir = std::env::temp_dir();
    let (a, b) = (dir.join("sim_det_a.csv"), dir.join("sim_det_b.csv"));
    for p in [&a, &b] {
        let log = run_scenario(&s, &m, &RunOptions::default()).unwrap();
        write_csv(&log, p).unwrap();
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn sidecar_records_options_and_model_hash() {
    let (s, m) = short("test2_pfc", 0.02);
    let options = RunOptions {
        dt: Some(5e-4),
        ..RunOptions::default()
    };
    let log = run_scenario(&s, &m, &options).unwrap();
    let path = std::env::temp_dir().join("sim_sidecar.json");
    write_sidecar(&log, &m, &options, &path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["options"]["dt"], 5e-4);
    assert_eq!(v["model_sha256"].as_str().unwrap().len(), 64);
    assert!(v["git_revision"].is_string());
    assert!(v["metrics"]["com_rmse"].is_number());
}

#[test]
fn errors_carry_phase_context() {
    let (mut s, m) = short("test2_pfc", 0.05);
    s.settle_time = 0.0;
    s.phases[0].supporting.clear();
    let err = run_scenario(&s, &m, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Phase { .. }), "{err}");
    assert!(err.to_string().contains("unload right"));
}
