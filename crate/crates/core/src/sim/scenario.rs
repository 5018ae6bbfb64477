//! Declarative scenarios: constraint phases, force ramps and task schedules
//! run against the simulator with the sparse controller in the loop.
//!
//! The controller runs at `control_rate` with a zero-order hold on the
//! torques; the simulator takes `dt` substeps in between. Task priorities are
//! fixed: force tasks, then the COM, then frame poses, then posture.
//!
//! CSV schema, one row per control tick (values sampled before the torques
//! are applied; `NaN` marks an inactive quantity):
//! - `t`, `phase`: time in seconds and zero-based phase index.
//! - `q_*`, `v_*`: configuration and velocity; base coordinates first.
//! - `tau_<joint>`: commanded joint torques.
//! - `com_<i>`, `com_ref_<i>`: COM rows under control and their reference.
//! - `err_<frame>_<i>`: pose error of each frame task.
//! - per contact group `<g>` and wrench row `<r>` (`fx fy mz` planar):
//!   `fhat_<g>_<r>` measured, `fref_<g>_<r>` force target, `fcmd_<g>_<r>`
//!   commanded controlled force, `fs_<g>_<r>` recovered supporting force.
//! - `cop_<g>`: center of pressure along the group frame's x axis.
//! - `penetration`: deepest contact penetration.
//! - `constraint_residual`: `‖J_c q̈ − c_c‖` of the commanded motion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{contact_forces, step, ContactModel, ContactReading, Surface, DEFAULT_DAMPING, DEFAULT_STIFFNESS, DEFAULT_TANGENTIAL_DAMPING};
use crate::constraints::{contact_rows, ConstraintSet, ContactKind, Role};
use crate::error::{Error, Result};
use crate::lexls::TaskLevel;
use crate::rbd::{BaseKind, FrameId, Kinematics, RobotModel, RobotState};
use crate::sparse_solver::{control_tick, ControlOptions, ControlSolution};
use crate::tasks::{
    force_level, min_jerk, pose_error, task_state, tracking_level, MotionTarget, PdGains, Ramp, Reference,
    Trajectory, DEFAULT_KD, DEFAULT_KP,
};

const FORCE_PRIORITY: i32 = 0;
const COM_PRIORITY: i32 = 1;
const FRAME_PRIORITY: i32 = 2;
const POSTURE_PRIORITY: i32 = 3;

fn default_rate() -> f64 {
    1000.0
}

fn default_dt() -> f64 {
    1e-4
}

fn default_stiffness() -> f64 {
    DEFAULT_STIFFNESS
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

fn default_tangential() -> f64 {
    DEFAULT_TANGENTIAL_DAMPING
}

fn default_min_normal() -> f64 {
    1.0
}

fn default_force_window() -> f64 {
    1.0
}

fn default_switch_window() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    /// Model file, relative to the scenario file.
    pub model: String,
    /// Controller rate in Hz.
    #[serde(default = "default_rate")]
    pub control_rate: f64,
    /// Simulator step in seconds.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Closed-loop time before `t = 0` with references frozen at their start
    /// values; not logged.
    #[serde(default)]
    pub settle_time: f64,
    pub contact: ContactSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub weights: Option<WeightSpec>,
    #[serde(default)]
    pub gains: GainSpec,
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub metrics: MetricSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSpec {
    #[serde(default = "default_stiffness")]
    pub stiffness: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tangential")]
    pub tangential_damping: f64,
    pub surfaces: Vec<SurfaceSpec>,
    /// Constraint frame → contact point frames whose forces it aggregates.
    pub groups: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSpec {
    pub name: String,
    pub normal: [f64; 3],
    /// Plane offset along the normal; ignored when `anchor` is given.
    #[serde(default)]
    pub offset: f64,
    /// Place the plane through this frame's initial position.
    #[serde(default)]
    pub anchor: Option<String>,
    pub points: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Base configuration (`[x, y, θ]` planar, `[x, y, z, qw, qx, qy, qz]`
    /// spatial).
    pub base: Vec<f64>,
    pub joints: Vec<f64>,
    /// Lower the robot onto this surface so its points carry the weight.
    #[serde(default)]
    pub rest_on: Option<String>,
}

/// Normal-force dependent weights `W_f⁻¹ = diag(w_l / max(|f_n|, min_normal))`
/// per supporting frame, used whenever the supporting set has internal forces.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub w_l: Vec<f64>,
    #[serde(default = "default_min_normal")]
    pub min_normal: f64,
    /// Wrench row holding the normal force; defaults to `fy` planar, `fz`
    /// spatial.
    #[serde(default)]
    pub normal_axis: Option<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gain {
    pub kp: f64,
    pub kd: f64,
}

impl Default for Gain {
    fn default() -> Self {
        Self {
            kp: DEFAULT_KP,
            kd: DEFAULT_KD,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    #[serde(default)]
    pub com: Gain,
    #[serde(default)]
    pub frame: Gain,
    #[serde(default)]
    pub posture: Gain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub frame: String,
    /// Frame-Jacobian rows; all rows when absent.
    #[serde(default)]
    pub axes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSpec {
    pub frame: String,
    pub axis: usize,
    /// Ramp start value; the measured force at phase entry when absent.
    #[serde(default)]
    pub from: Option<f64>,
    pub to: f64,
    /// Ramp length; the whole phase when absent.
    #[serde(default)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub duration: f64,
    #[serde(default)]
    pub supporting: Vec<ConstraintSpec>,
    #[serde(default)]
    pub controlled: Vec<ConstraintSpec>,
    #[serde(default)]
    pub forces: Vec<ForceSpec>,
}

/// Minimum-jerk move of a task to `offset` from its initial value, starting
/// at `start`. Moves of the same task chain from the previous end point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    /// One offset entry controls the horizontal COM only; more control all
    /// COM rows.
    Com { start: f64, duration: f64, offset: Vec<f64> },
    Frame {
        frame: String,
        #[serde(default)]
        rows: Option<Vec<usize>>,
        start: f64,
        duration: f64,
        offset: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    /// Final part of each phase used for steady-state force errors.
    #[serde(default = "default_force_window")]
    pub force_window: f64,
    /// Half-width of the window around each switch for force-step metrics.
    #[serde(default = "default_switch_window")]
    pub switch_window: f64,
    /// Group whose normal force trace is checked for steps.
    #[serde(default)]
    pub normal_force_group: Option<String>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            force_window: default_force_window(),
            switch_window: default_switch_window(),
            normal_force_group: None,
        }
    }
}

impl ScenarioScript {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Phase start times followed by the end time.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut t = vec![0.0];
        for p in &self.phases {
            t.push(t.last().copied().unwrap_or(0.0) + p.duration);
        }
        t
    }

    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        if !(self.control_rate > 0.0) || !(self.dt > 0.0) || !(self.settle_time >= 0.0) {
            return bad("control_rate and dt must be positive, settle_time non-negative".into());
        }
        if self.dt * self.control_rate > 1.0 + 1e-9 {
            return bad(format!("dt {} is longer than the control period", self.dt));
        }
        substeps(self.control_rate, self.dt)?;
        for p in &self.phases {
            if !(p.duration > 0.0) || !p.duration.is_finite() {
                return bad(format!("phase `{}` has duration {}", p.name, p.duration));
            }
            for c in p.supporting.iter().chain(&p.controlled) {
                model.frame_id(&c.frame)?;
                if !self.contact.groups.contains_key(&c.frame) {
                    return bad(format!("constraint frame `{}` has no contact group", c.frame));
                }
            }
            for f in &p.forces {
                let controlled = p.controlled.iter().find(|c| c.frame == f.frame);
                let Some(c) = controlled else {
                    return bad(format!("force task on `{}` without a controlled constraint", f.frame));
                };
                let rows = constraint_kind(c).rows(model.base());
                if !rows.contains(&f.axis) {
                    return bad(format!("force axis {} is not a controlled row of `{}`", f.axis, f.frame));
                }
                if matches!(f.duration, Some(d) if !(d > 0.0)) {
                    return bad(format!("force ramp on `{}` needs a positive duration", f.frame));
                }
            }
        }
        for (g, points) in &self.contact.groups {
            model.frame_id(g)?;
            for p in points {
                model.frame_id(p)?;
            }
        }
        for s in &self.contact.surfaces {
            for p in &s.points {
                model.frame_id(p)?;
            }
        }
        if let Some(name) = &self.initial.rest_on {
            if !self.contact.surfaces.iter().any(|s| &s.name == name) {
                return bad(format!("rest_on surface `{name}` does not exist"));
            }
        }
        if let Some(w) = &self.weights {
            if w.w_l.len() != model.base().task_dim() || w.w_l.iter().any(|x| !(*x > 0.0)) {
                return bad(format!("w_l needs {} positive entries", model.base().task_dim()));
            }
        }
        if let Some(g) = &self.metrics.normal_force_group {
            if !self.contact.groups.contains_key(g) {
                return bad(format!("metric group `{g}` does not exist"));
            }
        }
        for t in &self.tasks {
            let (start, duration) = match t {
                TaskSpec::Com { start, duration, .. } | TaskSpec::Frame { start, duration, .. } => (*start, *duration),
            };
            if !(start >= 0.0) || !(duration > 0.0) {
                return bad("task moves need start ≥ 0 and duration > 0".into());
            }
            if let TaskSpec::Frame { frame, .. } = t {
                model.frame_id(frame)?;
            }
        }
        Ok(())
    }
}

fn substeps(rate: f64, dt: f64) -> Result<usize> {
    let n = (1.0 / (rate * dt)).round();
    if n < 1.0 || ((n * dt) * rate - 1.0).abs() > 1e-6 {
        return Err(Error::Scenario(format!(
            "dt {dt} does not divide the control period {}",
            1.0 / rate
        )));
    }
    Ok(n as usize)
}

fn constraint_kind(c: &ConstraintSpec) -> ContactKind {
    match &c.axes {
        Some(a) => ContactKind::Axes(a.clone()),
        None => ContactKind::Flat,
    }
}

/// Resolves the model relative to the scenario file, or inside `model_dir`
/// when given.
pub fn load_scenario(path: impl AsRef<Path>, model_dir: Option<&Path>) -> Result<(ScenarioScript, RobotModel)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let script = ScenarioScript::from_toml_str(&text)?;
    let model_path = match model_dir {
        Some(dir) => dir.join(Path::new(&script.model).file_name().unwrap_or_default()),
        None => path.parent().map(Path::to_path_buf).unwrap_or_else(PathBuf::new).join(&script.model),
    };
    let model = RobotModel::load(&model_path)?;
    script.validate(&model)?;
    Ok((script, model))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub control: ControlOptions,
    /// Overrides the script's simulator step.
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForceMetric {
    pub phase: String,
    pub frame: String,
    pub axis: usize,
    pub target: f64,
    /// `|mean(f̂ − f_ref)|` over the final window of the phase.
    pub steady_state_error: f64,
    pub relative_error: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SwitchMetric {
    pub t: f64,
    pub from: String,
    pub to: String,
    /// `‖τ(t⁺) − τ(t⁻)‖∞` across the switch tick.
    pub tau_jump: f64,
    /// Largest tick-to-tick change of the monitored normal force near the
    /// switch.
    pub normal_force_step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub body_weight: f64,
    pub forces: Vec<ForceMetric>,
    pub com_rmse: f64,
    pub switches: Vec<SwitchMetric>,
    pub max_tau_jump: f64,
    pub max_normal_force_step: f64,
    pub max_penetration: f64,
    pub max_constraint_residual: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioLog {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub phase_names: Vec<String>,
    pub metrics: Metrics,
    pub dt: f64,
    pub control_rate: f64,
    pub wall_time: Duration,
    pub ticks: usize,
}

impl ScenarioLog {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// One scheduled task: initial value and chained minimum-jerk moves.
struct Schedule {
    x0: DVector<f64>,
    moves: Vec<(f64, Trajectory)>,
}

impl Schedule {
    fn new(x0: DVector<f64>, mut specs: Vec<(f64, f64, Vec<f64>)>) -> Result<Self> {
        specs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut moves = Vec::new();
        let mut prev = x0.clone();
        let mut prev_end = f64::NEG_INFINITY;
        for (start, duration, offset) in specs {
            if offset.len() != x0.len() {
                return Err(Error::dim("task offset", x0.len(), offset.len()));
            }
            if start < prev_end - 1e-12 {
                return Err(Error::Scenario(format!("overlapping task moves at t = {start}")));
            }
            let target = &x0 + DVector::from_vec(offset);
            moves.push((start, Trajectory::new(prev, target.clone(), duration)?));
            prev = target;
            prev_end = start + duration;
        }
        Ok(Self { x0, moves })
    }

    fn reference(&self, t: f64) -> Result<Reference> {
        match self.moves.iter().rev().find(|(start, _)| *start <= t) {
            Some((start, traj)) => min_jerk(traj, t - start),
            None => Ok(Reference::at_rest(self.x0.clone())),
        }
    }
}

struct Group {
    name: String,
    frame: FrameId,
    points: Vec<FrameId>,
}

struct ActiveForce {
    frame: String,
    axis: usize,
    ramp: Ramp,
}

struct ActivePhase {
    supporting: Vec<(FrameId, ContactKind)>,
    controlled: Vec<(FrameId, ContactKind)>,
    forces: Vec<ActiveForce>,
}

struct Tick {
    solution: ControlSolution,
    cs: ConstraintSet,
    com: (DVector<f64>, Reference),
    frame_errors: Vec<DVector<f64>>,
    residual: f64,
}

struct Runner<'a> {
    model: &'a RobotModel,
    script: &'a ScenarioScript,
    options: &'a RunOptions,
    groups: Vec<Group>,
    com_target: MotionTarget,
    com: Schedule,
    frames: Vec<(MotionTarget, Schedule)>,
    posture: DVector<f64>,
    gains: (PdGains, Gain, PdGains),
}

impl Runner<'_> {
    fn group(&self, name: &str) -> Result<&Group> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::Scenario(format!("unknown contact group `{name}`")))
    }

    fn measured(&self, kin: &Kinematics<'_>, reading: &ContactReading, group: &Group) -> Result<DVector<f64>> {
        let (origin, _) = kin.frame_pose(group.frame)?;
        Ok(reading.wrench(self.model.base(), &group.points, &origin))
    }

    fn measured_by_name(&self, kin: &Kinematics<'_>, reading: &ContactReading, frame: &str) -> Result<DVector<f64>> {
        self.measured(kin, reading, self.group(frame)?)
    }

    fn resolve(&self, phase: &PhaseSpec) -> Result<(Vec<(FrameId, ContactKind)>, Vec<(FrameId, ContactKind)>)> {
        let map = |list: &[ConstraintSpec]| -> Result<Vec<_>> {
            list.iter()
                .map(|c| Ok((self.model.frame_id(&c.frame)?, constraint_kind(c))))
                .collect()
        };
        Ok((map(&phase.supporting)?, map(&phase.controlled)?))
    }

    /// Phase setup at entry time `t0`; `measured` supplies ramp starts.
    fn enter(&self, phase: &PhaseSpec, t0: f64, kin: &Kinematics<'_>, reading: &ContactReading) -> Result<ActivePhase> {
        let (supporting, controlled) = self.resolve(phase)?;
        let mut forces = Vec::new();
        for f in &phase.forces {
            let from = match f.from {
                Some(v) => v,
                None => self.measured_by_name(kin, reading, &f.frame)?[f.axis],
            };
            forces.push(ActiveForce {
                frame: f.frame.clone(),
                axis: f.axis,
                ramp: Ramp::new(from, f.to, t0, f.duration.unwrap_or(phase.duration))?,
            });
        }
        Ok(ActivePhase {
            supporting,
            controlled,
            forces,
        })
    }

    /// First phase while settling: controlled frames whose ramps all start
    /// from a fixed value keep that value, the rest act as supports.
    fn settle_phase(&self, phase: &PhaseSpec) -> Result<ActivePhase> {
        let (mut supporting, all_controlled) = self.resolve(phase)?;
        let mut controlled = Vec::new();
        let mut forces = Vec::new();
        for (spec, (id, kind)) in phase.controlled.iter().zip(all_controlled) {
            let own: Vec<_> = phase.forces.iter().filter(|f| f.frame == spec.frame).collect();
            if own.iter().all(|f| f.from.is_some()) {
                controlled.push((id, kind));
                for f in own {
                    let v = f.from.unwrap_or_default();
                    forces.push(ActiveForce {
                        frame: f.frame.clone(),
                        axis: f.axis,
                        ramp: Ramp::new(v, v, 0.0, 1.0)?,
                    });
                }
            } else {
                supporting.push((id, ContactKind::Flat));
            }
        }
        Ok(ActivePhase {
            supporting,
            controlled,
            forces,
        })
    }

    fn weights(&self, kin: &Kinematics<'_>, reading: &ContactReading, cs: &ConstraintSet) -> Result<Option<DMatrix<f64>>> {
        let Some(spec) = &self.script.weights else {
            return Ok(None);
        };
        if cs.k_s() <= self.model.base_dim() {
            return Ok(None);
        }
        let normal_axis = spec.normal_axis.unwrap_or(match self.model.base() {
            BaseKind::Planar => 1,
            BaseKind::Floating => 2,
        });
        let mut diag = Vec::with_capacity(cs.k_s());
        for label in cs.labels_s() {
            let f = self.measured_by_name(kin, reading, &label.frame)?;
            let fn_abs = f[normal_axis].abs().max(spec.min_normal);
            diag.push(spec.w_l[label.axis] / fn_abs);
        }
        Ok(Some(DMatrix::from_diagonal(&DVector::from_vec(diag))))
    }

    fn tick(&self, state: &RobotState, reading: &ContactReading, phase: &ActivePhase, t: f64, t_ref: f64) -> Result<Tick> {
        let model = self.model;
        let kin = Kinematics::new(model, state);
        let mut rows = Vec::new();
        for (id, kind) in &phase.supporting {
            rows.extend(contact_rows(&kin, *id, kind, Role::Supporting)?);
        }
        for (id, kind) in &phase.controlled {
            rows.extend(contact_rows(&kin, *id, kind, Role::Controlled)?);
        }
        let cs = ConstraintSet::assemble(model.nv(), rows)?;

        let mut levels: Vec<TaskLevel> = Vec::new();
        if !phase.forces.is_empty() {
            let mut idx = Vec::new();
            let mut f_des = Vec::new();
            for f in &phase.forces {
                idx.push(cs.controlled_index(&f.frame, f.axis).ok_or_else(|| {
                    Error::Scenario(format!("force task row {}[{}] is not controlled", f.frame, f.axis))
                })?);
                f_des.push(f.ramp.value(t));
            }
            levels.push(force_level(&cs, &idx, &DVector::from_vec(f_des), FORCE_PRIORITY)?.named("force"));
        }
        let com_ref = self.com.reference(t_ref)?;
        let (com_x, _) = task_state(&kin, &self.com_target)?;
        levels.push(tracking_level(&kin, &self.com_target, &com_ref, &self.gains.0, COM_PRIORITY)?.named("com"));
        let mut frame_errors = Vec::new();
        for (target, schedule) in &self.frames {
            let r = schedule.reference(t_ref)?;
            let (x, _) = task_state(&kin, target)?;
            frame_errors.push(frame_error(model.base(), target, &x, &r.x)?);
            let gains = PdGains::uniform(x.len(), self.gains.1.kp, self.gains.1.kd)?;
            levels.push(tracking_level(&kin, target, &r, &gains, FRAME_PRIORITY)?.named("frame"));
        }
        let posture = Reference::at_rest(self.posture.clone());
        levels.push(tracking_level(&kin, &MotionTarget::Posture, &posture, &self.gains.2, POSTURE_PRIORITY)?.named("posture"));

        let mut f_hat = Vec::with_capacity(cs.k_f());
        for label in cs.labels_f() {
            f_hat.push(self.measured_by_name(&kin, reading, &label.frame)?[label.axis]);
        }
        let f_hat = DVector::from_vec(f_hat);
        let mut options = self.options.control.clone();
        options.force_weights = self.weights(&kin, reading, &cs)?;
        options.recover_supporting_forces = true;
        let solution = control_tick(model, state, &cs, &levels, Some(&f_hat), &options)?;
        let residual = if cs.k() > 0 {
            (cs.j_c() * &solution.qdd - cs.c_c()).norm()
        } else {
            0.0
        };
        Ok(Tick {
            solution,
            cs,
            com: (com_x, com_ref),
            frame_errors,
            residual,
        })
    }
}

fn frame_error(base: BaseKind, target: &MotionTarget, x: &DVector<f64>, xd: &DVector<f64>) -> Result<DVector<f64>> {
    match target {
        MotionTarget::Frame { rows, .. } if rows.len() == base.task_dim() => pose_error(base, x, xd),
        _ => Ok(xd - x),
    }
}

fn axis_names(base: BaseKind) -> &'static [&'static str] {
    match base {
        BaseKind::Planar => &["fx", "fy", "mz"],
        BaseKind::Floating => &["fx", "fy", "fz", "mx", "my", "mz"],
    }
}

fn initial_state(script: &ScenarioScript, model: &RobotModel) -> Result<RobotState> {
    let base = model.base().config_dim();
    if script.initial.base.len() != base {
        return Err(Error::dim("initial base configuration", base, script.initial.base.len()));
    }
    if script.initial.joints.len() != model.n_joints() {
        return Err(Error::dim("initial joint configuration", model.n_joints(), script.initial.joints.len()));
    }
    let q = DVector::from_iterator(
        model.nq(),
        script.initial.base.iter().chain(&script.initial.joints).copied(),
    );
    RobotState::new(model, q, DVector::zeros(model.nv()))
}

fn build_surfaces(script: &ScenarioScript, model: &RobotModel, state: &mut RobotState) -> Result<ContactModel> {
    let spec = &script.contact;
    let mut surfaces = Vec::new();
    for s in &spec.surfaces {
        let points = s.points.iter().map(|p| model.frame_id(p)).collect::<Result<Vec<_>>>()?;
        surfaces.push(Surface::new(s.name.clone(), Vector3::from(s.normal), s.offset, points)?);
    }
    if let Some(name) = &script.initial.rest_on {
        let idx = surfaces.iter().position(|s| &s.name == name).unwrap_or_default();
        let surface = &surfaces[idx];
        let kin = Kinematics::new(model, state);
        let mut deepest = f64::NEG_INFINITY;
        for &p in &surface.points {
            deepest = deepest.max(surface.penetration(&kin.frame_pose(p)?.0));
        }
        let load = model.total_mass() * model.gravity() / (spec.stiffness * surface.points.len().max(1) as f64);
        let shift = -surface.normal * (load - deepest);
        let mut q = state.q.clone();
        let dims = match model.base() {
            BaseKind::Planar => 2,
            BaseKind::Floating => 3,
        };
        for k in 0..dims {
            q[k] += shift[k];
        }
        *state = RobotState::new(model, q, state.qd.clone())?;
    }
    let kin = Kinematics::new(model, state);
    for (s, spec) in surfaces.iter_mut().zip(&spec.surfaces) {
        if let Some(anchor) = &spec.anchor {
            let (p, _) = kin.frame_pose(model.frame_id(anchor)?)?;
            s.offset = s.normal.dot(&p);
        }
    }
    ContactModel::new(spec.stiffness, spec.damping, spec.tangential_damping, surfaces)
}

fn with_phase(context: String) -> impl FnOnce(Error) -> Error {
    move |e| Error::Phase {
        context,
        source: Box::new(e),
    }
}

fn advance(
    model: &RobotModel,
    state: RobotState,
    tau: &DVector<f64>,
    contact: &ContactModel,
    dt: f64,
    n: usize,
    t: f64,
) -> Result<RobotState> {
    let mut s = state;
    for k in 0..n {
        s = match step(model, &s, tau, contact, dt) {
            Ok((next, _)) => next,
            Err(Error::SimulationDiverged(_)) => return Err(Error::SimulationDiverged(t + k as f64 * dt)),
            Err(e) => return Err(e),
        };
    }
    Ok(s)
}

/// Runs the script with the controller in the loop and returns the log and
/// its metrics.
pub fn run_scenario(script: &ScenarioScript, model: &RobotModel, options: &RunOptions) -> Result<ScenarioLog> {
    let wall = Instant::now();
    let mut script = script.clone();
    if let Some(dt) = options.dt {
        script.dt = dt;
    }
    script.validate(model)?;
    let base = model.base();
    let mut state = initial_state(&script, model)?;
    let contact = build_surfaces(&script, model, &mut state)?;
    let n_sub = substeps(script.control_rate, script.dt)?;
    let period = 1.0 / script.control_rate;

    let kin0 = Kinematics::new(model, &state);
    let mut com_specs = Vec::new();
    let mut frame_specs: BTreeMap<String, (Option<Vec<usize>>, Vec<(f64, f64, Vec<f64>)>)> = BTreeMap::new();
    for t in &script.tasks {
        match t {
            TaskSpec::Com { start, duration, offset } => com_specs.push((*start, *duration, offset.clone())),
            TaskSpec::Frame {
                frame,
                rows,
                start,
                duration,
                offset,
            } => {
                let entry = frame_specs.entry(frame.clone()).or_insert((rows.clone(), Vec::new()));
                entry.1.push((*start, *duration, offset.clone()));
            }
        }
    }
    let com_rows = com_specs.first().map(|s| s.2.len()).unwrap_or(1);
    if com_specs.iter().any(|s| s.2.len() != com_rows) {
        return Err(Error::Scenario("COM moves disagree on the number of rows".into()));
    }
    let com_target = MotionTarget::Com {
        horizontal_only: com_rows == 1,
    };
    let (com0, _) = task_state(&kin0, &com_target)?;
    let com = Schedule::new(com0, com_specs)?;
    let mut frames = Vec::new();
    for (name, (rows, specs)) in frame_specs {
        let id = model.frame_id(&name)?;
        let target = match rows {
            Some(rows) => MotionTarget::Frame { frame: id, rows },
            None => MotionTarget::frame(id, base),
        };
        let (x0, _) = task_state(&kin0, &target)?;
        frames.push((target, Schedule::new(x0, specs)?));
    }
    let groups = script
        .contact
        .groups
        .iter()
        .map(|(name, points)| {
            Ok(Group {
                name: name.clone(),
                frame: model.frame_id(name)?,
                points: points.iter().map(|p| model.frame_id(p)).collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let g = &script.gains;
    let runner = Runner {
        model,
        script: &script,
        options,
        groups,
        com_target,
        com,
        frames,
        posture: state.joint_positions(model),
        gains: (
            PdGains::uniform(com_rows, g.com.kp, g.com.kd)?,
            g.frame,
            PdGains::uniform(model.n_joints(), g.posture.kp, g.posture.kd)?,
        ),
    };
    drop(kin0);

    let settle_ticks = (script.settle_time * script.control_rate).round() as usize;
    if settle_ticks > 0 {
        let phase = runner.settle_phase(&script.phases[0])?;
        for k in 0..settle_ticks {
            let reading = contact_forces(model, &state, &contact)?;
            let tick = runner
                .tick(&state, &reading, &phase, 0.0, 0.0)
                .map_err(with_phase(format!("settling, tick {k}")))?;
            state = advance(model, state, &tick.solution.tau, &contact, script.dt, n_sub, 0.0)?;
        }
    }

    let columns = build_columns(model, &runner, com_rows);
    let col = |name: &str| columns.iter().position(|c| c == name);
    let boundaries = script.boundaries();
    let total = script.duration();
    let n_ticks = (total * script.control_rate).round() as usize;
    let mut rows = Vec::with_capacity(n_ticks + 1);
    let mut phase_idx = usize::MAX;
    let mut active: Option<ActivePhase> = None;
    for k in 0..=n_ticks {
        let t = k as f64 * period;
        let p = boundaries[1..]
            .iter()
            .position(|&end| t < end - 0.5 * period)
            .unwrap_or(script.phases.len() - 1);
        let reading = contact_forces(model, &state, &contact)?;
        if p != phase_idx {
            let kin = Kinematics::new(model, &state);
            active = Some(runner.enter(&script.phases[p], t, &kin, &reading)?);
            phase_idx = p;
        }
        let phase = active.as_ref().expect("phase entered above");
        let spec = &script.phases[p];
        let tick = runner
            .tick(&state, &reading, phase, t, t)
            .map_err(with_phase(format!("phase `{}` at t = {t:.3} s", spec.name)))?;

        let mut row = vec![f64::NAN; columns.len()];
        row[0] = t;
        row[1] = p as f64;
        let mut c = 2;
        for v in state.q.iter().chain(state.qd.iter()).chain(tick.solution.tau.iter()) {
            row[c] = *v;
            c += 1;
        }
        for i in 0..com_rows {
            row[c + i] = tick.com.0[i];
            row[c + com_rows + i] = tick.com.1.x[i];
        }
        c += 2 * com_rows;
        for e in &tick.frame_errors {
            for v in e.iter() {
                row[c] = *v;
                c += 1;
            }
        }
        let kin = Kinematics::new(model, &state);
        let names = axis_names(base);
        for group in &runner.groups {
            let w = runner.measured(&kin, &reading, group)?;
            for (a, n) in names.iter().enumerate() {
                row[col(&format!("fhat_{}_{}", group.name, n)).unwrap_or_default()] = w[a];
            }
            let (origin, rot) = kin.frame_pose(group.frame)?;
            if let Some(cop) = reading.center_of_pressure(&group.points) {
                row[col(&format!("cop_{}", group.name)).unwrap_or_default()] = (cop - origin).dot(&rot.column(0));
            }
        }
        for f in &phase.forces {
            if let Some(i) = col(&format!("fref_{}_{}", f.frame, names[f.axis])) {
                row[i] = f.ramp.value(t);
            }
        }
        for (i, label) in tick.cs.labels_f().iter().enumerate() {
            if let Some(j) = col(&format!("fcmd_{}_{}", label.frame, names[label.axis])) {
                row[j] = tick.solution.f_f[i];
            }
        }
        if let Some(f_s) = &tick.solution.f_s {
            for (i, label) in tick.cs.labels_s().iter().enumerate() {
                if let Some(j) = col(&format!("fs_{}_{}", label.frame, names[label.axis])) {
                    row[j] = f_s[i];
                }
            }
        }
        row[columns.len() - 2] = reading.max_penetration();
        row[columns.len() - 1] = tick.residual;
        rows.push(row);

        if k < n_ticks {
            state = advance(model, state, &tick.solution.tau, &contact, script.dt, n_sub, t)
                .map_err(with_phase(format!("phase `{}` at t = {t:.3} s", spec.name)))?;
        }
    }

    let metrics = compute_metrics(&script, model, &columns, &rows, com_rows);
    Ok(ScenarioLog {
        name: script.name.clone(),
        columns,
        rows,
        phase_names: script.phases.iter().map(|p| p.name.clone()).collect(),
        metrics,
        dt: script.dt,
        control_rate: script.control_rate,
        wall_time: wall.elapsed(),
        ticks: n_ticks + 1,
    })
}

fn build_columns(model: &RobotModel, runner: &Runner<'_>, com_rows: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string(), "phase".to_string()];
    let base_names: Vec<String> = match model.base() {
        BaseKind::Planar => vec!["base_x".into(), "base_y".into(), "base_theta".into()],
        BaseKind::Floating => ["base_x", "base_y", "base_z", "base_qw", "base_qx", "base_qy", "base_qz"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let vel_names: Vec<String> = match model.base() {
        BaseKind::Planar => vec!["base_x".into(), "base_y".into(), "base_theta".into()],
        BaseKind::Floating => ["base_vx", "base_vy", "base_vz", "base_wx", "base_wy", "base_wz"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let joints = model.joint_names();
    cols.extend(base_names.iter().chain(joints).map(|n| format!("q_{n}")));
    cols.extend(vel_names.iter().chain(joints).map(|n| format!("v_{n}")));
    cols.extend(joints.iter().map(|n| format!("tau_{n}")));
    cols.extend((0..com_rows).map(|i| format!("com_{i}")));
    cols.extend((0..com_rows).map(|i| format!("com_ref_{i}")));
    for (target, schedule) in &runner.frames {
        if let MotionTarget::Frame { frame, .. } = target {
            let name = model.frame_name(*frame);
            cols.extend((0..schedule.x0.len()).map(|i| format!("err_{name}_{i}")));
        }
    }
    for g in &runner.groups {
        for prefix in ["fhat", "fref", "fcmd", "fs"] {
            cols.extend(axis_names(model.base()).iter().map(|a| format!("{prefix}_{}_{a}", g.name)));
        }
        cols.push(format!("cop_{}", g.name));
    }
    cols.push("penetration".into());
    cols.push("constraint_residual".into());
    cols
}

fn compute_metrics(script: &ScenarioScript, model: &RobotModel, columns: &[String], rows: &[Vec<f64>], com_rows: usize) -> Metrics {
    let col = |name: &str| columns.iter().position(|c| c == name);
    let get = |r: &Vec<f64>, name: &str| col(name).map(|i| r[i]).unwrap_or(f64::NAN);
    let names = axis_names(model.base());
    let boundaries = script.boundaries();
    let period = 1.0 / script.control_rate;

    let mut forces = Vec::new();
    for (p, phase) in script.phases.iter().enumerate() {
        let end = boundaries[p + 1];
        let start = (end - script.metrics.force_window).max(boundaries[p]);
        for f in &phase.forces {
            let name = names[f.axis];
            let window: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r[0] >= start - 1e-9 && r[0] < end - 0.5 * period)
                .map(|r| (get(r, &format!("fhat_{}_{name}", f.frame)), get(r, &format!("fref_{}_{name}", f.frame))))
                .collect();
            let n = window.len().max(1) as f64;
            let err = (window.iter().map(|(m, r)| m - r).sum::<f64>() / n).abs();
            let rmse = (window.iter().map(|(m, r)| (m - r).powi(2)).sum::<f64>() / n).sqrt();
            forces.push(ForceMetric {
                phase: phase.name.clone(),
                frame: f.frame.clone(),
                axis: f.axis,
                target: f.to,
                steady_state_error: err,
                relative_error: if f.to.abs() > 0.0 { err / f.to.abs() } else { err },
                rmse,
            });
        }
    }

    let mut sq = 0.0;
    for r in rows {
        for i in 0..com_rows {
            sq += (get(r, &format!("com_{i}")) - get(r, &format!("com_ref_{i}"))).powi(2);
        }
    }
    let com_rmse = (sq / (rows.len().max(1) as f64)).sqrt();

    let tau_cols: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("tau_"))
        .map(|(i, _)| i)
        .collect();
    let normal_axis = match model.base() {
        BaseKind::Planar => 1,
        BaseKind::Floating => 2,
    };
    let normal_col = script
        .metrics
        .normal_force_group
        .as_ref()
        .and_then(|g| col(&format!("fhat_{g}_{}", names[normal_axis])));
    let mut switches = Vec::new();
    for (p, &t_switch) in boundaries.iter().enumerate().take(script.phases.len()).skip(1) {
        let Some(k) = rows.iter().position(|r| r[0] >= t_switch - 0.5 * period) else {
            continue;
        };
        if k == 0 {
            continue;
        }
        let tau_jump = tau_cols
            .iter()
            .map(|&c| (rows[k][c] - rows[k - 1][c]).abs())
            .fold(0.0, f64::max);
        let normal_force_step = normal_col
            .map(|c| {
                rows.windows(2)
                    .filter(|w| (w[1][0] - t_switch).abs() <= script.metrics.switch_window + 1e-9)
                    .map(|w| (w[1][c] - w[0][c]).abs())
                    .fold(0.0, f64::max)
            })
            .unwrap_or(0.0);
        switches.push(SwitchMetric {
            t: t_switch,
            from: script.phases[p - 1].name.clone(),
            to: script.phases[p].name.clone(),
            tau_jump,
            normal_force_step,
        });
    }
    let max_of = |c: Option<usize>| c.map(|c| rows.iter().map(|r| r[c]).fold(0.0, f64::max)).unwrap_or(0.0);
    Metrics {
        body_weight: model.total_mass() * model.gravity(),
        forces,
        com_rmse,
        max_tau_jump: switches.iter().map(|s| s.tau_jump).fold(0.0, f64::max),
        max_normal_force_step: switches.iter().map(|s| s.normal_force_step).fold(0.0, f64::max),
        switches,
        max_penetration: max_of(col("penetration")),
        max_constraint_residual: max_of(col("constraint_residual")),
    }
}

/// Writes the log as CSV. Output depends only on the script, model and
/// options, never on timing.
pub fn write_csv(log: &ScenarioLog, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&log.columns)?;
    for row in &log.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// SHA-256 of the model's canonical TOML form.
pub fn model_hash(model: &RobotModel) -> String {
    let digest = Sha256::digest(model.to_toml_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON metadata next to a CSV log: model hash, options, git revision,
/// timing and metrics.
pub fn write_sidecar(log: &ScenarioLog, model: &RobotModel, options: &RunOptions, path: impl AsRef<Path>) -> Result<()> {
    let value = serde_json::json!({
        "scenario": log.name,
        "model": model.name(),
        "model_sha256": model_hash(model),
        "git_revision": git_revision(),
        "options": {
            "dt": log.dt,
            "control_rate": log.control_rate,
            "rank_tol": options.control.rank_tol,
            "lex_tol": options.control.lex.tol,
            "torque_path": format!("{:?}", options.control.torque_path),
            "parallel": options.control.parallel,
        },
        "columns": log.columns,
        "phases": log.phase_names,
        "timing": {
            "wall_seconds": log.wall_time.as_secs_f64(),
            "ticks": log.ticks,
            "mean_tick_seconds": log.wall_time.as_secs_f64() / log.ticks.max(1) as f64,
        },
        "metrics": log.metrics,
    });
    std::fs::write(path, serde_json::to_string_pretty(&value)?)?;
    Ok(())
}
