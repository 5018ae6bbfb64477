//! Fixed-step penalty-contact simulation and scripted scenarios.
//!
//! Contacts are points on the robot pressed against half-spaces
//! `n·p ≥ offset`. The normal force is a spring-damper on the penetration and
//! the tangential force is viscous, both active only while the normal force is
//! positive. The integrator is semi-implicit Euler with the contact spring and
//! damper terms linearized at the start of the step, so stiff contacts stay
//! stable at millisecond-scale steps.

mod scenario;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::rbd::{integrate, selection_matrix, BaseKind, FrameId, Kinematics, RobotModel, RobotState};

pub use scenario::{
    load_scenario, model_hash, run_scenario, write_csv, write_sidecar, ConstraintSpec, ContactSpec, ForceMetric,
    ForceSpec, Gain, GainSpec, InitialSpec, MetricSpec, Metrics, PhaseSpec, RunOptions, ScenarioLog,
    ScenarioScript, SurfaceSpec, SwitchMetric, TaskSpec, WeightSpec,
};

pub const DEFAULT_STIFFNESS: f64 = 2e5;
pub const DEFAULT_DAMPING: f64 = 1e3;
pub const DEFAULT_TANGENTIAL_DAMPING: f64 = 1e5;

/// Environment half-space with the robot points that can touch it.
#[derive(Debug, Clone)]
pub struct Surface {
    pub name: String,
    /// Unit normal pointing out of the environment.
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub points: Vec<FrameId>,
}

impl Surface {
    pub fn new(name: impl Into<String>, normal: Vector3<f64>, offset: f64, points: Vec<FrameId>) -> Result<Self> {
        let n = normal.norm();
        if !(n > 1e-12) || !offset.is_finite() {
            return Err(Error::Scenario("surface normal must be nonzero and finite".into()));
        }
        Ok(Self {
            name: name.into(),
            normal: normal / n,
            offset,
            points,
        })
    }

    /// Positive when `p` is inside the environment.
    pub fn penetration(&self, p: &Vector3<f64>) -> f64 {
        self.offset - self.normal.dot(p)
    }
}

#[derive(Debug, Clone)]
pub struct ContactModel {
    /// N/m.
    pub stiffness: f64,
    /// N·s/m along the normal.
    pub damping: f64,
    /// N·s/m in the tangent plane.
    pub tangential_damping: f64,
    pub surfaces: Vec<Surface>,
}

impl ContactModel {
    pub fn new(stiffness: f64, damping: f64, tangential_damping: f64, surfaces: Vec<Surface>) -> Result<Self> {
        if !(stiffness > 0.0) || !(damping >= 0.0) || !(tangential_damping >= 0.0) {
            return Err(Error::Scenario(format!(
                "contact needs stiffness > 0 and damping ≥ 0 (got {stiffness}, {damping}, {tangential_damping})"
            )));
        }
        Ok(Self {
            stiffness,
            damping,
            tangential_damping,
            surfaces,
        })
    }

    pub fn with_defaults(surfaces: Vec<Surface>) -> Self {
        Self {
            stiffness: DEFAULT_STIFFNESS,
            damping: DEFAULT_DAMPING,
            tangential_damping: DEFAULT_TANGENTIAL_DAMPING,
            surfaces,
        }
    }

    /// `max(0, k·δ + d·δ̇)` for penetration `δ` and its rate.
    pub fn normal_force(&self, penetration: f64, rate: f64) -> f64 {
        (self.stiffness * penetration + self.damping * rate).max(0.0)
    }
}

/// Force on the robot at one contact point, world coordinates.
#[derive(Debug, Clone)]
pub struct PointForce {
    pub surface: usize,
    pub frame: FrameId,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub penetration: f64,
    pub normal_force: f64,
    pub force: Vector3<f64>,
}

impl PointForce {
    pub fn active(&self) -> bool {
        self.normal_force > 0.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContactReading {
    pub points: Vec<PointForce>,
}

impl ContactReading {
    /// Total force and moment about `about` from the listed point frames, in
    /// frame-Jacobian row layout (`[Fx, Fy, Mz]` planar, `[F, M]` spatial).
    pub fn wrench(&self, base: BaseKind, frames: &[FrameId], about: &Vector3<f64>) -> DVector<f64> {
        let (mut f, mut m) = (Vector3::zeros(), Vector3::zeros());
        for p in self.points.iter().filter(|p| frames.contains(&p.frame)) {
            f += p.force;
            m += (p.position - about).cross(&p.force);
        }
        match base {
            BaseKind::Planar => DVector::from_vec(vec![f.x, f.y, m.z]),
            BaseKind::Floating => DVector::from_vec(vec![f.x, f.y, f.z, m.x, m.y, m.z]),
        }
    }

    /// Sum of normal-force magnitudes over the listed frames.
    pub fn normal_force(&self, frames: &[FrameId]) -> f64 {
        self.points
            .iter()
            .filter(|p| frames.contains(&p.frame))
            .map(|p| p.normal_force)
            .sum()
    }

    /// Normal-force weighted mean position of the listed frames; `None` when
    /// they carry no load.
    pub fn center_of_pressure(&self, frames: &[FrameId]) -> Option<Vector3<f64>> {
        let (mut w, mut c) = (0.0, Vector3::zeros());
        for p in self.points.iter().filter(|p| frames.contains(&p.frame)) {
            w += p.normal_force;
            c += p.normal_force * p.position;
        }
        (w > 1e-9).then(|| c / w)
    }

    pub fn max_penetration(&self) -> f64 {
        self.points.iter().map(|p| p.penetration).fold(0.0, f64::max)
    }
}

/// World-aligned linear velocity Jacobian of a frame origin, restricted to the
/// model plane for planar bases.
fn linear_jacobian(kin: &Kinematics<'_>, frame: FrameId) -> Result<DMatrix<f64>> {
    let j = kin.frame_jacobian(frame)?;
    let rows = match kin.model().base() {
        BaseKind::Planar => 2,
        BaseKind::Floating => 3,
    };
    Ok(j.rows(0, rows).into_owned())
}

fn reduce(base: BaseKind, v: &Vector3<f64>) -> DVector<f64> {
    match base {
        BaseKind::Planar => DVector::from_vec(vec![v.x, v.y]),
        BaseKind::Floating => DVector::from_vec(vec![v.x, v.y, v.z]),
    }
}

fn readings(kin: &Kinematics<'_>, contact: &ContactModel) -> Result<ContactReading> {
    let mut points = Vec::new();
    for (s, surface) in contact.surfaces.iter().enumerate() {
        for &frame in &surface.points {
            let (position, _) = kin.frame_pose(frame)?;
            let v = kin.frame_velocity(frame)?;
            let velocity = match kin.model().base() {
                BaseKind::Planar => Vector3::new(v[0], v[1], 0.0),
                BaseKind::Floating => Vector3::new(v[0], v[1], v[2]),
            };
            let n = surface.normal;
            let penetration = surface.penetration(&position);
            let normal_force = if penetration > 0.0 {
                contact.normal_force(penetration, -n.dot(&velocity))
            } else {
                0.0
            };
            let force = if normal_force > 0.0 {
                let tangential = velocity - n * n.dot(&velocity);
                n * normal_force - tangential * contact.tangential_damping
            } else {
                Vector3::zeros()
            };
            points.push(PointForce {
                surface: s,
                frame,
                position,
                velocity,
                penetration,
                normal_force,
                force,
            });
        }
    }
    Ok(ContactReading { points })
}

/// Contact forces for the current state.
pub fn contact_forces(model: &RobotModel, state: &RobotState, contact: &ContactModel) -> Result<ContactReading> {
    readings(&Kinematics::new(model, state), contact)
}

/// Advances one step of length `dt` under joint torques `tau`. Returns the new
/// state and the contact forces applied during the step.
pub fn step(
    model: &RobotModel,
    state: &RobotState,
    tau: &DVector<f64>,
    contact: &ContactModel,
    dt: f64,
) -> Result<(RobotState, ContactReading)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidDuration(dt));
    }
    if tau.len() != model.n_joints() {
        return Err(Error::dim("joint torques", model.n_joints(), tau.len()));
    }
    let kin = Kinematics::new(model, state);
    let reading = readings(&kin, contact)?;
    let mut lhs = kin.mass_matrix();
    let mut rhs = selection_matrix(model).transpose() * tau - kin.bias_forces();
    let mut damping = DMatrix::zeros(model.nv(), model.nv());
    let base = model.base();
    for p in reading.points.iter().filter(|p| p.active()) {
        let j = linear_jacobian(&kin, p.frame)?;
        let n = reduce(base, &contact.surfaces[p.surface].normal);
        let nnt = &n * n.transpose();
        let tangent = DMatrix::identity(n.len(), n.len()) - &nnt;
        let c = &nnt * contact.damping + tangent * contact.tangential_damping;
        damping += j.transpose() * c * &j;
        lhs += j.transpose() * (&nnt * (contact.stiffness * dt * dt)) * &j;
        rhs += j.transpose() * reduce(base, &p.force);
    }
    let m = kin.mass_matrix();
    lhs += &damping * dt;
    let rhs = (&m + &damping * dt) * &state.qd + rhs * dt;
    let v_next = lhs
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?
        .solve(&rhs);
    let q_next = integrate(model, &state.q, &v_next, dt);
    if !q_next.iter().chain(v_next.iter()).all(|x| x.is_finite()) {
        return Err(Error::SimulationDiverged(f64::NAN));
    }
    Ok((RobotState::new(model, q_next, v_next)?, reading))
}

#[cfg(test)]
mod tests;
