//! Floating-base rigid-body dynamics for kinematic trees.
//!
//! Planar models use a three-coordinate base (x, y, rotation about z) built
//! from two massless prismatic bodies and one revolute body, so planar and
//! spatial models run through the same recursive algorithms. Spatial models
//! use a free joint with a unit quaternion; their base velocity is the body
//! twist `[v_body, ω_body]`.
//!
//! Frame Jacobians are world-aligned and taken at the frame origin. Rows are
//! `[vx, vy, ωz]` for planar models and `[v, ω]` for spatial ones; external
//! wrenches use the same row layout (`[Fx, Fy, Mz]` / `[F, M]`).

mod model;
mod spatial;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};

pub use model::{
    BaseKind, FrameId, FrameSpec, JointSpec, JointType, LinkSpec, ModelSpec, RobotModel,
    DEFAULT_GRAVITY, MODEL_FORMAT_VERSION,
};
use model::{Body, JointModel};
use spatial::{ang, cross_force, cross_motion, join, lin, Transform};

use crate::error::{Error, Result};

/// Configuration and velocity of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl RobotState {
    /// Validates lengths and finiteness; renormalizes the base quaternion.
    pub fn new(model: &RobotModel, q: DVector<f64>, qd: DVector<f64>) -> Result<Self> {
        if q.len() != model.nq() {
            return Err(Error::dim("configuration", model.nq(), q.len()));
        }
        if qd.len() != model.nv() {
            return Err(Error::dim("velocity", model.nv(), qd.len()));
        }
        if !q.iter().chain(qd.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        let mut s = Self { q, qd };
        if model.base() == BaseKind::Floating {
            let n = s.q.rows(3, 4).norm();
            if n < 1e-12 {
                return Err(Error::Model("base quaternion has zero norm".into()));
            }
            let mut quat = s.q.rows_mut(3, 4);
            quat /= n;
        }
        Ok(s)
    }

    /// Base at the origin with identity orientation, joints at zero, at rest.
    pub fn neutral(model: &RobotModel) -> Self {
        let mut q = DVector::zeros(model.nq());
        if model.base() == BaseKind::Floating {
            q[3] = 1.0;
        }
        Self {
            q,
            qd: DVector::zeros(model.nv()),
        }
    }

    pub fn joint_positions(&self, model: &RobotModel) -> DVector<f64> {
        let off = model.base().config_dim();
        self.q.rows(off, model.n_joints()).into_owned()
    }

    pub fn joint_velocities(&self, model: &RobotModel) -> DVector<f64> {
        let off = model.base_dim();
        self.qd.rows(off, model.n_joints()).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|x| x.is_finite())
    }
}

/// `q ⊕ v·dt`: joints and planar base advance linearly; a floating base moves
/// by its body twist (position through the current orientation, orientation
/// through the exponential map).
pub fn integrate(model: &RobotModel, q: &DVector<f64>, v: &DVector<f64>, dt: f64) -> DVector<f64> {
    let mut out = q.clone();
    match model.base() {
        BaseKind::Planar => {
            out += v * dt;
        }
        BaseKind::Floating => {
            let quat = base_quaternion(q);
            let dp = quat * Vector3::new(v[0], v[1], v[2]) * dt;
            for k in 0..3 {
                out[k] += dp[k];
            }
            let w = Vector3::new(v[3], v[4], v[5]) * dt;
            let nq = quat * UnitQuaternion::from_scaled_axis(w);
            out[3] = nq.w;
            out[4] = nq.i;
            out[5] = nq.j;
            out[6] = nq.k;
            let n = model.n_joints();
            let mut joints = out.rows_mut(7, n);
            joints += v.rows(6, n) * dt;
        }
    }
    out
}

fn base_quaternion(q: &DVector<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[4], q[5], q[6]))
}

fn joint_transform(body: &Body, q: &DVector<f64>) -> Transform {
    match body.joint {
        JointModel::Revolute(axis) => {
            let r = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_unchecked(axis),
                q[body.q_offset],
            );
            Transform::new(r.matrix().transpose(), Vector3::zeros())
        }
        JointModel::Prismatic(axis) => Transform::new(Matrix3::identity(), axis * q[body.q_offset]),
        JointModel::Free => {
            let o = body.q_offset;
            let rot = base_quaternion(q).to_rotation_matrix();
            Transform::from_pose(rot.matrix(), &Vector3::new(q[o], q[o + 1], q[o + 2]))
        }
    }
}

/// Columns of the motion subspace in body coordinates.
fn subspace(joint: &JointModel) -> Vec<Vector6<f64>> {
    match joint {
        JointModel::Revolute(a) => vec![join(a, &Vector3::zeros())],
        JointModel::Prismatic(a) => vec![join(&Vector3::zeros(), a)],
        JointModel::Free => {
            let mut cols = Vec::with_capacity(6);
            for k in 0..3 {
                let mut c = Vector6::zeros();
                c[3 + k] = 1.0;
                cols.push(c);
            }
            for k in 0..3 {
                let mut c = Vector6::zeros();
                c[k] = 1.0;
                cols.push(c);
            }
            cols
        }
    }
}

fn joint_motion(body: &Body, x: &DVector<f64>) -> Vector6<f64> {
    let o = body.v_offset;
    match body.joint {
        JointModel::Revolute(a) => join(&(a * x[o]), &Vector3::zeros()),
        JointModel::Prismatic(a) => join(&Vector3::zeros(), &(a * x[o])),
        JointModel::Free => Vector6::new(x[o + 3], x[o + 4], x[o + 5], x[o], x[o + 1], x[o + 2]),
    }
}

fn joint_force_project(body: &Body, f: &Vector6<f64>, out: &mut DVector<f64>) {
    let o = body.v_offset;
    match body.joint {
        JointModel::Revolute(a) => out[o] = a.dot(&ang(f)),
        JointModel::Prismatic(a) => out[o] = a.dot(&lin(f)),
        JointModel::Free => {
            for k in 0..3 {
                out[o + k] = f[3 + k];
                out[o + 3 + k] = f[k];
            }
        }
    }
}

/// A wrench applied at a frame origin, world-aligned, in frame-Jacobian row
/// layout.
#[derive(Debug, Clone)]
pub struct ExternalWrench {
    pub frame: FrameId,
    pub wrench: DVector<f64>,
}

/// Forward-kinematics cache for one state. All queries reuse the same pass.
pub struct Kinematics<'a> {
    model: &'a RobotModel,
    state: &'a RobotState,
    x_parent: Vec<Transform>,
    x_world: Vec<Transform>,
    v: Vec<Vector6<f64>>,
    /// Velocity-product accelerations `v × S·q̇`.
    c: Vec<Vector6<f64>>,
    /// Spatial accelerations for `q̈ = 0` without gravity.
    a_drift: Vec<Vector6<f64>>,
}

impl<'a> Kinematics<'a> {
    pub fn new(model: &'a RobotModel, state: &'a RobotState) -> Self {
        let nb = model.bodies.len();
        let mut x_parent = Vec::with_capacity(nb);
        let mut x_world: Vec<Transform> = Vec::with_capacity(nb);
        let mut v: Vec<Vector6<f64>> = Vec::with_capacity(nb);
        let mut c = Vec::with_capacity(nb);
        let mut a_drift: Vec<Vector6<f64>> = Vec::with_capacity(nb);
        for body in &model.bodies {
            let xp = joint_transform(body, &state.q).compose(&body.tree);
            let vj = joint_motion(body, &state.qd);
            let (xw, vi, ai) = match body.parent {
                Some(p) => (
                    xp.compose(&x_world[p]),
                    xp.apply_motion(&v[p]) + vj,
                    xp.apply_motion(&a_drift[p]),
                ),
                None => (xp, vj, Vector6::zeros()),
            };
            let ci = cross_motion(&vi, &vj);
            x_parent.push(xp);
            x_world.push(xw);
            v.push(vi);
            c.push(ci);
            a_drift.push(ai + ci);
        }
        Self {
            model,
            state,
            x_parent,
            x_world,
            v,
            c,
            a_drift,
        }
    }

    pub fn model(&self) -> &RobotModel {
        self.model
    }

    fn frame_transform(&self, id: FrameId) -> (usize, Transform) {
        let f = &self.model.frames[id.0];
        (f.body, f.offset.compose(&self.x_world[f.body]))
    }

    /// World position and orientation (frame-to-world rotation).
    pub fn frame_pose(&self, id: FrameId) -> Result<(Vector3<f64>, Matrix3<f64>)> {
        self.model.check_frame(id)?;
        let (_, x) = self.frame_transform(id);
        Ok((x.r, x.rotation()))
    }

    fn reduce(&self, l: &Vector3<f64>, a: &Vector3<f64>) -> DVector<f64> {
        match self.model.base() {
            BaseKind::Planar => DVector::from_vec(vec![l.x, l.y, a.z]),
            BaseKind::Floating => DVector::from_vec(vec![l.x, l.y, l.z, a.x, a.y, a.z]),
        }
    }

    /// Jacobian of the world-aligned velocity of a point `p` (world
    /// coordinates) rigidly attached to `body`; returns `(linear, angular)`.
    fn point_jacobian(&self, body: usize, p: &Vector3<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let nv = self.model.nv();
        let mut jl = DMatrix::zeros(3, nv);
        let mut ja = DMatrix::zeros(3, nv);
        let mut j = Some(body);
        while let Some(b) = j {
            let bd = &self.model.bodies[b];
            for (k, s) in subspace(&bd.joint).iter().enumerate() {
                let sw = self.x_world[b].inv_apply_motion(s);
                let w = ang(&sw);
                let l = lin(&sw) + w.cross(p);
                jl.fixed_view_mut::<3, 1>(0, bd.v_offset + k).copy_from(&l);
                ja.fixed_view_mut::<3, 1>(0, bd.v_offset + k).copy_from(&w);
            }
            j = bd.parent;
        }
        (jl, ja)
    }

    fn stack_rows(&self, jl: &DMatrix<f64>, ja: &DMatrix<f64>) -> DMatrix<f64> {
        match self.model.base() {
            BaseKind::Planar => {
                let mut j = DMatrix::zeros(3, jl.ncols());
                j.rows_mut(0, 2).copy_from(&jl.rows(0, 2));
                j.row_mut(2).copy_from(&ja.row(2));
                j
            }
            BaseKind::Floating => {
                let mut j = DMatrix::zeros(6, jl.ncols());
                j.rows_mut(0, 3).copy_from(jl);
                j.rows_mut(3, 3).copy_from(ja);
                j
            }
        }
    }

    pub fn frame_jacobian(&self, id: FrameId) -> Result<DMatrix<f64>> {
        self.model.check_frame(id)?;
        let (body, x) = self.frame_transform(id);
        let (jl, ja) = self.point_jacobian(body, &x.r);
        Ok(self.stack_rows(&jl, &ja))
    }

    /// Classical acceleration of a point on `body` at `q̈ = 0`:
    /// `(linear, angular)`.
    fn point_drift(&self, body: usize, p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let vw = self.x_world[body].inv_apply_motion(&self.v[body]);
        let aw = self.x_world[body].inv_apply_motion(&self.a_drift[body]);
        let w = ang(&vw);
        let vp = lin(&vw) + w.cross(p);
        let acc = lin(&aw) + ang(&aw).cross(p) + w.cross(&vp);
        (acc, ang(&aw))
    }

    pub fn jdot_qdot(&self, id: FrameId) -> Result<DVector<f64>> {
        self.model.check_frame(id)?;
        let (body, x) = self.frame_transform(id);
        let (l, a) = self.point_drift(body, &x.r);
        Ok(self.reduce(&l, &a))
    }

    pub fn frame_velocity(&self, id: FrameId) -> Result<DVector<f64>> {
        self.model.check_frame(id)?;
        let (body, x) = self.frame_transform(id);
        let vw = self.x_world[body].inv_apply_motion(&self.v[body]);
        let w = ang(&vw);
        Ok(self.reduce(&(lin(&vw) + w.cross(&x.r)), &w))
    }

    fn body_com_world(&self, b: usize) -> Vector3<f64> {
        let x = &self.x_world[b];
        x.r + x.rotation() * self.model.bodies[b].com
    }

    fn com_rows(&self) -> usize {
        match self.model.base() {
            BaseKind::Planar => 2,
            BaseKind::Floating => 3,
        }
    }

    /// Center of mass in world coordinates (z is zero for planar models).
    pub fn com(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for (b, body) in self.model.bodies.iter().enumerate() {
            if body.mass > 0.0 {
                c += body.mass * self.body_com_world(b);
            }
        }
        c / self.model.total_mass()
    }

    /// COM Jacobian: 2 rows (x, y) planar, 3 rows spatial.
    pub fn com_jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, self.model.nv());
        for (b, body) in self.model.bodies.iter().enumerate() {
            if body.mass > 0.0 {
                let (jl, _) = self.point_jacobian(b, &self.body_com_world(b));
                j += jl * body.mass;
            }
        }
        j /= self.model.total_mass();
        j.rows(0, self.com_rows()).into_owned()
    }

    pub fn com_jdot_qdot(&self) -> DVector<f64> {
        let mut a = Vector3::zeros();
        for (b, body) in self.model.bodies.iter().enumerate() {
            if body.mass > 0.0 {
                a += body.mass * self.point_drift(b, &self.body_com_world(b)).0;
            }
        }
        a /= self.model.total_mass();
        DVector::from_iterator(self.com_rows(), a.iter().copied().take(self.com_rows()))
    }

    /// Composite-rigid-body mass matrix.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let bodies = &self.model.bodies;
        let nv = self.model.nv();
        let mut ic: Vec<Matrix6<f64>> = bodies.iter().map(|b| b.inertia).collect();
        let xm: Vec<Matrix6<f64>> = self.x_parent.iter().map(Transform::motion_matrix).collect();
        for i in (0..bodies.len()).rev() {
            if let Some(p) = bodies[i].parent {
                let contrib = xm[i].transpose() * ic[i] * xm[i];
                ic[p] += contrib;
            }
        }
        let mut h = DMatrix::zeros(nv, nv);
        for i in 0..bodies.len() {
            let si = subspace(&bodies[i].joint);
            for (ki, s) in si.iter().enumerate() {
                let col = bodies[i].v_offset + ki;
                let mut f = ic[i] * s;
                for (kj, sj) in si.iter().enumerate() {
                    h[(bodies[i].v_offset + kj, col)] = sj.dot(&f);
                }
                let mut j = i;
                while let Some(p) = bodies[j].parent {
                    f = xm[j].transpose() * f;
                    j = p;
                    for (kj, sj) in subspace(&bodies[j].joint).iter().enumerate() {
                        let row = bodies[j].v_offset + kj;
                        let val = sj.dot(&f);
                        h[(row, col)] = val;
                        h[(col, row)] = val;
                    }
                }
            }
        }
        h
    }

    /// Recursive Newton–Euler: `M·q̈ + h − Σ Jᵀ·w_ext`.
    pub fn inverse_dynamics(&self, qdd: &DVector<f64>, external: &[ExternalWrench]) -> Result<DVector<f64>> {
        self.rnea(qdd, true, external)
    }

    pub(crate) fn rnea(
        &self,
        qdd: &DVector<f64>,
        with_gravity: bool,
        external: &[ExternalWrench],
    ) -> Result<DVector<f64>> {
        let model = self.model;
        let nv = model.nv();
        if qdd.len() != nv {
            return Err(Error::dim("inverse_dynamics acceleration", nv, qdd.len()));
        }
        let bodies = &model.bodies;
        let mut f: Vec<Vector6<f64>> = Vec::with_capacity(bodies.len());
        let mut a: Vec<Vector6<f64>> = Vec::with_capacity(bodies.len());
        let a_root = if with_gravity {
            join(&Vector3::zeros(), &(-model.gravity_vector()))
        } else {
            Vector6::zeros()
        };
        for (i, body) in bodies.iter().enumerate() {
            let ap = match body.parent {
                Some(p) => self.x_parent[i].apply_motion(&a[p]),
                None => self.x_parent[i].apply_motion(&a_root),
            };
            let ai = ap + joint_motion(body, qdd) + self.c[i];
            let iv = body.inertia * self.v[i];
            f.push(body.inertia * ai + cross_force(&self.v[i], &iv));
            a.push(ai);
        }
        for w in external {
            model.check_frame(w.frame)?;
            let k = model.base().task_dim();
            if w.wrench.len() != k {
                return Err(Error::dim("external wrench", k, w.wrench.len()));
            }
            let (body, x) = self.frame_transform(w.frame);
            let (force, moment) = match model.base() {
                BaseKind::Planar => (
                    Vector3::new(w.wrench[0], w.wrench[1], 0.0),
                    Vector3::new(0.0, 0.0, w.wrench[2]),
                ),
                BaseKind::Floating => (
                    Vector3::new(w.wrench[0], w.wrench[1], w.wrench[2]),
                    Vector3::new(w.wrench[3], w.wrench[4], w.wrench[5]),
                ),
            };
            let f0 = join(&(moment + x.r.cross(&force)), &force);
            f[body] -= self.x_world[body].apply_force(&f0);
        }
        let mut tau = DVector::zeros(nv);
        for i in (0..bodies.len()).rev() {
            joint_force_project(&bodies[i], &f[i], &mut tau);
            if let Some(p) = bodies[i].parent {
                let fp = self.x_parent[i].transpose_apply_force(&f[i]);
                f[p] += fp;
            }
        }
        Ok(tau)
    }

    pub fn bias_forces(&self) -> DVector<f64> {
        self.rnea(&DVector::zeros(self.model.nv()), true, &[])
            .expect("dimensions are consistent")
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.model
            .bodies
            .iter()
            .zip(&self.v)
            .map(|(b, v)| 0.5 * v.dot(&(b.inertia * v)))
            .sum()
    }

    pub fn potential_energy(&self) -> f64 {
        let g = self.model.gravity_vector();
        self.model
            .bodies
            .iter()
            .enumerate()
            .filter(|(_, b)| b.mass > 0.0)
            .map(|(i, b)| -b.mass * g.dot(&self.body_com_world(i)))
            .sum()
    }

    pub fn state(&self) -> &RobotState {
        self.state
    }
}

pub fn mass_matrix(model: &RobotModel, state: &RobotState) -> DMatrix<f64> {
    Kinematics::new(model, state).mass_matrix()
}

pub fn bias_forces(model: &RobotModel, state: &RobotState) -> DVector<f64> {
    Kinematics::new(model, state).bias_forces()
}

pub fn inverse_dynamics(
    model: &RobotModel,
    state: &RobotState,
    qdd: &DVector<f64>,
    external: &[ExternalWrench],
) -> Result<DVector<f64>> {
    Kinematics::new(model, state).inverse_dynamics(qdd, external)
}

pub fn frame_jacobian(model: &RobotModel, state: &RobotState, frame: FrameId) -> Result<DMatrix<f64>> {
    Kinematics::new(model, state).frame_jacobian(frame)
}

pub fn jdot_qdot(model: &RobotModel, state: &RobotState, frame: FrameId) -> Result<DVector<f64>> {
    Kinematics::new(model, state).jdot_qdot(frame)
}

pub fn com(model: &RobotModel, state: &RobotState) -> Vector3<f64> {
    Kinematics::new(model, state).com()
}

pub fn com_jacobian(model: &RobotModel, state: &RobotState) -> DMatrix<f64> {
    Kinematics::new(model, state).com_jacobian()
}

/// Joint selection matrix `S = [0 I_n]`.
pub fn selection_matrix(model: &RobotModel) -> DMatrix<f64> {
    let (b, n) = (model.base_dim(), model.n_joints());
    let mut s = DMatrix::zeros(n, n + b);
    s.view_mut((0, b), (n, n)).fill_with_identity();
    s
}

/// Base selection matrix `S̄ = [I_b 0]`.
pub fn base_selection_matrix(model: &RobotModel) -> DMatrix<f64> {
    let (b, n) = (model.base_dim(), model.n_joints());
    let mut s = DMatrix::zeros(b, n + b);
    s.view_mut((0, 0), (b, b)).fill_with_identity();
    s
}
