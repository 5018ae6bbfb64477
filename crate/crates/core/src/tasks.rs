//! Task construction: minimum-jerk references, PD feedback in task space,
//! and the motion and force levels fed to the solver.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::lexls::{LevelKind, TaskLevel};
use crate::rbd::{BaseKind, FrameId, Kinematics};

pub const DEFAULT_KP: f64 = 10.0;
pub const DEFAULT_KD: f64 = 5.0;

/// Point-to-point motion of duration `duration` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x0: DVector<f64>,
    pub xf: DVector<f64>,
    pub duration: f64,
}

impl Trajectory {
    pub fn new(x0: DVector<f64>, xf: DVector<f64>, duration: f64) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::InvalidDuration(duration));
        }
        if x0.len() != xf.len() {
            return Err(Error::dim("trajectory endpoint", x0.len(), xf.len()));
        }
        Ok(Self { x0, xf, duration })
    }

    /// Stationary reference at `x`.
    pub fn hold(x: DVector<f64>) -> Self {
        Self {
            x0: x.clone(),
            xf: x,
            duration: 1.0,
        }
    }
}

/// Position, velocity and acceleration reference at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x: DVector<f64>,
    pub xd: DVector<f64>,
    pub xdd: DVector<f64>,
}

impl Reference {
    pub fn at_rest(x: DVector<f64>) -> Self {
        let n = x.len();
        Self {
            x,
            xd: DVector::zeros(n),
            xdd: DVector::zeros(n),
        }
    }
}

/// Quintic `10s³ − 15s⁴ + 6s⁵` blend; clamps to the end point for `t > T`
/// and to the start for `t < 0`.
pub fn min_jerk(traj: &Trajectory, t: f64) -> Result<Reference> {
    let big_t = traj.duration;
    if !(big_t > 0.0) {
        return Err(Error::InvalidDuration(big_t));
    }
    let s = (t / big_t).clamp(0.0, 1.0);
    let (s2, s3) = (s * s, s * s * s);
    let p = s3 * (10.0 - 15.0 * s + 6.0 * s2);
    let (dp, ddp) = if t <= 0.0 || t >= big_t {
        (0.0, 0.0)
    } else {
        (
            30.0 * s2 * (1.0 - s) * (1.0 - s) / big_t,
            60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (big_t * big_t),
        )
    };
    let delta = &traj.xf - &traj.x0;
    let x = if s == 1.0 { traj.xf.clone() } else { &traj.x0 + &delta * p };
    Ok(Reference {
        x,
        xd: &delta * dp,
        xdd: &delta * ddp,
    })
}

/// Diagonal task-space gains.
#[derive(Debug, Clone, PartialEq)]
pub struct PdGains {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
}

impl PdGains {
    pub fn new(kp: DVector<f64>, kd: DVector<f64>) -> Result<Self> {
        if kp.len() != kd.len() {
            return Err(Error::dim("gain vector", kp.len(), kd.len()));
        }
        if kp.iter().chain(kd.iter()).any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::Scenario("gains must be positive and finite".into()));
        }
        Ok(Self { kp, kd })
    }

    pub fn uniform(dim: usize, kp: f64, kd: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, kp), DVector::from_element(dim, kd))
    }

    /// `Kp = 10 s⁻²`, `Kd = 5 s⁻¹` on every axis.
    pub fn default_for(dim: usize) -> Self {
        Self {
            kp: DVector::from_element(dim, DEFAULT_KP),
            kd: DVector::from_element(dim, DEFAULT_KD),
        }
    }

    pub fn dim(&self) -> usize {
        self.kp.len()
    }
}

/// `ẍ* = ẍ_r + Kd·(ẋ_r − ẋ) + Kp·e`, where `e` is the position error.
///
/// The error is `x_r − x` unless it is supplied through
/// [`pd_task_acc_with_error`], which orientation tasks need.
pub fn pd_task_acc(x: &DVector<f64>, xd: &DVector<f64>, r: &Reference, gains: &PdGains) -> Result<DVector<f64>> {
    if x.len() != r.x.len() {
        return Err(Error::dim("task position", r.x.len(), x.len()));
    }
    pd_task_acc_with_error(&(&r.x - x), xd, r, gains)
}

pub fn pd_task_acc_with_error(
    error: &DVector<f64>,
    xd: &DVector<f64>,
    r: &Reference,
    gains: &PdGains,
) -> Result<DVector<f64>> {
    let d = gains.dim();
    for (what, len) in [
        ("task position error", error.len()),
        ("task velocity", xd.len()),
        ("reference velocity", r.xd.len()),
        ("reference acceleration", r.xdd.len()),
    ] {
        if len != d {
            return Err(Error::dim(what, d, len));
        }
    }
    Ok(&r.xdd + gains.kd.component_mul(&(&r.xd - xd)) + gains.kp.component_mul(error))
}

/// What a motion level controls.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionTarget {
    /// Selected rows of a frame's task vector: planar `[x, y, θ]`, spatial
    /// `[x, y, z, rx, ry, rz]`.
    Frame { frame: FrameId, rows: Vec<usize> },
    /// Center of mass; `horizontal_only` keeps just the x row.
    Com { horizontal_only: bool },
    /// Joint coordinates (zero base columns).
    Posture,
}

impl MotionTarget {
    pub fn frame(frame: FrameId, base: BaseKind) -> Self {
        MotionTarget::Frame {
            frame,
            rows: (0..base.task_dim()).collect(),
        }
    }
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (i, &r) in rows.iter().enumerate() {
        if r >= m.nrows() {
            return Err(Error::IndexOutOfRange { index: r, len: m.nrows() });
        }
        out.row_mut(i).copy_from(&m.row(r));
    }
    Ok(out)
}

fn select(v: &DVector<f64>, rows: &[usize]) -> Result<DVector<f64>> {
    rows.iter()
        .map(|&r| v.get(r).copied().ok_or(Error::IndexOutOfRange { index: r, len: v.len() }))
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// Task Jacobian, drift `J̇q̇` and dimension for a target.
pub fn task_jacobian(kin: &Kinematics<'_>, target: &MotionTarget) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let model = kin.model();
    match target {
        MotionTarget::Frame { frame, rows } => Ok((
            select_rows(&kin.frame_jacobian(*frame)?, rows)?,
            select(&kin.jdot_qdot(*frame)?, rows)?,
        )),
        MotionTarget::Com { horizontal_only } => {
            let (j, d) = (kin.com_jacobian(), kin.com_jdot_qdot());
            if *horizontal_only {
                Ok((select_rows(&j, &[0])?, select(&d, &[0])?))
            } else {
                Ok((j, d))
            }
        }
        MotionTarget::Posture => {
            let (b, n) = (model.base_dim(), model.n_joints());
            let mut a = DMatrix::zeros(n, model.nv());
            a.columns_mut(b, n).fill_with_identity();
            Ok((a, DVector::zeros(n)))
        }
    }
}

/// Current task position and velocity. Frame orientation is the planar angle
/// or, spatially, the rotation vector of the frame orientation.
pub fn task_state(kin: &Kinematics<'_>, target: &MotionTarget) -> Result<(DVector<f64>, DVector<f64>)> {
    let model = kin.model();
    match target {
        MotionTarget::Frame { frame, rows } => {
            let (p, r) = kin.frame_pose(*frame)?;
            let full = pose_vector(model.base(), &p, &r);
            Ok((select(&full, rows)?, select(&kin.frame_velocity(*frame)?, rows)?))
        }
        MotionTarget::Com { horizontal_only } => {
            let c = kin.com();
            let v = kin.com_jacobian() * &kin.state().qd;
            let rows = if *horizontal_only {
                1
            } else {
                v.len()
            };
            Ok((
                DVector::from_iterator(rows, c.iter().copied().take(rows)),
                v.rows(0, rows).into_owned(),
            ))
        }
        MotionTarget::Posture => {
            let s = kin.state();
            Ok((s.joint_positions(model), s.joint_velocities(model)))
        }
    }
}

fn pose_vector(base: BaseKind, p: &Vector3<f64>, r: &Matrix3<f64>) -> DVector<f64> {
    match base {
        BaseKind::Planar => DVector::from_vec(vec![p.x, p.y, r[(1, 0)].atan2(r[(0, 0)])]),
        BaseKind::Floating => {
            let rv = Rotation3::from_matrix_unchecked(*r).scaled_axis();
            DVector::from_vec(vec![p.x, p.y, p.z, rv.x, rv.y, rv.z])
        }
    }
}

/// Wraps an angle difference into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// Pose error `desired ⊖ current` in task coordinates. Orientation rows use
/// the wrapped angle (planar) or the world-frame rotation vector of
/// `R_d·Rᵀ` (spatial); position rows are plain differences.
pub fn pose_error(base: BaseKind, current: &DVector<f64>, desired: &DVector<f64>) -> Result<DVector<f64>> {
    let d = base.task_dim();
    if current.len() != d || desired.len() != d {
        return Err(Error::dim("pose vector", d, current.len().min(desired.len())));
    }
    let mut e = desired - current;
    match base {
        BaseKind::Planar => e[2] = wrap_angle(e[2]),
        BaseKind::Floating => {
            let rot = |v: &DVector<f64>| Rotation3::new(Vector3::new(v[3], v[4], v[5]));
            let err = (rot(desired) * rot(current).inverse()).scaled_axis();
            e.rows_mut(3, 3).copy_from(&err);
        }
    }
    Ok(e)
}

/// Motion level `J·q̈ = ẍ* − J̇q̇`.
pub fn motion_level(
    kin: &Kinematics<'_>,
    target: &MotionTarget,
    xdd_star: &DVector<f64>,
    priority: i32,
) -> Result<TaskLevel> {
    let (j, drift) = task_jacobian(kin, target)?;
    if xdd_star.len() != j.nrows() {
        return Err(Error::dim("task acceleration", j.nrows(), xdd_star.len()));
    }
    TaskLevel::new(j, xdd_star - drift, priority, LevelKind::Motion)
}

/// PD tracking level for a frame, COM or posture target. Frame targets with
/// all rows selected get an orientation-aware error.
pub fn tracking_level(
    kin: &Kinematics<'_>,
    target: &MotionTarget,
    reference: &Reference,
    gains: &PdGains,
    priority: i32,
) -> Result<TaskLevel> {
    let (x, xd) = task_state(kin, target)?;
    let base = kin.model().base();
    let error = match target {
        MotionTarget::Frame { rows, .. } if rows.len() == base.task_dim() && rows.iter().enumerate().all(|(i, &r)| i == r) => {
            pose_error(base, &x, &reference.x)?
        }
        MotionTarget::Frame { rows, .. } if base == BaseKind::Planar => {
            let mut e = &reference.x - &x;
            for (i, &r) in rows.iter().enumerate() {
                if r == 2 {
                    e[i] = wrap_angle(e[i]);
                }
            }
            e
        }
        _ => {
            if x.len() != reference.x.len() {
                return Err(Error::dim("task reference", x.len(), reference.x.len()));
            }
            &reference.x - &x
        }
    };
    let acc = pd_task_acc_with_error(&error, &xd, reference, gains)?;
    motion_level(kin, target, &acc, priority)
}

/// Selector level over `f_f`: rows `indices`, target `f_des`.
pub fn force_level(cs: &ConstraintSet, indices: &[usize], f_des: &DVector<f64>, priority: i32) -> Result<TaskLevel> {
    let k_f = cs.k_f();
    if indices.len() != f_des.len() {
        return Err(Error::dim("force target", indices.len(), f_des.len()));
    }
    let mut a = DMatrix::zeros(indices.len(), k_f);
    for (i, &c) in indices.iter().enumerate() {
        if c >= k_f {
            return Err(Error::IndexOutOfRange { index: c, len: k_f });
        }
        a[(i, c)] = 1.0;
    }
    TaskLevel::new(a, f_des.clone(), priority, LevelKind::Force)
}

/// Linear ramp from `from` to `to` over `[start, start + duration]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ramp {
    pub from: f64,
    pub to: f64,
    pub start: f64,
    pub duration: f64,
}

impl Ramp {
    pub fn new(from: f64, to: f64, start: f64, duration: f64) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::InvalidDuration(duration));
        }
        Ok(Self {
            from,
            to,
            start,
            duration,
        })
    }

    pub fn value(&self, t: f64) -> f64 {
        let s = ((t - self.start) / self.duration).clamp(0.0, 1.0);
        self.from + (self.to - self.from) * s
    }
}
