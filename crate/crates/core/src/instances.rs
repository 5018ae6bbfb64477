//! Seeded random models, states and constrained problem instances.
//!
//! Every instance is physically consistent: constraint rows are rows of real
//! frame Jacobians, drift terms are the matching `−J̇q̇`, and the generator
//! only emits sufficiently-constrained, independent constraint sets.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::constraints::{
    check_independence, is_sufficiently_constrained, ConstraintRow, ConstraintSet, ContactKind,
    Role,
};
use crate::error::{Error, Result};
use crate::lexls::{LevelKind, TaskLevel};
use crate::rbd::{BaseKind, FrameSpec, JointSpec, JointType, Kinematics, LinkSpec, ModelSpec, RobotModel, RobotState, MODEL_FORMAT_VERSION};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform3<R: Rng>(rng: &mut R, half: f64) -> [f64; 3] {
    [
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    ]
}

fn random_link<R: Rng>(rng: &mut R, name: String, planar: bool) -> LinkSpec {
    let d = [
        rng.random_range(0.02..0.2),
        rng.random_range(0.02..0.2),
        rng.random_range(0.02..0.2),
    ];
    let off = 0.2 * d.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut com = uniform3(rng, 0.1);
    let mut inertia = [
        d[0],
        d[1],
        d[2],
        rng.random_range(-off..off),
        rng.random_range(-off..off),
        rng.random_range(-off..off),
    ];
    if planar {
        com[2] = 0.0;
    }
    if planar {
        inertia[4] = 0.0;
        inertia[5] = 0.0;
    }
    LinkSpec {
        name,
        mass: rng.random_range(0.5..5.0),
        com,
        inertia,
    }
}

/// Random kinematic tree with `n` actuated joints. Every link carries an
/// extra frame `tip<i>` at a random offset.
pub fn random_model<R: Rng>(rng: &mut R, base: BaseKind, n: usize) -> RobotModel {
    let planar = base == BaseKind::Planar;
    let mut links = vec![random_link(rng, "base".into(), planar)];
    let mut joints = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("link{i}");
        links.push(random_link(rng, name.clone(), planar));
        let parent = if i == 0 || rng.random_bool(0.7) {
            links.len() - 2
        } else {
            rng.random_range(0..links.len() - 1)
        };
        let mut xyz = uniform3(rng, 0.3);
        let (kind, axis, rpy) = if planar {
            xyz[2] = 0.0;
            if rng.random_bool(0.85) {
                (JointType::Revolute, [0.0, 0.0, 1.0], [0.0, 0.0, rng.random_range(-1.0..1.0)])
            } else {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (JointType::Prismatic, [a.cos(), a.sin(), 0.0], [0.0; 3])
            }
        } else {
            let kind = if rng.random_bool(0.85) {
                JointType::Revolute
            } else {
                JointType::Prismatic
            };
            (kind, uniform3(rng, 1.0), uniform3(rng, 1.0))
        };
        joints.push(JointSpec {
            name: format!("joint{i}"),
            kind,
            parent: links[parent].name.clone(),
            child: name,
            axis,
            xyz,
            rpy,
        });
    }
    let frames = links
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut xyz = uniform3(rng, 0.2);
            let mut rpy = uniform3(rng, 1.0);
            if planar {
                xyz[2] = 0.0;
                rpy = [0.0, 0.0, rpy[2]];
            }
            FrameSpec {
                name: format!("tip{i}"),
                link: l.name.clone(),
                xyz,
                rpy,
            }
        })
        .collect();
    let spec = ModelSpec {
        version: MODEL_FORMAT_VERSION,
        name: format!("random_{}_{n}", if planar { "planar" } else { "spatial" }),
        base,
        root: "base".into(),
        gravity: crate::rbd::DEFAULT_GRAVITY,
        links,
        joints,
        frames,
    };
    RobotModel::from_spec(spec).expect("generated model is valid")
}

/// Random pose and velocity; joint angles in `[-1, 1]`, velocities in `[-1, 1]`.
pub fn random_state<R: Rng>(rng: &mut R, model: &RobotModel) -> RobotState {
    let mut q = DVector::from_fn(model.nq(), |_, _| rng.random_range(-1.0..1.0));
    if model.base() == BaseKind::Floating {
        let quat = nalgebra::UnitQuaternion::from_scaled_axis(nalgebra::Vector3::from(uniform3(rng, 2.0)));
        q[3] = quat.w;
        q[4] = quat.i;
        q[5] = quat.j;
        q[6] = quat.k;
    }
    let qd = DVector::from_fn(model.nv(), |_, _| rng.random_range(-1.0..1.0));
    RobotState::new(model, q, qd).expect("generated state is valid")
}

/// Size request for one random constrained problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceParams {
    pub base: BaseKind,
    pub n: usize,
    pub k_s: usize,
    pub k_f: usize,
    /// Make one controlled row a combination of two others.
    pub rank_deficient_f: bool,
}

pub struct Instance {
    pub params: InstanceParams,
    pub model: RobotModel,
    pub state: RobotState,
    pub constraints: ConstraintSet,
}

fn frame_rows<R: Rng>(
    rng: &mut R,
    kin: &Kinematics<'_>,
    frame: &str,
    count: usize,
    role: Role,
) -> Result<Vec<ConstraintRow>> {
    let model = kin.model();
    let mut axes: Vec<usize> = (0..model.base().task_dim()).collect();
    if count < axes.len() {
        axes.shuffle(rng);
        axes.truncate(count);
        axes.sort_unstable();
    }
    crate::constraints::contact_rows(kin, model.frame_id(frame)?, &ContactKind::Axes(axes), role)
}

fn try_instance<R: Rng>(rng: &mut R, params: InstanceParams) -> Result<Option<Instance>> {
    let b = params.base.dim();
    let model = random_model(rng, params.base, params.n);
    let state = random_state(rng, &model);
    let kin = Kinematics::new(&model, &state);

    // Root-link frame last: it only constrains the base.
    let mut tips: Vec<usize> = (1..=params.n).collect();
    tips.shuffle(rng);
    tips.push(0);
    let mut tips = tips.into_iter();
    let mut rows = Vec::new();

    // Full contact first: its base block is an invertible adjoint.
    let first = tips.next().unwrap_or(0);
    rows.extend(frame_rows(rng, &kin, &format!("tip{first}"), b, Role::Supporting)?);
    let mut remaining = params.k_s - b;
    while remaining > 0 {
        let t = tips.next().ok_or(Error::Model("too few links for the requested rows".into()))?;
        let take = remaining.min(b);
        rows.extend(frame_rows(rng, &kin, &format!("tip{t}"), take, Role::Supporting)?);
        remaining -= take;
    }
    let independent_f = if params.rank_deficient_f {
        params.k_f - 1
    } else {
        params.k_f
    };
    let mut f_rows: Vec<ConstraintRow> = Vec::new();
    let mut remaining = independent_f;
    while remaining > 0 {
        let t = tips.next().ok_or(Error::Model("too few links for the requested rows".into()))?;
        let take = remaining.min(b);
        f_rows.extend(frame_rows(rng, &kin, &format!("tip{t}"), take, Role::Controlled)?);
        remaining -= take;
    }
    if params.rank_deficient_f && params.k_f > 0 {
        let dep = if f_rows.is_empty() {
            return Ok(None);
        } else if f_rows.len() == 1 || rng.random_bool(0.3) {
            f_rows[rng.random_range(0..f_rows.len())].clone()
        } else {
            let i = rng.random_range(0..f_rows.len());
            let j = (i + 1 + rng.random_range(0..f_rows.len() - 1)) % f_rows.len();
            let (a, c) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut r = f_rows[i].clone();
            r.jacobian = &f_rows[i].jacobian * a + &f_rows[j].jacobian * c;
            r.c = f_rows[i].c * a + f_rows[j].c * c;
            r.label.axis = usize::MAX;
            r
        };
        let at = rng.random_range(0..=f_rows.len());
        f_rows.insert(at, dep);
    }
    rows.extend(f_rows);
    let cs = ConstraintSet::assemble(model.nv(), rows)?;
    let (sufficient, _) = is_sufficiently_constrained(&cs, b);
    if !sufficient || !check_independence(&cs) {
        return Ok(None);
    }
    // Full row rank apart from the planted dependency, since a random `q̇`
    // makes the drift of any other dependent rows inconsistent; also keep
    // away from near-degenerate geometry.
    let expected = [params.k_s, independent_f, params.k_s + independent_f];
    for (m, want) in [cs.j_s().clone(), cs.j_f().clone(), cs.j_c()].iter().zip(expected) {
        let rr = crate::matdecomp::rank_reveal(m, crate::matdecomp::DEFAULT_RANK_TOL)?;
        if rr.rank != want {
            return Ok(None);
        }
        if rr.rank > 0 && rr.singular_values[rr.rank - 1] < 1e-3 * rr.singular_values[0] {
            return Ok(None);
        }
    }
    drop(kin);
    Ok(Some(Instance {
        params,
        model,
        state,
        constraints: cs,
    }))
}

/// Deterministic instance for `(params, seed)`; resamples internally until
/// the constraint set is sufficiently constrained and independent.
pub fn random_instance(params: InstanceParams, seed: u64) -> Result<Instance> {
    let b = params.base.dim();
    if params.k_s < b || params.k_s > 2 * b {
        return Err(Error::Model(format!("k_s must lie in [{b}, {}]", 2 * b)));
    }
    if params.rank_deficient_f && params.k_f < 1 {
        return Err(Error::Model("a rank-deficient controlled block needs k_f >= 1".into()));
    }
    let independent_rows = params.k_s + params.k_f - usize::from(params.rank_deficient_f);
    if independent_rows > params.n + b {
        return Err(Error::Model(format!(
            "{independent_rows} independent rows exceed n + base_dim = {}",
            params.n + b
        )));
    }
    let mut rng = rng(seed);
    for _ in 0..200 {
        if let Some(inst) = try_instance(&mut rng, params)? {
            return Ok(inst);
        }
    }
    Err(Error::Model(format!("no valid instance found for {params:?}")))
}

/// The mixed batch used by the equivalence checks: `count` instances over
/// `n ∈ [4, 30]`, both base kinds, `k_s ∈ [b, 2b]`, `k_f ∈ [0, 12]`, with
/// every fourth instance (when `k_f ≥ 2`) carrying a rank-deficient `J_f`.
pub fn instance_batch(count: usize, seed: u64) -> Vec<Instance> {
    let mut meta = rng(seed);
    (0..count)
        .map(|i| {
            let base = if i % 2 == 0 {
                BaseKind::Planar
            } else {
                BaseKind::Floating
            };
            let b = base.dim();
            // Dense row counts are not always realizable on a random tree, so
            // redraw the sizes until one is.
            loop {
                let n = meta.random_range(4..=30usize);
                let k_s = meta.random_range(b..=(2 * b).min(n + b));
                let room = n + b - k_s;
                let rank_deficient_f = i % 4 == 3 && room >= 1;
                let k_f_max = 12.min(room + usize::from(rank_deficient_f));
                let k_f_min = usize::from(rank_deficient_f) * 2;
                let k_f = if k_f_max >= k_f_min {
                    meta.random_range(k_f_min..=k_f_max)
                } else {
                    0
                };
                let params = InstanceParams {
                    base,
                    n,
                    k_s,
                    k_f,
                    rank_deficient_f: rank_deficient_f && k_f >= 2,
                };
                let s = seed.wrapping_mul(1_000_003).wrapping_add(meta.random::<u32>() as u64);
                if let Ok(inst) = random_instance(params, s) {
                    return inst;
                }
            }
        })
        .collect()
}

/// Random SPD matrix `LLᵀ + εI` with entries of order one.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &l * l.transpose() + DMatrix::identity(n, n) * 0.1
}

pub fn random_matrix<R: Rng>(rng: &mut R, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Random motion levels over `q̈` and force levels over `f_f`. Each cascade
/// ends with a full-rank level, so `(q̈, f_f)` is fully determined.
pub fn random_levels<R: Rng>(rng: &mut R, nv: usize, k_f: usize) -> (Vec<TaskLevel>, Vec<TaskLevel>) {
    let mut motion = Vec::new();
    let extra = rng.random_range(0..=2);
    for p in 0..extra {
        let rows = rng.random_range(1..=6usize);
        motion.push(
            TaskLevel::new(random_matrix(rng, rows, nv), random_vector(rng, rows) * 5.0, p, LevelKind::Motion)
                .expect("consistent level")
                .named(format!("motion{p}")),
        );
    }
    motion.push(
        TaskLevel::new(DMatrix::identity(nv, nv), random_vector(rng, nv), extra, LevelKind::Motion)
            .expect("consistent level")
            .named("posture"),
    );
    let mut force = Vec::new();
    if k_f > 0 {
        if rng.random_bool(0.5) {
            let rows = rng.random_range(1..=k_f);
            force.push(
                TaskLevel::new(random_matrix(rng, rows, k_f), random_vector(rng, rows) * 20.0, 0, LevelKind::Force)
                    .expect("consistent level")
                    .named("force0"),
            );
        }
        force.push(
            TaskLevel::new(DMatrix::identity(k_f, k_f), random_vector(rng, k_f) * 20.0, 1, LevelKind::Force)
                .expect("consistent level")
                .named("force_all"),
        );
    }
    (motion, force)
}
