use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Rotation3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::spatial::{spatial_inertia, Transform};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GRAVITY: f64 = 9.81;

/// Floating-base parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    /// x, y translation and rotation about z; motion stays in the x–y plane.
    Planar,
    /// Position plus unit quaternion; body-frame twist as velocity.
    Floating,
}

impl BaseKind {
    pub fn dim(self) -> usize {
        match self {
            BaseKind::Planar => 3,
            BaseKind::Floating => 6,
        }
    }

    pub fn config_dim(self) -> usize {
        match self {
            BaseKind::Planar => 3,
            BaseKind::Floating => 7,
        }
    }

    /// Rows of a frame Jacobian: `[vx vy ωz]` planar, `[v ω]` spatial.
    pub fn task_dim(self) -> usize {
        self.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    pub mass: f64,
    #[serde(default)]
    pub com: [f64; 3],
    /// `[ixx, iyy, izz, ixy, ixz, iyz]` about the COM, link axes.
    pub inertia: [f64; 6],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointType,
    pub parent: String,
    pub child: String,
    pub axis: [f64; 3],
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    pub name: String,
    pub link: String,
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

/// Declarative model description; the on-disk TOML format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub version: u32,
    pub name: String,
    pub base: BaseKind,
    pub root: String,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub frames: Vec<FrameSpec>,
}

fn default_gravity() -> f64 {
    DEFAULT_GRAVITY
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum JointModel {
    Revolute(Vector3<f64>),
    Prismatic(Vector3<f64>),
    /// Six-DoF base: velocity `[v_body, ω_body]`.
    Free,
}

#[derive(Debug, Clone)]
pub(crate) struct Body {
    pub parent: Option<usize>,
    pub joint: JointModel,
    pub tree: Transform,
    pub inertia: Matrix6<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub v_offset: usize,
    pub q_offset: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Frame {
    pub name: String,
    pub body: usize,
    pub offset: Transform,
}

/// Immutable floating-base kinematic tree with inertial parameters.
#[derive(Debug, Clone)]
pub struct RobotModel {
    name: String,
    base: BaseKind,
    gravity: f64,
    pub(crate) bodies: Vec<Body>,
    pub(crate) frames: Vec<Frame>,
    frame_index: HashMap<String, usize>,
    joint_names: Vec<String>,
    n_joints: usize,
    total_mass: f64,
    spec: ModelSpec,
}

fn rpy_matrix(rpy: &[f64; 3]) -> Matrix3<f64> {
    *Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]).matrix()
}

fn inertia_matrix(i: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(i[0], i[3], i[4], i[3], i[1], i[5], i[4], i[5], i[2])
}

impl RobotModel {
    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        if spec.version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                spec.version
            )));
        }
        if !(spec.gravity.is_finite() && spec.gravity >= 0.0) {
            return Err(Error::Model("gravity must be finite and non-negative".into()));
        }
        let mut link_index = HashMap::new();
        for (i, l) in spec.links.iter().enumerate() {
            if link_index.insert(l.name.clone(), i).is_some() {
                return Err(Error::Model(format!("duplicate link `{}`", l.name)));
            }
            if !(l.mass > 0.0 && l.mass.is_finite()) {
                return Err(Error::Model(format!("link `{}` must have positive mass", l.name)));
            }
            let eig = SymmetricEigen::new(inertia_matrix(&l.inertia));
            if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Model(format!(
                    "link `{}` inertia is not positive-definite",
                    l.name
                )));
            }
        }
        let root = *link_index
            .get(&spec.root)
            .ok_or_else(|| Error::Model(format!("root link `{}` not found", spec.root)))?;

        // child link -> joint
        let mut parent_joint: Vec<Option<usize>> = vec![None; spec.links.len()];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); spec.links.len()];
        for (ji, j) in spec.joints.iter().enumerate() {
            let p = *link_index
                .get(&j.parent)
                .ok_or_else(|| Error::Model(format!("joint `{}`: unknown parent `{}`", j.name, j.parent)))?;
            let c = *link_index
                .get(&j.child)
                .ok_or_else(|| Error::Model(format!("joint `{}`: unknown child `{}`", j.name, j.child)))?;
            if c == root {
                return Err(Error::Model(format!("joint `{}` has the root as child", j.name)));
            }
            if parent_joint[c].replace(ji).is_some() {
                return Err(Error::Model(format!("link `{}` has more than one parent", j.child)));
            }
            let axis = Vector3::from(j.axis);
            if !(axis.norm() > 1e-9) {
                return Err(Error::Model(format!("joint `{}` has a zero axis", j.name)));
            }
            if spec.base == BaseKind::Planar {
                let a = axis.normalize();
                let planar_ok = match j.kind {
                    JointType::Revolute => a.x.abs() < 1e-12 && a.y.abs() < 1e-12,
                    JointType::Prismatic => a.z.abs() < 1e-12,
                };
                if !planar_ok || j.xyz[2] != 0.0 || j.rpy[0] != 0.0 || j.rpy[1] != 0.0 {
                    return Err(Error::Model(format!(
                        "joint `{}` leaves the x-y plane of a planar model",
                        j.name
                    )));
                }
            }
            children[p].push(c);
        }

        // Depth-first ordering so that parents precede children.
        let mut order = Vec::with_capacity(spec.links.len());
        let mut stack = vec![root];
        while let Some(l) = stack.pop() {
            order.push(l);
            for &c in children[l].iter().rev() {
                stack.push(c);
            }
        }
        if order.len() != spec.links.len() {
            return Err(Error::Model("links are not connected to the root as a tree".into()));
        }

        let mut bodies = Vec::new();
        let mut link_body = vec![usize::MAX; spec.links.len()];
        let (mut nv, mut nq): (usize, usize);
        let link_params = |l: &LinkSpec| {
            let com = Vector3::from(l.com);
            let ic = inertia_matrix(&l.inertia);
            (spatial_inertia(l.mass, &com, &ic), l.mass, com)
        };

        match spec.base {
            BaseKind::Planar => {
                let massless = Matrix6::zeros();
                for (k, joint) in [
                    JointModel::Prismatic(Vector3::x()),
                    JointModel::Prismatic(Vector3::y()),
                ]
                .into_iter()
                .enumerate()
                {
                    bodies.push(Body {
                        parent: k.checked_sub(1),
                        joint,
                        tree: Transform::identity(),
                        inertia: massless,
                        mass: 0.0,
                        com: Vector3::zeros(),
                        v_offset: k,
                        q_offset: k,
                    });
                }
                let (inertia, mass, com) = link_params(&spec.links[root]);
                bodies.push(Body {
                    parent: Some(1),
                    joint: JointModel::Revolute(Vector3::z()),
                    tree: Transform::identity(),
                    inertia,
                    mass,
                    com,
                    v_offset: 2,
                    q_offset: 2,
                });
                nv = 3;
                nq = 3;
            }
            BaseKind::Floating => {
                let (inertia, mass, com) = link_params(&spec.links[root]);
                bodies.push(Body {
                    parent: None,
                    joint: JointModel::Free,
                    tree: Transform::identity(),
                    inertia,
                    mass,
                    com,
                    v_offset: 0,
                    q_offset: 0,
                });
                nv = 6;
                nq = 7;
            }
        }
        link_body[root] = bodies.len() - 1;

        let mut joint_names = Vec::new();
        for &l in order.iter().skip(1) {
            let ji = parent_joint[l].expect("non-root link has a parent joint");
            let j = &spec.joints[ji];
            let axis = Vector3::from(j.axis).normalize();
            let joint = match j.kind {
                JointType::Revolute => JointModel::Revolute(axis),
                JointType::Prismatic => JointModel::Prismatic(axis),
            };
            let (inertia, mass, com) = link_params(&spec.links[l]);
            let parent_link = link_index[&j.parent];
            bodies.push(Body {
                parent: Some(link_body[parent_link]),
                joint,
                tree: Transform::from_pose(&rpy_matrix(&j.rpy), &Vector3::from(j.xyz)),
                inertia,
                mass,
                com,
                v_offset: nv,
                q_offset: nq,
            });
            link_body[l] = bodies.len() - 1;
            joint_names.push(j.name.clone());
            nv += 1;
            nq += 1;
        }

        let mut frames = Vec::new();
        let mut frame_index = HashMap::new();
        for (i, l) in spec.links.iter().enumerate() {
            frame_index.insert(l.name.clone(), frames.len());
            frames.push(Frame {
                name: l.name.clone(),
                body: link_body[i],
                offset: Transform::identity(),
            });
        }
        for f in &spec.frames {
            let l = *link_index
                .get(&f.link)
                .ok_or_else(|| Error::Model(format!("frame `{}`: unknown link `{}`", f.name, f.link)))?;
            if frame_index.insert(f.name.clone(), frames.len()).is_some() {
                return Err(Error::Model(format!("duplicate frame `{}`", f.name)));
            }
            frames.push(Frame {
                name: f.name.clone(),
                body: link_body[l],
                offset: Transform::from_pose(&rpy_matrix(&f.rpy), &Vector3::from(f.xyz)),
            });
        }

        let total_mass = spec.links.iter().map(|l| l.mass).sum();
        Ok(Self {
            name: spec.name.clone(),
            base: spec.base,
            gravity: spec.gravity,
            bodies,
            frames,
            frame_index,
            n_joints: joint_names.len(),
            joint_names,
            total_mass,
            spec,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        Self::from_spec(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.spec).expect("model spec serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> BaseKind {
        self.base
    }

    pub fn base_dim(&self) -> usize {
        self.base.dim()
    }

    /// Actuated joint count `n`.
    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    /// Velocity dimension `n + base_dim`.
    pub fn nv(&self) -> usize {
        self.n_joints + self.base.dim()
    }

    /// Configuration dimension (`n + 3` planar, `n + 7` spatial).
    pub fn nq(&self) -> usize {
        self.n_joints + self.base.config_dim()
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn set_gravity(&mut self, g: f64) {
        self.gravity = g;
        self.spec.gravity = g;
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn frame_id(&self, name: &str) -> Result<FrameId> {
        self.frame_index
            .get(name)
            .map(|&i| FrameId(i))
            .ok_or_else(|| Error::UnknownFrame(name.to_string()))
    }

    pub fn frame_name(&self, id: FrameId) -> &str {
        &self.frames[id.0].name
    }

    pub fn frame_names(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.name.as_str())
    }

    pub(crate) fn check_frame(&self, id: FrameId) -> Result<()> {
        if id.0 < self.frames.len() {
            Ok(())
        } else {
            Err(Error::UnknownFrame(format!("#{}", id.0)))
        }
    }

    /// Gravity as a world-frame acceleration vector.
    pub(crate) fn gravity_vector(&self) -> Vector3<f64> {
        match self.base {
            BaseKind::Planar => Vector3::new(0.0, -self.gravity, 0.0),
            BaseKind::Floating => Vector3::new(0.0, 0.0, -self.gravity),
        }
    }
}
