//! Split constraint structure: supporting rows `J_s` and controlled rows `J_f`.
//!
//! The stacked Jacobian is always `J_c = [J_f; J_s]`, controlled rows first.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matdecomp::{rank_reveal, DEFAULT_RANK_TOL};
use crate::rbd::{BaseKind, FrameId, Kinematics, RobotModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Supporting,
    Controlled,
}

/// Where a constraint row came from: a frame name and a row index of its
/// frame Jacobian (`[vx vy ωz]` planar, `[vx vy vz ωx ωy ωz]` spatial).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLabel {
    pub frame: String,
    pub axis: usize,
}

impl std::fmt::Display for RowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.frame, self.axis)
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub jacobian: DVector<f64>,
    pub c: f64,
    pub role: Role,
    pub label: RowLabel,
}

/// Row subset of a frame Jacobian used as a rigid contact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContactKind {
    /// All rows: 6 spatial, 3 planar.
    Flat,
    /// Linear rows only: 3 spatial, 2 planar.
    Point,
    /// Explicit row indices.
    Axes(Vec<usize>),
}

impl ContactKind {
    pub fn rows(&self, base: BaseKind) -> Vec<usize> {
        match self {
            ContactKind::Flat => (0..base.task_dim()).collect(),
            ContactKind::Point => match base {
                BaseKind::Planar => vec![0, 1],
                BaseKind::Floating => vec![0, 1, 2],
            },
            ContactKind::Axes(a) => a.clone(),
        }
    }
}

/// Rigid-contact rows for `frame`: `J_row·q̈ = −J̇q̇_row`.
pub fn contact_rows(
    kin: &Kinematics<'_>,
    frame: FrameId,
    kind: &ContactKind,
    role: Role,
) -> Result<Vec<ConstraintRow>> {
    let model = kin.model();
    let j = kin.frame_jacobian(frame)?;
    let drift = kin.jdot_qdot(frame)?;
    let name = model.frame_name(frame).to_string();
    kind.rows(model.base())
        .into_iter()
        .map(|r| {
            if r >= j.nrows() {
                return Err(Error::IndexOutOfRange { index: r, len: j.nrows() });
            }
            Ok(ConstraintRow {
                jacobian: j.row(r).transpose(),
                c: -drift[r],
                role,
                label: RowLabel {
                    frame: name.clone(),
                    axis: r,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ConstraintSet {
    nv: usize,
    j_s: DMatrix<f64>,
    c_s: DVector<f64>,
    j_f: DMatrix<f64>,
    c_f: DVector<f64>,
    labels_s: Vec<RowLabel>,
    labels_f: Vec<RowLabel>,
}

impl ConstraintSet {
    /// Rows keep their submission order within each role.
    pub fn assemble(nv: usize, rows: impl IntoIterator<Item = ConstraintRow>) -> Result<Self> {
        let (mut s, mut f) = (Vec::new(), Vec::new());
        for row in rows {
            if row.jacobian.len() != nv {
                return Err(Error::dim("constraint row width", nv, row.jacobian.len()));
            }
            match row.role {
                Role::Supporting => s.push(row),
                Role::Controlled => f.push(row),
            }
        }
        let stack = |rows: &[ConstraintRow]| {
            let mut j = DMatrix::zeros(rows.len(), nv);
            for (i, r) in rows.iter().enumerate() {
                j.row_mut(i).copy_from(&r.jacobian.transpose());
            }
            let c = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.c));
            (j, c, rows.iter().map(|r| r.label.clone()).collect::<Vec<_>>())
        };
        let (j_s, c_s, labels_s) = stack(&s);
        let (j_f, c_f, labels_f) = stack(&f);
        Ok(Self {
            nv,
            j_s,
            c_s,
            j_f,
            c_f,
            labels_s,
            labels_f,
        })
    }

    /// Builds a set from raw blocks; rows get anonymous labels.
    pub fn from_blocks(
        j_s: DMatrix<f64>,
        c_s: DVector<f64>,
        j_f: DMatrix<f64>,
        c_f: DVector<f64>,
    ) -> Result<Self> {
        let nv = j_s.ncols();
        if j_f.ncols() != nv {
            return Err(Error::dim("controlled block width", nv, j_f.ncols()));
        }
        if c_s.len() != j_s.nrows() {
            return Err(Error::dim("supporting drift", j_s.nrows(), c_s.len()));
        }
        if c_f.len() != j_f.nrows() {
            return Err(Error::dim("controlled drift", j_f.nrows(), c_f.len()));
        }
        let anon = |tag: &str, k: usize| {
            (0..k)
                .map(|axis| RowLabel {
                    frame: tag.to_string(),
                    axis,
                })
                .collect()
        };
        Ok(Self {
            nv,
            labels_s: anon("s", j_s.nrows()),
            labels_f: anon("f", j_f.nrows()),
            j_s,
            c_s,
            j_f,
            c_f,
        })
    }

    /// Contacts for each `(frame, kind, role)` evaluated at the cached state.
    pub fn from_contacts(
        kin: &Kinematics<'_>,
        contacts: &[(FrameId, ContactKind, Role)],
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for (frame, kind, role) in contacts {
            rows.extend(contact_rows(kin, *frame, kind, *role)?);
        }
        Self::assemble(kin.model().nv(), rows)
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn j_s(&self) -> &DMatrix<f64> {
        &self.j_s
    }

    pub fn c_s(&self) -> &DVector<f64> {
        &self.c_s
    }

    pub fn j_f(&self) -> &DMatrix<f64> {
        &self.j_f
    }

    pub fn c_f(&self) -> &DVector<f64> {
        &self.c_f
    }

    pub fn k_s(&self) -> usize {
        self.j_s.nrows()
    }

    pub fn k_f(&self) -> usize {
        self.j_f.nrows()
    }

    pub fn k(&self) -> usize {
        self.k_s() + self.k_f()
    }

    pub fn labels_s(&self) -> &[RowLabel] {
        &self.labels_s
    }

    pub fn labels_f(&self) -> &[RowLabel] {
        &self.labels_f
    }

    /// `J_c = [J_f; J_s]`.
    pub fn j_c(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.k(), self.nv);
        j.rows_mut(0, self.k_f()).copy_from(&self.j_f);
        j.rows_mut(self.k_f(), self.k_s()).copy_from(&self.j_s);
        j
    }

    /// `c_c = [c_f; c_s]`.
    pub fn c_c(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.k());
        c.rows_mut(0, self.k_f()).copy_from(&self.c_f);
        c.rows_mut(self.k_f(), self.k_s()).copy_from(&self.c_s);
        c
    }

    /// Index of a controlled row by label.
    pub fn controlled_index(&self, frame: &str, axis: usize) -> Option<usize> {
        self.labels_f
            .iter()
            .position(|l| l.frame == frame && l.axis == axis)
    }
}

/// Outcome of the sufficiently-constrained test `rank(J_s·S̄ᵀ) = b`.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub rank: usize,
    pub base_dim: usize,
    /// Singular values of `J_s·S̄ᵀ`.
    pub singular_values: Vec<f64>,
    /// `rank(J_s)`, reported alongside for diagnostics.
    pub rank_j_s: usize,
}

impl RankReport {
    pub fn sufficient(&self) -> bool {
        self.rank == self.base_dim
    }
}

pub fn is_sufficiently_constrained(cs: &ConstraintSet, base_dim: usize) -> (bool, RankReport) {
    let b = base_dim.min(cs.nv());
    let jsb = cs.j_s().columns(0, b).into_owned();
    let rr = rank_reveal(&jsb, DEFAULT_RANK_TOL).expect("finite constraint rows");
    let rs = rank_reveal(cs.j_s(), DEFAULT_RANK_TOL).expect("finite constraint rows");
    let report = RankReport {
        rank: rr.rank,
        base_dim,
        singular_values: rr.singular_values.iter().copied().collect(),
        rank_j_s: rs.rank,
    };
    (report.sufficient(), report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndependenceReport {
    pub rank_c: usize,
    pub rank_f: usize,
    pub rank_s: usize,
}

impl IndependenceReport {
    pub fn independent(&self) -> bool {
        self.rank_c == self.rank_f + self.rank_s
    }
}

pub fn independence_report(cs: &ConstraintSet) -> IndependenceReport {
    let rank = |m: &DMatrix<f64>| rank_reveal(m, DEFAULT_RANK_TOL).expect("finite constraint rows").rank;
    IndependenceReport {
        rank_c: rank(&cs.j_c()),
        rank_f: rank(cs.j_f()),
        rank_s: rank(cs.j_s()),
    }
}

/// `rank J_c = rank J_f + rank J_s`.
pub fn check_independence(cs: &ConstraintSet) -> bool {
    independence_report(cs).independent()
}

/// Convenience for models: rows for contacts on named frames.
pub fn contacts_by_name(
    model: &RobotModel,
    kin: &Kinematics<'_>,
    contacts: &[(&str, ContactKind, Role)],
) -> Result<ConstraintSet> {
    let resolved = contacts
        .iter()
        .map(|(name, kind, role)| Ok((model.frame_id(name)?, kind.clone(), *role)))
        .collect::<Result<Vec<_>>>()?;
    ConstraintSet::from_contacts(kin, &resolved)
}
