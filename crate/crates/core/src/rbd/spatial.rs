//! Minimal 6D spatial algebra (angular part first), crate-internal.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub(crate) fn ang(v: &Vector6<f64>) -> Vector3<f64> {
    v.fixed_rows::<3>(0).into_owned()
}

#[inline]
pub(crate) fn lin(v: &Vector6<f64>) -> Vector3<f64> {
    v.fixed_rows::<3>(3).into_owned()
}

#[inline]
pub(crate) fn join(a: &Vector3<f64>, l: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(a.x, a.y, a.z, l.x, l.y, l.z)
}

/// Plücker transform from frame A to frame B: rotation `e` (A→B coordinates)
/// and the position `r` of B's origin expressed in A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Transform {
    pub e: Matrix3<f64>,
    pub r: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            e: Matrix3::identity(),
            r: Vector3::zeros(),
        }
    }

    pub fn new(e: Matrix3<f64>, r: Vector3<f64>) -> Self {
        Self { e, r }
    }

    /// Transform into a child frame located at `position` with orientation
    /// `rotation` (child-to-parent) in the parent frame.
    pub fn from_pose(rotation: &Matrix3<f64>, position: &Vector3<f64>) -> Self {
        Self {
            e: rotation.transpose(),
            r: *position,
        }
    }

    pub fn apply_motion(&self, m: &Vector6<f64>) -> Vector6<f64> {
        let w = ang(m);
        let v = lin(m);
        join(&(self.e * w), &(self.e * (v - self.r.cross(&w))))
    }

    pub fn apply_force(&self, f: &Vector6<f64>) -> Vector6<f64> {
        let n = ang(f);
        let fl = lin(f);
        join(&(self.e * (n - self.r.cross(&fl))), &(self.e * fl))
    }

    /// Inverse transform applied to a motion vector (B → A).
    pub fn inv_apply_motion(&self, m: &Vector6<f64>) -> Vector6<f64> {
        let w = self.e.transpose() * ang(m);
        let v = self.e.transpose() * lin(m) + self.r.cross(&w);
        join(&w, &v)
    }

    /// `Xᵀ·f`: a force in B coordinates mapped back to A.
    pub fn transpose_apply_force(&self, f: &Vector6<f64>) -> Vector6<f64> {
        let fl = self.e.transpose() * lin(f);
        let n = self.e.transpose() * ang(f) + self.r.cross(&fl);
        join(&n, &fl)
    }

    /// `self ∘ first`: first A→B, then B→C.
    pub fn compose(&self, first: &Transform) -> Transform {
        Transform {
            e: self.e * first.e,
            r: first.r + first.e.transpose() * self.r,
        }
    }

    pub fn motion_matrix(&self) -> Matrix6<f64> {
        let mut x = Matrix6::zeros();
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.e);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.e);
        x.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-self.e * skew(&self.r)));
        x
    }

    /// Rotation from B coordinates to A coordinates (orientation of B in A).
    pub fn rotation(&self) -> Matrix3<f64> {
        self.e.transpose()
    }
}

pub(crate) fn cross_motion(v: &Vector6<f64>, m: &Vector6<f64>) -> Vector6<f64> {
    let w = ang(v);
    let vl = lin(v);
    join(&w.cross(&ang(m)), &(w.cross(&lin(m)) + vl.cross(&ang(m))))
}

pub(crate) fn cross_force(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let w = ang(v);
    let vl = lin(v);
    join(&(w.cross(&ang(f)) + vl.cross(&lin(f))), &w.cross(&lin(f)))
}

/// Spatial inertia about a body origin from mass, COM offset and rotational
/// inertia about the COM.
pub(crate) fn spatial_inertia(mass: f64, com: &Vector3<f64>, inertia_com: &Matrix3<f64>) -> Matrix6<f64> {
    let c = skew(com);
    let mut i = Matrix6::zeros();
    i.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(inertia_com + mass * c * c.transpose()));
    i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(mass * c));
    i.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(mass * c.transpose()));
    i.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * mass));
    i
}
