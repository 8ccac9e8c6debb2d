//! Affine control systems `x' = F0(x) + u1 F1(x) + u2 F2(x)` on a single
//! four-dimensional chart, with the control restricted to the unit disk.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State dimension of every supported system.
pub const DIM: usize = 4;

pub type State = Vector4<f64>;

pub type FieldFn = Arc<dyn Fn(&State) -> State + Send + Sync>;
pub type JacobianFn = Arc<dyn Fn(&State) -> Matrix4<f64> + Send + Sync>;
/// `(x, p, u) -> d/dx (JF_u(x)^T p)` with `F_u = F0 + u1 F1 + u2 F2`.
pub type AdjointHessianFn = Arc<dyn Fn(&State, &State, &ControlValue) -> Matrix4<f64> + Send + Sync>;

/// A point of the closed unit disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlValue {
    pub u1: f64,
    pub u2: f64,
}

impl ControlValue {
    pub const ZERO: ControlValue = ControlValue { u1: 0.0, u2: 0.0 };

    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn norm(&self) -> f64 {
        self.u1.hypot(self.u2)
    }

    pub fn is_admissible(&self) -> bool {
        self.u1 * self.u1 + self.u2 * self.u2 <= 1.0 + 1e-12
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.u1, self.u2)
    }
}

impl fmt::Display for ControlValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.u1, self.u2)
    }
}

/// Index of a vector field: 0 is the drift, 1 and 2 the control fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldIndex {
    Drift,
    Control1,
    Control2,
}

impl FieldIndex {
    pub const ALL: [FieldIndex; 3] = [FieldIndex::Drift, FieldIndex::Control1, FieldIndex::Control2];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn slot(self) -> usize {
        match self {
            FieldIndex::Drift => 0,
            FieldIndex::Control1 => 1,
            FieldIndex::Control2 => 2,
        }
    }
}

/// Drift and control fields together with their Jacobians.
///
/// Evaluators must be pure functions of the state; the value is immutable
/// after construction and cheap to clone.
#[derive(Clone)]
pub struct AffineSystem {
    name: String,
    fields: [FieldFn; 3],
    jacobians: [JacobianFn; 3],
    adjoint_hessian: Option<AdjointHessianFn>,
}

impl fmt::Debug for AffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineSystem")
            .field("name", &self.name)
            .field("analytic_hessian", &self.adjoint_hessian.is_some())
            .finish()
    }
}

impl AffineSystem {
    pub fn new(name: impl Into<String>, fields: [FieldFn; 3], jacobians: [JacobianFn; 3]) -> Self {
        Self { name: name.into(), fields, jacobians, adjoint_hessian: None }
    }

    /// Builds a system from evaluators declared with an explicit dimension.
    /// Only `dim == 4` is accepted.
    pub fn with_dimension(
        name: impl Into<String>,
        dim: usize,
        fields: [FieldFn; 3],
        jacobians: [JacobianFn; 3],
    ) -> Result<Self> {
        if dim != DIM {
            return Err(Error::DimensionMismatch { expected: DIM, found: dim });
        }
        Ok(Self::new(name, fields, jacobians))
    }

    /// Supplies the second derivative `d/dx (JF_u^T p)` analytically instead of
    /// differencing the Jacobians.
    pub fn with_adjoint_hessian(mut self, hessian: AdjointHessianFn) -> Self {
        self.adjoint_hessian = Some(hessian);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        DIM
    }

    pub fn field(&self, i: FieldIndex, x: &State) -> Result<State> {
        let v = (self.fields[i.slot()])(x);
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(Error::Evaluation { what: "vector field" })
        }
    }

    pub fn jacobian(&self, i: FieldIndex, x: &State) -> Result<Matrix4<f64>> {
        let m = (self.jacobians[i.slot()])(x);
        if m.iter().all(|c| c.is_finite()) {
            Ok(m)
        } else {
            Err(Error::Evaluation { what: "field Jacobian" })
        }
    }

    pub fn f0(&self, x: &State) -> Result<State> {
        self.field(FieldIndex::Drift, x)
    }

    pub fn f1(&self, x: &State) -> Result<State> {
        self.field(FieldIndex::Control1, x)
    }

    pub fn f2(&self, x: &State) -> Result<State> {
        self.field(FieldIndex::Control2, x)
    }

    /// `d/dx (JF_u(x)^T p)`, analytic when available, else central differences
    /// of the Jacobian evaluators.
    pub fn adjoint_hessian(&self, x: &State, p: &State, u: &ControlValue) -> Result<Matrix4<f64>> {
        if let Some(h) = &self.adjoint_hessian {
            let m = h(x, p, u);
            return if m.iter().all(|c| c.is_finite()) {
                Ok(m)
            } else {
                Err(Error::Evaluation { what: "adjoint Hessian" })
            };
        }
        let step = 1e-6 * (1.0 + x.norm());
        let mut out = Matrix4::zeros();
        for k in 0..DIM {
            let mut xp = *x;
            let mut xm = *x;
            xp[k] += step;
            xm[k] -= step;
            let gp = self.control_jacobian(&xp, u)?.transpose() * p;
            let gm = self.control_jacobian(&xm, u)?.transpose() * p;
            out.set_column(k, &((gp - gm) / (2.0 * step)));
        }
        Ok(out)
    }

    /// `JF0 + u1 JF1 + u2 JF2` at `x`.
    pub fn control_jacobian(&self, x: &State, u: &ControlValue) -> Result<Matrix4<f64>> {
        Ok(self.jacobian(FieldIndex::Drift, x)?
            + self.jacobian(FieldIndex::Control1, x)? * u.u1
            + self.jacobian(FieldIndex::Control2, x)? * u.u2)
    }
}

/// `[F_i, F_j](x) = JF_j(x) F_i(x) - JF_i(x) F_j(x)`.
pub fn lie_bracket(sys: &AffineSystem, i: FieldIndex, j: FieldIndex, x: &State) -> Result<State> {
    if i == j {
        return Ok(State::zeros());
    }
    let fi = sys.field(i, x)?;
    let fj = sys.field(j, x)?;
    Ok(sys.jacobian(j, x)? * fi - sys.jacobian(i, x)? * fj)
}

/// `det(F1, F2, F01, F02)` with the columns in that order.
pub fn check_a1(sys: &AffineSystem, x: &State) -> Result<f64> {
    let m = Matrix4::from_columns(&[
        sys.f1(x)?,
        sys.f2(x)?,
        lie_bracket(sys, FieldIndex::Drift, FieldIndex::Control1, x)?,
        lie_bracket(sys, FieldIndex::Drift, FieldIndex::Control2, x)?,
    ]);
    Ok(m.determinant())
}

/// Like [`check_a1`] but fails when `|det| < tol_a1`.
pub fn require_a1(sys: &AffineSystem, x: &State, tol_a1: f64) -> Result<f64> {
    let det = check_a1(sys, x)?;
    if det.abs() < tol_a1 {
        return Err(Error::AssumptionViolated { assumption: crate::error::Assumption::A1, value: det });
    }
    Ok(det)
}

/// `F0(x) + u1 F1(x) + u2 F2(x)`.
pub fn dynamics_rhs(sys: &AffineSystem, x: &State, u: &ControlValue) -> Result<State> {
    debug_assert!(u.is_admissible(), "control {u} outside the unit disk");
    Ok(sys.f0(x)? + sys.f1(x)? * u.u1 + sys.f2(x)? * u.u2)
}

/// Largest relative deviation between each Jacobian evaluator and central
/// differences of its field at `x`.
pub fn jacobian_consistency(sys: &AffineSystem, x: &State) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in FieldIndex::ALL {
        let analytic = sys.jacobian(i, x)?;
        let fd = finite_difference_jacobian(|y| sys.field(i, y), x)?;
        let scale = analytic.norm().max(fd.norm()).max(1.0);
        worst = worst.max((analytic - fd).norm() / scale);
    }
    Ok(worst)
}

pub(crate) fn finite_difference_jacobian<F>(f: F, x: &State) -> Result<Matrix4<f64>>
where
    F: Fn(&State) -> Result<State>,
{
    let mut out = Matrix4::zeros();
    for k in 0..DIM {
        let step = 1e-6 * (1.0 + x[k].abs());
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += step;
        xm[k] -= step;
        out.set_column(k, &((f(&xp)? - f(&xm)?) / (2.0 * step)));
    }
    Ok(out)
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 2] = ["nilpotent-kepler", "pendulum-kepler"];

/// Looks up a built-in system by name.
pub fn builtin(name: &str) -> Result<AffineSystem> {
    match name {
        "nilpotent-kepler" => Ok(builtin_nilpotent_kepler()),
        "pendulum-kepler" => Ok(builtin_pendulum_kepler()),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Nilpotent approximation of the minimum-time two-body problem:
/// `x1' = 1 + x3`, `x2' = x4`, `x3' = u1`, `x4' = u2`.
pub fn builtin_nilpotent_kepler() -> AffineSystem {
    let f0: FieldFn = Arc::new(|x: &State| State::new(1.0 + x[2], x[3], 0.0, 0.0));
    let f1: FieldFn = Arc::new(|_: &State| State::new(0.0, 0.0, 1.0, 0.0));
    let f2: FieldFn = Arc::new(|_: &State| State::new(0.0, 0.0, 0.0, 1.0));
    let j0: JacobianFn = Arc::new(|_: &State| {
        let mut m = Matrix4::zeros();
        m[(0, 2)] = 1.0;
        m[(1, 3)] = 1.0;
        m
    });
    let zero: JacobianFn = Arc::new(|_: &State| Matrix4::zeros());
    AffineSystem::new("nilpotent-kepler", [f0, f1, f2], [j0, zero.clone(), zero])
        .with_adjoint_hessian(Arc::new(|_, _, _| Matrix4::zeros()))
}

/// A nonlinear variant used to exercise state-dependent fields:
/// `F0 = (1 + x3, x4, -0.1 sin x1, -0.1 sin x2)`, `F1 = e3`,
/// `F2 = (0, 0, 0.2 x3, 1)`.
pub fn builtin_pendulum_kepler() -> AffineSystem {
    let f0: FieldFn = Arc::new(|x: &State| State::new(1.0 + x[2], x[3], -0.1 * x[0].sin(), -0.1 * x[1].sin()));
    let f1: FieldFn = Arc::new(|_: &State| State::new(0.0, 0.0, 1.0, 0.0));
    let f2: FieldFn = Arc::new(|x: &State| State::new(0.0, 0.0, 0.2 * x[2], 1.0));
    let j0: JacobianFn = Arc::new(|x: &State| {
        let mut m = Matrix4::zeros();
        m[(0, 2)] = 1.0;
        m[(1, 3)] = 1.0;
        m[(2, 0)] = -0.1 * x[0].cos();
        m[(3, 1)] = -0.1 * x[1].cos();
        m
    });
    let j1: JacobianFn = Arc::new(|_: &State| Matrix4::zeros());
    let j2: JacobianFn = Arc::new(|_: &State| {
        let mut m = Matrix4::zeros();
        m[(2, 2)] = 0.2;
        m
    });
    AffineSystem::new("pendulum-kepler", [f0, f1, f2], [j0, j1, j2])
}
