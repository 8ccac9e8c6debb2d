//! Hamiltonian lifts, Poisson brackets, the maximized Hamiltonian and the
//! disk-optimal control, including its one-sided limits at a contact with the
//! switching surface `Sigma = {H1 = H2 = 0}`.

use nalgebra::{SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{dynamics_rhs, lie_bracket, AffineSystem, ControlValue, FieldIndex, State};

/// A point `z = (x, p)` of the cotangent bundle, stacked as an 8-vector.
pub type Phase = SVector<f64, 8>;

/// Cotangent state with its cost multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremalPoint {
    pub x: State,
    pub p: State,
    /// `-1` for normal extremals, `0` for abnormal ones.
    pub p0cost: f64,
}

impl ExtremalPoint {
    pub fn new(x: State, p: State, p0cost: f64) -> Self {
        Self { x, p, p0cost }
    }

    pub fn normal(x: State, p: State) -> Self {
        Self::new(x, p, -1.0)
    }

    pub fn from_phase(z: &Phase, p0cost: f64) -> Self {
        Self { x: z.fixed_rows::<4>(0).into_owned(), p: z.fixed_rows::<4>(4).into_owned(), p0cost }
    }

    pub fn phase(&self) -> Phase {
        let mut z = Phase::zeros();
        z.fixed_rows_mut::<4>(0).copy_from(&self.x);
        z.fixed_rows_mut::<4>(4).copy_from(&self.p);
        z
    }

    pub fn is_normal(&self) -> bool {
        self.p0cost < 0.0
    }

    /// Entries finite, `p0cost <= 0`, and `(p, p0cost) != 0`.
    pub fn validate(&self) -> Result<()> {
        let finite = self.x.iter().chain(self.p.iter()).all(|v| v.is_finite()) && self.p0cost.is_finite();
        if !finite {
            return Err(Error::Precondition("extremal point has non-finite entries".into()));
        }
        if self.p0cost > 0.0 {
            return Err(Error::Precondition("cost multiplier must be non-positive".into()));
        }
        if self.p0cost == 0.0 && self.p.iter().all(|v| *v == 0.0) {
            return Err(Error::Precondition("adjoint and cost multiplier both vanish".into()));
        }
        Ok(())
    }
}

/// Lifts `Hi = <p, Fi>` and brackets `Hij = <p, [Fi, Fj]>` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianData {
    pub h0: f64,
    pub h1: f64,
    pub h2: f64,
    pub h01: f64,
    pub h02: f64,
    pub h12: f64,
    pub rho: f64,
}

impl HamiltonianData {
    /// `h12^2 - (h01^2 + h02^2)`: negative on Sigma-, positive on Sigma+.
    pub fn sigma_form(&self) -> f64 {
        self.h12 * self.h12 - (self.h01 * self.h01 + self.h02 * self.h02)
    }

    /// `d/dt (H1, H2)` along the flow driven by the control `u`:
    /// `(H01 - u2 H12, H02 + u1 H12)`.
    pub fn switching_rate(&self, u: &ControlValue) -> Vector2<f64> {
        Vector2::new(self.h01 - u.u2 * self.h12, self.h02 + u.u1 * self.h12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaClass {
    SigmaMinus,
    SigmaPlus,
    SigmaZero,
    NotOnSigma,
}

pub fn lifts(sys: &AffineSystem, z: &ExtremalPoint) -> Result<HamiltonianData> {
    let x = &z.x;
    let p = &z.p;
    let h1 = p.dot(&sys.f1(x)?);
    let h2 = p.dot(&sys.f2(x)?);
    Ok(HamiltonianData {
        h0: p.dot(&sys.f0(x)?),
        h1,
        h2,
        h01: p.dot(&lie_bracket(sys, FieldIndex::Drift, FieldIndex::Control1, x)?),
        h02: p.dot(&lie_bracket(sys, FieldIndex::Drift, FieldIndex::Control2, x)?),
        h12: p.dot(&lie_bracket(sys, FieldIndex::Control1, FieldIndex::Control2, x)?),
        rho: h1.hypot(h2),
    })
}

/// `H^max = H0 + sqrt(H1^2 + H2^2) + p0`.
pub fn hmax(sys: &AffineSystem, z: &ExtremalPoint) -> Result<f64> {
    let hd = lifts(sys, z)?;
    Ok(hd.h0 + hd.rho + z.p0cost)
}

/// The maximizer `(H1, H2) / rho` of `H1 u1 + H2 u2` over the disk.
pub fn optimal_control(hd: &HamiltonianData, tol_rho: f64) -> Result<ControlValue> {
    if !(hd.rho >= tol_rho) || hd.rho == 0.0 {
        return Err(Error::SingularControl { rho: hd.rho });
    }
    Ok(ControlValue::new(hd.h1 / hd.rho, hd.h2 / hd.rho))
}

pub fn classify_sigma(hd: &HamiltonianData, tol_rho: f64, tol_sigma_class: f64) -> SigmaClass {
    if hd.rho >= tol_rho {
        return SigmaClass::NotOnSigma;
    }
    let q = hd.sigma_form();
    if q < -tol_sigma_class {
        SigmaClass::SigmaMinus
    } else if q > tol_sigma_class {
        SigmaClass::SigmaPlus
    } else {
        SigmaClass::SigmaZero
    }
}

/// One-sided controls at a contact point with Sigma-.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchControls {
    pub u_minus: ControlValue,
    pub u_plus: ControlValue,
    /// `1 / sqrt(h01^2 + h02^2 - h12^2)`.
    pub lambda: f64,
}

impl SwitchControls {
    /// Largest violation of `u1 = s lambda (a - c u2)`, `u2 = s lambda (b + c u1)`
    /// with `s = +1` for `u_plus` and `s = -1` for `u_minus`.
    pub fn fixed_point_residual(&self, hd: &HamiltonianData) -> f64 {
        let (a, b, c) = (hd.h01, hd.h02, hd.h12);
        let res = |u: &ControlValue, s: f64| {
            let r1 = u.u1 - s * self.lambda * (a - c * u.u2);
            let r2 = u.u2 - s * self.lambda * (b + c * u.u1);
            r1.abs().max(r2.abs())
        };
        res(&self.u_plus, 1.0).max(res(&self.u_minus, -1.0))
    }
}

/// Incoming and outgoing controls at a Sigma- contact.
///
/// Along an extremal `d/dt (H1, H2) = (a - c u2, b + c u1)` with
/// `(a, b, c) = (h01, h02, h12)`. Leaving Sigma, `(H1, H2)` grows parallel to
/// the control; arriving, it shrinks antiparallel to it. Solving the resulting
/// 2x2 linear system with `lambda = 1 / sqrt(a^2 + b^2 - c^2)` gives
/// `u = s lambda (a - s lambda c b, b + s lambda c a) / (1 + lambda^2 c^2)`,
/// a unit vector for `s = +1` (after) and `s = -1` (before).
pub fn switch_controls(hd: &HamiltonianData) -> Result<SwitchControls> {
    let (a, b, c) = (hd.h01, hd.h02, hd.h12);
    let margin = a * a + b * b - c * c;
    if !(margin > 0.0) {
        return Err(Error::SigmaPlusEncounter { margin });
    }
    let lambda = margin.sqrt().recip();
    let side = |s: f64| {
        let l = s * lambda;
        let den = 1.0 + l * l * c * c;
        ControlValue::new(l * (a - l * c * b) / den, l * (b + l * c * a) / den)
    };
    Ok(SwitchControls { u_minus: side(-1.0), u_plus: side(1.0), lambda })
}

/// Hamiltonian vector field of `H_u = <p, F_u(x)>` for a frozen control `u`.
pub fn frozen_rhs(sys: &AffineSystem, z: &ExtremalPoint, u: &ControlValue) -> Result<Phase> {
    let xdot = dynamics_rhs(sys, &z.x, u)?;
    let pdot = -(sys.control_jacobian(&z.x, u)?.transpose() * z.p);
    let mut out = Phase::zeros();
    out.fixed_rows_mut::<4>(0).copy_from(&xdot);
    out.fixed_rows_mut::<4>(4).copy_from(&pdot);
    Ok(out)
}

/// Hamiltonian vector field of `H^max` off the switching surface.
pub fn extremal_rhs(sys: &AffineSystem, z: &ExtremalPoint, tol_rho: f64) -> Result<Phase> {
    let hd = lifts(sys, z)?;
    let u = optimal_control(&hd, tol_rho)?;
    frozen_rhs(sys, z, &u)
}

/// Differentials `dH1`, `dH2` on `T*M` as 8-covectors `(JFi^T p, Fi)`.
pub fn lift_differentials(sys: &AffineSystem, z: &ExtremalPoint) -> Result<[Phase; 2]> {
    let mut out = [Phase::zeros(); 2];
    for (k, i) in [FieldIndex::Control1, FieldIndex::Control2].into_iter().enumerate() {
        let jac = sys.jacobian(i, &z.x)?;
        out[k].fixed_rows_mut::<4>(0).copy_from(&(jac.transpose() * z.p));
        out[k].fixed_rows_mut::<4>(4).copy_from(&sys.field(i, &z.x)?);
    }
    Ok(out)
}

/// Gradient of `h^max` with respect to `p` at fixed `x`: `F_u(x)` with the
/// optimal `u`.
pub fn hmax_fiber_gradient(sys: &AffineSystem, z: &ExtremalPoint, tol_rho: f64) -> Result<State> {
    let hd = lifts(sys, z)?;
    let u = optimal_control(&hd, tol_rho)?;
    dynamics_rhs(sys, &z.x, &u)
}
