//! Jacobi fields along extremals, the jump they undergo at a switch, the
//! determinant of the differential of the exponential map and the
//! second-order verdicts built on it.

use std::io::{self, Write};

use nalgebra::{Matrix4, SMatrix, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Assumption, Error, Result};
use crate::flow::{
    phase_of, run_engine, Direction, EngineConfig, Extremal, FieldMode, JumpInfo, Payload, PlainPayload, RawRun, Side,
};
use crate::hamiltonian::{
    extremal_rhs, frozen_rhs, hmax_fiber_gradient, lift_differentials, lifts, optimal_control, ExtremalPoint, Phase,
};
use crate::numerics::{bisect, hadamard_ratio, orthonormal_complement};
use crate::systems::{AffineSystem, ControlValue, FieldIndex, State};
use crate::tolerances::Tolerances;

/// 8x8 transition matrix of the linearized flow.
pub type Stm = SMatrix<f64, 8, 8>;

pub(crate) const STM_DIM: usize = 72;

type StmState = SVector<f64, STM_DIM>;

/// A Jacobi field `(dx, dp)` evaluated at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobiField {
    pub t: f64,
    pub deltaz: Phase,
}

/// Canonical symplectic form on `T*R^4`.
pub fn symplectic_form() -> Stm {
    let mut j = Stm::zeros();
    for i in 0..4 {
        j[(i, i + 4)] = 1.0;
        j[(i + 4, i)] = -1.0;
    }
    j
}

/// `|Phi^T J Phi - J|_inf`.
pub fn symplectic_defect(phi: &Stm) -> f64 {
    let j = symplectic_form();
    (phi.transpose() * j * phi - j).abs().max()
}

pub(crate) fn stm_initial(z0: &ExtremalPoint) -> StmState {
    pack(&z0.phase(), &Stm::identity())
}

fn pack(z: &Phase, phi: &Stm) -> StmState {
    let mut y = StmState::zeros();
    y.fixed_rows_mut::<8>(0).copy_from(z);
    y.fixed_rows_mut::<64>(8).copy_from_slice(phi.as_slice());
    y
}

pub(crate) fn stm_of(y: &StmState) -> Stm {
    Stm::from_column_slice(&y.as_slice()[8..])
}

/// Linearization of the frozen-control Hamiltonian field `H_u`.
fn frozen_matrix(sys: &AffineSystem, z: &ExtremalPoint, u: &ControlValue) -> Result<Stm> {
    let jf = sys.control_jacobian(&z.x, u)?;
    let hess = sys.adjoint_hessian(&z.x, &z.p, u)?;
    let mut a = Stm::zeros();
    a.fixed_view_mut::<4, 4>(0, 0).copy_from(&jf);
    a.fixed_view_mut::<4, 4>(4, 0).copy_from(&(-hess));
    a.fixed_view_mut::<4, 4>(4, 4).copy_from(&(-jf.transpose()));
    Ok(a)
}

/// Jacobian of the extremal vector field: the frozen-control part plus the
/// rank-2 term `G Du` from `du/dz = (I - u u^T) / rho [dH1; dH2]`, where the
/// columns of `G` are the Hamiltonian fields of `H1`, `H2`.
pub fn variational_matrix(sys: &AffineSystem, z: &ExtremalPoint, tol_rho: f64) -> Result<Stm> {
    let hd = lifts(sys, z)?;
    let u = optimal_control(&hd, tol_rho)?;
    let mut a = frozen_matrix(sys, z, &u)?;
    let [d1, d2] = lift_differentials(sys, z)?;
    let uv = u.as_vector();
    let proj = (nalgebra::Matrix2::identity() - uv * uv.transpose()) / hd.rho;
    let mut g = SMatrix::<f64, 8, 2>::zeros();
    for (k, i) in [FieldIndex::Control1, FieldIndex::Control2].into_iter().enumerate() {
        let f = sys.field(i, &z.x)?;
        let jt = sys.jacobian(i, &z.x)?.transpose() * z.p;
        g.fixed_view_mut::<4, 1>(0, k).copy_from(&f);
        g.fixed_view_mut::<4, 1>(4, k).copy_from(&(-jt));
    }
    let mut dh = SMatrix::<f64, 2, 8>::zeros();
    dh.set_row(0, &d1.transpose());
    dh.set_row(1, &d2.transpose());
    a += g * (proj * dh);
    Ok(a)
}

/// Central-difference Jacobian of the extremal vector field with step
/// `1e-6 (1 + |z|)`.
pub fn variational_matrix_fd(sys: &AffineSystem, z: &ExtremalPoint, tol_rho: f64) -> Result<Stm> {
    let base = z.phase();
    let h = 1e-6 * (1.0 + base.norm());
    let mut a = Stm::zeros();
    for k in 0..8 {
        let mut zp = base;
        let mut zm = base;
        zp[k] += h;
        zm[k] -= h;
        let fp = extremal_rhs(sys, &ExtremalPoint::from_phase(&zp, z.p0cost), tol_rho)?;
        let fm = extremal_rhs(sys, &ExtremalPoint::from_phase(&zm, z.p0cost), tol_rho)?;
        a.set_column(k, &((fp - fm) / (2.0 * h)));
    }
    Ok(a)
}

/// `A(z) deltaz`, the right-hand side of the Jacobi equation.
pub fn variational_rhs(sys: &AffineSystem, z: &ExtremalPoint, deltaz: &Phase, tol_rho: f64) -> Result<Phase> {
    Ok(variational_matrix(sys, z, tol_rho)? * deltaz)
}

/// Result of mapping a Jacobi field across a switch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchJump {
    pub deltaz_plus: Phase,
    pub delta_tbar: f64,
    /// Part of the variation transverse to the stable stratum.
    pub residual: f64,
}

/// Least-squares update of a Jacobi field at a switch.
pub fn switch_jump(
    deltaz_minus: &Phase,
    zdot_minus: &Phase,
    zdot_plus: &Phase,
    dh1: &Phase,
    dh2: &Phase,
    tol_transversal: f64,
) -> Result<SwitchJump> {
    let alpha = dh1.dot(zdot_minus);
    let beta = dh2.dot(zdot_minus);
    let n2 = alpha * alpha + beta * beta;
    if n2 < tol_transversal * tol_transversal {
        return Err(Error::NonTransversalCrossing { speed: n2.sqrt() });
    }
    let a = dh1.dot(deltaz_minus);
    let b = dh2.dot(deltaz_minus);
    let delta_tbar = -(alpha * a + beta * b) / n2;
    Ok(SwitchJump {
        deltaz_plus: deltaz_minus + (zdot_minus - zdot_plus) * delta_tbar,
        delta_tbar,
        residual: (beta * a - alpha * b).abs() / n2.sqrt(),
    })
}

/// Carries the transition matrix alongside the extremal.
pub(crate) struct VariationalPayload;

impl Payload<STM_DIM> for VariationalPayload {
    const CONTROLLED: usize = STM_DIM;

    fn rhs(
        &self,
        sys: &AffineSystem,
        y: &StmState,
        p0cost: f64,
        mode: FieldMode,
        sign: f64,
        tols: &Tolerances,
    ) -> Result<StmState> {
        let z = ExtremalPoint::from_phase(&phase_of(y), p0cost);
        let (zdot, a) = match mode {
            FieldMode::Generic => {
                let floor = tols.rho_floor(z.p.norm());
                let hd = lifts(sys, &z)?;
                let u = optimal_control(&hd, floor)?;
                (frozen_rhs(sys, &z, &u)?, variational_matrix(sys, &z, floor)?)
            }
            FieldMode::Frozen(u) => (frozen_rhs(sys, &z, &u)?, frozen_matrix(sys, &z, &u)?),
        };
        Ok(pack(&(zdot * sign), &(a * stm_of(y) * sign)))
    }

    fn jump(
        &self,
        sys: &AffineSystem,
        y_in: &StmState,
        p0cost: f64,
        k_in: &Phase,
        k_out: &Phase,
        tols: &Tolerances,
    ) -> Result<(StmState, JumpInfo)> {
        let z = ExtremalPoint::from_phase(&phase_of(y_in), p0cost);
        let [d1, d2] = lift_differentials(sys, &z)?;
        let phi = stm_of(y_in);
        let mut out = phi;
        let mut info = JumpInfo::default();
        for j in 0..8 {
            let col: Phase = phi.column(j).into_owned();
            let jump = switch_jump(&col, k_in, k_out, &d1, &d2, tols.tol_transversal)?;
            out.set_column(j, &jump.deltaz_plus);
            info.delta_tau.push(jump.delta_tbar);
            info.residuals.push(jump.residual);
        }
        Ok((pack(&z.phase(), &out), info))
    }

    fn after_micro_step(
        &self,
        sys: &AffineSystem,
        y: &mut StmState,
        p0cost: f64,
        h: f64,
        sign: f64,
        _tols: &Tolerances,
    ) -> Result<()> {
        let z = ExtremalPoint::from_phase(&phase_of(y), p0cost);
        let hd = lifts(sys, &z)?;
        let u = optimal_control(&hd, 0.0)?;
        let full = variational_matrix(sys, &z, 0.0)?;
        let frozen = frozen_matrix(sys, &z, &u)?;
        let phi = stm_of(y);
        let corrected = phi + (full - frozen) * phi * (h * sign);
        *y = pack(&z.phase(), &corrected);
        Ok(())
    }
}

/// An extremal together with its transition matrix.
#[derive(Debug, Clone)]
pub struct JacobiFlow {
    pub extremal: Extremal,
    raw: RawRun<STM_DIM>,
}

/// Data of the transition matrix at one switch.
#[derive(Debug, Clone)]
pub struct SwitchJacobi {
    pub t_bar: f64,
    /// Transition matrices just before and after the switch.
    pub phi_minus: Stm,
    pub phi_plus: Stm,
    /// Per-column shift of the switching time and transverse residual.
    pub delta_tbar: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Propagates the extremal from `z0` and its transition matrix over
/// `duration` in the given direction.
pub fn propagate_jacobi_dir(
    sys: &AffineSystem,
    z0: &ExtremalPoint,
    duration: f64,
    direction: Direction,
    tols: &Tolerances,
) -> Result<JacobiFlow> {
    z0.validate()?;
    let cfg = EngineConfig { origin: 0.0, sign: direction.sign(), duration, single_arc: false, always_armed: false };
    let raw = run_engine(sys, &VariationalPayload, stm_initial(z0), z0.p0cost, cfg, tols)?;
    let extremal = raw.to_extremal(sys, *z0, tols)?;
    Ok(JacobiFlow { extremal, raw })
}

/// Forward version of [`propagate_jacobi_dir`] on `[0, t_final]`.
pub fn propagate_jacobi(sys: &AffineSystem, z0: &ExtremalPoint, t_final: f64, tols: &Tolerances) -> Result<JacobiFlow> {
    propagate_jacobi_dir(sys, z0, t_final, Direction::Forward, tols)
}

impl JacobiFlow {
    /// Transition matrix at `t`; at a switching time `side` picks the limit.
    pub fn transition_matrix(&self, t: f64, side: Side) -> Stm {
        let i = self.extremal.arc_index(t, side);
        let arc = &self.raw.arcs[i];
        stm_of(&arc.eval(self.raw.sign * (t - self.raw.origin)))
    }

    pub fn switches(&self) -> Vec<SwitchJacobi> {
        self.raw
            .switches
            .iter()
            .map(|s| SwitchJacobi {
                t_bar: s.event.t_bar,
                phi_minus: stm_of(&s.y_in),
                phi_plus: stm_of(&s.y_out),
                delta_tbar: s.jump.delta_tau.iter().map(|d| self.raw.sign * d).collect(),
                residuals: s.jump.residuals.clone(),
            })
            .collect()
    }

    /// Jacobi field at `t` starting from `deltaz0`.
    pub fn field(&self, deltaz0: &Phase, t: f64, side: Side) -> JacobiField {
        JacobiField { t, deltaz: self.transition_matrix(t, side) * deltaz0 }
    }

    /// `dx/dt` at `t`, one-sided at switching times.
    pub fn xdot(&self, sys: &AffineSystem, t: f64, side: Side, tols: &Tolerances) -> Result<State> {
        let zdot = self.extremal.zdot_at_side(sys, t, side, tols)?;
        Ok(zdot.fixed_rows::<4>(0).into_owned())
    }
}

/// Transition matrix of `extremal` at `t` (left limit at a switch),
/// propagated from its initial point.
pub fn transition_matrix(sys: &AffineSystem, extremal: &Extremal, t: f64, tols: &Tolerances) -> Result<Stm> {
    let duration = (extremal.t_final() - extremal.t_start()).abs();
    let flow = propagate_jacobi_dir(sys, &extremal.z0, duration, extremal.direction, tols)?;
    Ok(flow.transition_matrix(t, Side::Left))
}

/// Three vertical directions spanning the tangent space of the stable
/// stratum inside the fiber, with the functional `c` that cuts it out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableBasis {
    pub basis: [Vector4<f64>; 3],
    /// `c(dp) = beta a(dp) - alpha b(dp)` on vertical variations.
    pub c: Vector4<f64>,
    pub c_norm: f64,
    /// Largest `|c(v_i)|` over the basis.
    pub kernel_residual: f64,
    pub t_bar: f64,
}

/// Tangent space of the fiber slice of the stable stratum (the numerical
/// transversality check of the fiber with that stratum).
pub fn fiber_stable_basis(sys: &AffineSystem, flow: &JacobiFlow, tols: &Tolerances) -> Result<StableBasis> {
    let [sw] = flow.raw.switches.as_slice() else {
        return Err(Error::Precondition(format!(
            "stable basis needs exactly one switch, extremal has {}",
            flow.raw.switches.len()
        )));
    };
    let ev = &sw.event;
    let [d1, d2] = lift_differentials(sys, &ev.z_bar)?;
    let alpha = d1.dot(&ev.zdot_minus);
    let beta = d2.dot(&ev.zdot_minus);
    let phi = stm_of(&sw.y_in);
    let mut c = Vector4::zeros();
    for i in 0..4 {
        let col: Phase = phi.column(4 + i).into_owned();
        c[i] = beta * d1.dot(&col) - alpha * d2.dot(&col);
    }
    let c_norm = c.norm();
    if c_norm < tols.tol_transversal {
        return Err(Error::AssumptionViolated { assumption: Assumption::A2, value: c_norm });
    }
    let basis = orthonormal_complement(&c);
    let kernel_residual = basis.iter().map(|v| c.dot(v).abs()).fold(0.0, f64::max);
    Ok(StableBasis { basis, c, c_norm, kernel_residual, t_bar: ev.t_bar })
}

/// Three vertical directions tangent to `{h^max(x0, .) = h^max(z0)}`.
pub fn level_slice_basis(sys: &AffineSystem, z0: &ExtremalPoint, tols: &Tolerances) -> Result<[Vector4<f64>; 3]> {
    let g = hmax_fiber_gradient(sys, z0, tols.rho_floor(z0.p.norm()))?;
    if g.norm() == 0.0 {
        return Err(Error::Precondition("h^max has a critical point on the fiber".into()));
    }
    Ok(orthonormal_complement(&g))
}

/// Which part of the time axis a profile entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileSide {
    /// At the switching time, left limit.
    Minus,
    /// At the switching time, right limit.
    Plus,
    Interior,
}

impl ProfileSide {
    fn label(self) -> &'static str {
        match self {
            ProfileSide::Minus => "-",
            ProfileSide::Plus => "+",
            ProfileSide::Interior => "interior",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub t: f64,
    pub det: f64,
    /// `det / prod |columns|`, the scale-free value used for zero tests.
    pub ratio: f64,
    pub side: ProfileSide,
    /// Set on the entry that closes a grid interval containing a sign change.
    pub conjugate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneSided {
    pub det: f64,
    pub ratio: f64,
}

/// Sampled `det M(t) = det(xdot, dx_1, dx_2, dx_3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobiProfile {
    pub basis: [Vector4<f64>; 3],
    pub epsilon: f64,
    pub t_final: f64,
    pub t_bar: Option<f64>,
    pub entries: Vec<ProfileEntry>,
    pub left: Option<OneSided>,
    pub right: Option<OneSided>,
    pub conjugate_times: Vec<f64>,
    /// Grid times where the determinant is numerically zero without
    /// changing sign.
    pub zero_times: Vec<f64>,
    pub notes: Vec<String>,
    pub tol_det: f64,
}

/// `n` evenly spaced times on `(0, t_final]`.
pub fn uniform_grid(t_final: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| t_final * k as f64 / n as f64).collect()
}

fn m_matrix(
    sys: &AffineSystem,
    flow: &JacobiFlow,
    basis: &[Vector4<f64>; 3],
    t: f64,
    side: Side,
    tols: &Tolerances,
) -> Result<Matrix4<f64>> {
    let xdot = flow.xdot(sys, t, side, tols)?;
    let phi = flow.transition_matrix(t, side);
    let xp = phi.fixed_view::<4, 4>(0, 4).into_owned();
    Ok(Matrix4::from_columns(&[xdot, xp * basis[0], xp * basis[1], xp * basis[2]]))
}

/// Samples `det M` on `grid`, skipping times at or below
/// `epsilon = epsilon_t0 * t_final`; records both limits at the switch and
/// refines sign changes by bisection.
pub fn det_m_profile(
    sys: &AffineSystem,
    flow: &JacobiFlow,
    basis: &[Vector4<f64>; 3],
    grid: &[f64],
    tols: &Tolerances,
) -> Result<JacobiProfile> {
    let t_final = flow.extremal.t_final();
    let epsilon = tols.epsilon_t0 * t_final.abs();
    let t_bar = flow.extremal.switches.first().map(|s| s.t_bar);
    let mut notes = Vec::new();
    let dropped = grid.iter().filter(|&&t| t <= epsilon).count();
    if dropped > 0 {
        notes.push(format!("{dropped} grid times at or below epsilon = {epsilon:e} excluded"));
    }
    let eval = |t: f64, side: Side| -> Result<OneSided> {
        let m = m_matrix(sys, flow, basis, t, side, tols)?;
        Ok(OneSided { det: m.determinant(), ratio: hadamard_ratio(&m) })
    };

    let mut entries = Vec::new();
    let mut times: Vec<f64> = grid.iter().copied().filter(|&t| t > epsilon && t <= t_final).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let near_bar = |t: f64| t_bar.is_some_and(|tb| (t - tb).abs() <= 1e-12 * (1.0 + tb.abs()));
    let mut left = None;
    let mut right = None;
    let mut inserted_bar = false;
    for &t in &times {
        if let Some(tb) = t_bar {
            if !inserted_bar && t >= tb {
                let l = eval(tb, Side::Left)?;
                let r = eval(tb, Side::Right)?;
                entries.push(ProfileEntry {
                    t: tb,
                    det: l.det,
                    ratio: l.ratio,
                    side: ProfileSide::Minus,
                    conjugate: false,
                });
                entries.push(ProfileEntry {
                    t: tb,
                    det: r.det,
                    ratio: r.ratio,
                    side: ProfileSide::Plus,
                    conjugate: false,
                });
                left = Some(l);
                right = Some(r);
                inserted_bar = true;
            }
        }
        if near_bar(t) {
            continue;
        }
        let v = eval(t, Side::Left)?;
        entries.push(ProfileEntry { t, det: v.det, ratio: v.ratio, side: ProfileSide::Interior, conjugate: false });
    }
    if let (Some(tb), false) = (t_bar, inserted_bar) {
        if tb > epsilon && tb <= t_final {
            let l = eval(tb, Side::Left)?;
            let r = eval(tb, Side::Right)?;
            entries.push(ProfileEntry {
                t: tb,
                det: l.det,
                ratio: l.ratio,
                side: ProfileSide::Minus,
                conjugate: false,
            });
            entries.push(ProfileEntry { t: tb, det: r.det, ratio: r.ratio, side: ProfileSide::Plus, conjugate: false });
            left = Some(l);
            right = Some(r);
        }
    }

    let is_zero = |r: f64| !(r.abs() > tols.tol_det);
    let mut conjugate_times = Vec::new();
    let mut zero_times = Vec::new();
    for e in &entries {
        if e.side == ProfileSide::Interior && is_zero(e.ratio) {
            zero_times.push(e.t);
        }
    }
    // sign changes between consecutive nonzero entries of one smooth piece;
    // the switch separates two pieces and is never compared across
    let mut start = 0;
    while start < entries.len() {
        let mut end = start + 1;
        while end < entries.len()
            && !(entries[end - 1].side == ProfileSide::Minus && entries[end].side == ProfileSide::Plus)
        {
            end += 1;
        }
        let nonzero: Vec<usize> = (start..end).filter(|&k| !is_zero(entries[k].ratio)).collect();
        for w in nonzero.windows(2) {
            let (a, b) = (entries[w[0]], entries[w[1]]);
            if a.ratio.signum() == b.ratio.signum() {
                continue;
            }
            let left_side = if a.side == ProfileSide::Plus { Side::Right } else { Side::Left };
            let root = bisect(
                |t| {
                    let s = if t == a.t { left_side } else { Side::Left };
                    eval(t, s).map(|v| v.ratio).unwrap_or(f64::NAN)
                },
                a.t,
                b.t,
                1e-10,
            );
            if let Some(r) = root {
                conjugate_times.push(r);
                entries[w[1]].conjugate = true;
            }
        }
        start = end;
    }
    if !zero_times.is_empty() {
        notes.push(format!(
            "det M numerically zero (|ratio| <= {:e}) without sign change at {} grid times",
            tols.tol_det,
            zero_times.len()
        ));
    }
    Ok(JacobiProfile {
        basis: *basis,
        epsilon,
        t_final,
        t_bar,
        entries,
        left,
        right,
        conjugate_times,
        zero_times,
        notes,
        tol_det: tols.tol_det,
    })
}

impl JacobiProfile {
    pub fn write_csv<W: Write>(&self, header: &[String], mut out: W) -> io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "t,detM,side,conj_flag")?;
        for e in &self.entries {
            writeln!(out, "{:.16e},{:.16e},{},{}", e.t, e.det, e.side.label(), u8::from(e.conjugate))?;
        }
        Ok(())
    }
}

/// Second-order verdict for an extremal with one switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Verdict {
    pub normal: bool,
    pub disconjugate: bool,
    pub same_sign: bool,
    /// Set when the verdict is not rendered at all.
    pub withheld: Option<String>,
    pub reasons: Vec<String>,
    pub conclusions: Vec<String>,
    pub conjugate_times: Vec<f64>,
    /// Grid times with a numerically zero determinant and no sign change.
    pub warnings: Vec<String>,
    pub det_left: Option<f64>,
    pub det_right: Option<f64>,
}

/// Evaluates the normality, disconjugacy and same-sign conditions on a
/// completed profile.
pub fn check_theorem3(profile: &JacobiProfile, p0cost: f64) -> Theorem3Verdict {
    let normal = p0cost < 0.0;
    let mut reasons = Vec::new();
    let mut conclusions = Vec::new();
    let nonzero = |s: &Option<OneSided>| s.is_some_and(|v| v.ratio.abs() > profile.tol_det);
    let sides_nonzero = nonzero(&profile.left) && nonzero(&profile.right);
    let product = match (profile.left, profile.right) {
        (Some(l), Some(r)) => Some(l.ratio * r.ratio),
        _ => None,
    };
    if profile.t_bar.is_none() {
        reasons.push("no switch on the extremal: one-sided determinants undefined".into());
    } else if !sides_nonzero {
        reasons.push("a one-sided determinant at the switching time vanishes".into());
    }
    if !profile.conjugate_times.is_empty() {
        reasons.push(format!("conjugate times at {:?}", profile.conjugate_times));
    }
    let disconjugate = sides_nonzero && profile.conjugate_times.is_empty();
    let same_sign = sides_nonzero && product.is_some_and(|p| p > 0.0);
    if sides_nonzero && !same_sign {
        reasons.push("one-sided determinants have opposite signs".into());
    }
    let withheld = if normal {
        None
    } else {
        reasons.push("abnormal extremal out of scope".into());
        Some("abnormal extremal out of scope".to_string())
    };
    if normal && disconjugate {
        conclusions.push("locally time-minimizing among C0-close trajectories with the same endpoints".into());
    }
    if normal && same_sign && profile.conjugate_times.is_empty() {
        conclusions.push("final time t_f(x_f) continuous and piecewise C1 near the endpoint".into());
    }
    Theorem3Verdict {
        normal,
        disconjugate,
        same_sign,
        withheld,
        reasons,
        conclusions,
        conjugate_times: profile.conjugate_times.clone(),
        warnings: profile.notes.clone(),
        det_left: profile.left.map(|v| v.det),
        det_right: profile.right.map(|v| v.det),
    }
}

/// Verdict of the conjugate-point test on a smooth extremal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothVerdict {
    pub normal: bool,
    pub first_conjugate_time: Option<f64>,
    /// End of the interval on which local optimality is asserted.
    pub optimal_until: f64,
    pub text: String,
    pub profile: JacobiProfile,
}

/// Conjugate-point test on an extremal without switches, using directions
/// tangent to the level set of `h^max` in the initial fiber and the
/// determinant `det(xdot, dx/dp0)`.
pub fn smooth_conjugate_test(
    sys: &AffineSystem,
    flow: &JacobiFlow,
    grid: &[f64],
    tols: &Tolerances,
) -> Result<SmoothVerdict> {
    if flow.extremal.switch_count() > 0 {
        return Err(Error::Precondition("smooth test requested on an extremal with a switch".into()));
    }
    let z0 = flow.extremal.z0;
    let basis = level_slice_basis(sys, &z0, tols)?;
    let profile = det_m_profile(sys, flow, &basis, grid, tols)?;
    let normal = z0.p0cost < 0.0;
    let first = profile.conjugate_times.first().copied();
    let optimal_until = first.unwrap_or(profile.t_final);
    let text = if !normal {
        "abnormal extremal out of scope".to_string()
    } else {
        match first {
            Some(tc) => {
                format!("det(xdot, dx/dp0) changes sign at t = {tc:.10}: locally optimal before this conjugate time")
            }
            None => format!(
                "det(xdot, dx/dp0) keeps its sign on (epsilon, {:.6}]: locally optimal on the whole arc",
                profile.t_final
            ),
        }
    };
    Ok(SmoothVerdict { normal, first_conjugate_time: first, optimal_until, text, profile })
}

/// Phase point reached at time `t` from `z0`, without the Jacobi payload.
pub fn flow_map(sys: &AffineSystem, z0: &ExtremalPoint, t: f64, tols: &Tolerances) -> Result<Phase> {
    let cfg = EngineConfig { origin: 0.0, sign: 1.0, duration: t, single_arc: false, always_armed: false };
    let raw = run_engine(sys, &PlainPayload, z0.phase(), z0.p0cost, cfg, tols)?;
    let arc = raw.arcs.last().expect("at least one arc");
    Ok(arc.eval(arc.tau_end))
}

/// `(dH1, dH2) . deltaz` at `z`.
pub fn lift_variation(sys: &AffineSystem, z: &ExtremalPoint, deltaz: &Phase) -> Result<Vector2<f64>> {
    let [d1, d2] = lift_differentials(sys, z)?;
    Ok(Vector2::new(d1.dot(deltaz), d2.dot(deltaz)))
}
