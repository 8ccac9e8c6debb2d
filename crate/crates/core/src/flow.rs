//! Integration of extremals of the maximized Hamiltonian.
//!
//! Smooth arcs are integrated with an adaptive Dormand-Prince pair. An event
//! monitor watches `rho = |(H1, H2)|`: once it drops below an arming level the
//! step is capped so that the integration either lands on the switching
//! surface (when the linearized approach predicts a contact) or resolves the
//! fast rotation of the control during a near miss. A contact is localized on
//! the dense output, the control jumps to its outgoing limit and the next arc
//! is restarted with one short frozen-control step.
//!
//! The same engine carries extra payload (the transition matrix, see
//! [`crate::jacobi`]) so that variational quantities are integrated on exactly
//! the same steps as the extremal itself.

use std::io::{self, Write};

use nalgebra::{SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{
    classify_sigma, frozen_rhs, lift_differentials, lifts, optimal_control, switch_controls, ExtremalPoint,
    HamiltonianData, Phase, SigmaClass,
};
use crate::integrator::{dopri5_step, error_norm, step_factor, DenseSegment};
use crate::numerics::{bisect, minimize_golden};
use crate::systems::{AffineSystem, ControlValue, State};
use crate::tolerances::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// Which one-sided value to take at a switching time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArcSample {
    pub t: f64,
    pub z: ExtremalPoint,
    pub u: ControlValue,
    pub rho: f64,
}

/// One smooth piece of an extremal.
#[derive(Debug, Clone)]
pub struct ExtremalArc {
    pub t_start: f64,
    pub t_end: f64,
    pub samples: Vec<ArcSample>,
    segments: Vec<DenseSegment<8>>,
    origin: f64,
    sign: f64,
    p0cost: f64,
}

impl ExtremalArc {
    fn tau(&self, t: f64) -> f64 {
        self.sign * (t - self.origin)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = (self.tau(self.t_start), self.tau(self.t_end));
        let s = self.tau(t);
        s >= a - 1e-15 * (1.0 + a.abs()) && s <= b + 1e-15 * (1.0 + b.abs())
    }

    pub(crate) fn segment_at(&self, tau: f64) -> Option<&DenseSegment<8>> {
        segment_index(&self.segments, tau).map(|i| &self.segments[i])
    }

    /// Dense-output value at `t`; the last segment is extrapolated up to the
    /// contact point when the arc ends on the switching surface.
    pub fn eval(&self, t: f64) -> ExtremalPoint {
        let tau = self.tau(t);
        match self.segment_at(tau) {
            Some(seg) => ExtremalPoint::from_phase(&seg.eval(tau), self.p0cost),
            None => self.samples[0].z,
        }
    }
}

impl ExtremalArc {
    /// `dz/dt` of the dense output.
    pub fn derivative(&self, t: f64) -> Phase {
        let tau = self.tau(t);
        match self.segment_at(tau) {
            Some(seg) => seg.eval_derivative(tau) * self.sign,
            None => Phase::zeros(),
        }
    }
}

fn segment_index<const N: usize>(segments: &[DenseSegment<N>], tau: f64) -> Option<usize> {
    if segments.is_empty() {
        return None;
    }
    let i = segments.partition_point(|s| s.t1() < tau);
    Some(i.min(segments.len() - 1))
}

/// Values of `(h01, h02, h12)` at a contact point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Brackets {
    pub h01: f64,
    pub h02: f64,
    pub h12: f64,
}

/// A crossing of the switching surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub t_bar: f64,
    pub z_bar: ExtremalPoint,
    /// rho at the localized contact point.
    pub rho_bar: f64,
    pub brackets: Brackets,
    pub sigma_class: SigmaClass,
    pub u_minus: ControlValue,
    pub u_plus: ControlValue,
    /// One-sided limits of `dz/dt` (physical time).
    pub zdot_minus: Phase,
    pub zdot_plus: Phase,
    /// One-sided slopes `d rho / dt` at the switching time.
    pub rho_slope_minus: f64,
    pub rho_slope_plus: f64,
}

/// A local minimum of rho that stayed above the switch threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearMiss {
    pub t: f64,
    pub rho_min: f64,
}

/// Outcome of [`detect_switch`].
#[derive(Debug, Clone, PartialEq)]
pub enum SwitchOutcome {
    Switch(Box<SwitchEvent>),
    NearMiss(NearMiss),
}

/// Why a single-arc integration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArcHalt {
    EndOfSpan,
    /// rho fell below the switch threshold.
    Contact,
    /// A minimum of rho below the arming level was bracketed by the last step.
    MinimumBracketed,
}

/// A smooth arc together with the reason its integration stopped.
#[derive(Debug, Clone)]
pub struct SmoothArc {
    pub arc: ExtremalArc,
    pub halt: ArcHalt,
    pub rho_min: f64,
}

/// A concatenation of smooth arcs separated by switches.
#[derive(Debug, Clone)]
pub struct Extremal {
    pub z0: ExtremalPoint,
    pub direction: Direction,
    pub arcs: Vec<ExtremalArc>,
    pub switches: Vec<SwitchEvent>,
    pub near_misses: Vec<NearMiss>,
}

impl Extremal {
    pub fn t_start(&self) -> f64 {
        self.arcs[0].t_start
    }

    pub fn t_final(&self) -> f64 {
        self.arcs.last().map(|a| a.t_end).unwrap_or(self.arcs[0].t_start)
    }

    pub fn switch_count(&self) -> usize {
        self.switches.len()
    }

    pub fn end_point(&self) -> ExtremalPoint {
        let arc = self.arcs.last().expect("extremal has at least one arc");
        arc.eval(arc.t_end)
    }

    /// Index of the arc holding `t`, resolving switching times by `side`.
    pub fn arc_index(&self, t: f64, side: Side) -> usize {
        let sign = self.direction.sign();
        let origin = self.t_start();
        let tau = sign * (t - origin);
        // in integration time the physical left side is the earlier arc only
        // when integrating forward
        let earlier =
            matches!((side, self.direction), (Side::Left, Direction::Forward) | (Side::Right, Direction::Backward));
        let slack = 1e-12 * (1.0 + tau.abs());
        let bounds = |a: &ExtremalArc| (sign * (a.t_start - origin), sign * (a.t_end - origin));
        if earlier {
            self.arcs.iter().position(|a| tau <= bounds(a).1 + slack).unwrap_or(self.arcs.len() - 1)
        } else {
            self.arcs.iter().rposition(|a| tau >= bounds(a).0 - slack).unwrap_or(0)
        }
    }

    /// State at `t`, taking the given one-sided branch at a switching time.
    pub fn z_at_side(&self, t: f64, side: Side) -> ExtremalPoint {
        self.arcs[self.arc_index(t, side)].eval(t)
    }

    pub fn z_at(&self, t: f64) -> ExtremalPoint {
        self.z_at_side(t, Side::Left)
    }

    fn switch_at(&self, t: f64) -> Option<&SwitchEvent> {
        self.switches.iter().find(|sw| (t - sw.t_bar).abs() <= 1e-12 * (1.0 + t.abs()))
    }

    /// Control in use at `t`; one-sided limits at switching times.
    pub fn control_at_side(&self, sys: &AffineSystem, t: f64, side: Side, tols: &Tolerances) -> Result<ControlValue> {
        if let Some(sw) = self.switch_at(t) {
            return Ok(match side {
                Side::Left => sw.u_minus,
                Side::Right => sw.u_plus,
            });
        }
        let z = self.z_at_side(t, side);
        let hd = lifts(sys, &z)?;
        optimal_control(&hd, tols.rho_floor(z.p.norm()))
    }

    /// `dz/dt` at `t` (physical time), one-sided at switching times.
    /// Falls back to the dense output where rho is too small to define the
    /// control pointwise.
    pub fn zdot_at_side(&self, sys: &AffineSystem, t: f64, side: Side, tols: &Tolerances) -> Result<Phase> {
        match self.control_at_side(sys, t, side, tols) {
            Ok(u) => frozen_rhs(sys, &self.z_at_side(t, side), &u),
            Err(Error::SingularControl { .. }) => Ok(self.arcs[self.arc_index(t, side)].derivative(t)),
            Err(e) => Err(e),
        }
    }

    /// Largest `|z_end - z_next_start|` over the switches, relative to `1 + |z|`.
    pub fn continuity_defect(&self) -> f64 {
        self.arcs
            .windows(2)
            .map(|w| {
                let a = w[0].eval(w[0].t_end).phase();
                let b = w[1].eval(w[1].t_start).phase();
                (a - b).norm() / (1.0 + a.norm())
            })
            .fold(0.0, f64::max)
    }

    /// Trajectory dump: one row per accepted step and one `switch` row per
    /// contact. `header` lines are written first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, sys: &AffineSystem, header: &[String], mut out: W) -> io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "t,x1,x2,x3,x4,p1,p2,p3,p4,u1,u2,rho,hmax,event")?;
        let mut row = |t: f64, z: &ExtremalPoint, u: &ControlValue, event: &str| -> io::Result<()> {
            let hd = lifts(sys, z).map_err(io::Error::other)?;
            let hm = hd.h0 + hd.rho + z.p0cost;
            write!(out, "{:.16e}", t)?;
            for v in z.x.iter().chain(z.p.iter()) {
                write!(out, ",{:.16e}", v)?;
            }
            writeln!(out, ",{:.16e},{:.16e},{:.16e},{:.16e},{}", u.u1, u.u2, hd.rho, hm, event)
        };
        for (i, arc) in self.arcs.iter().enumerate() {
            let n = arc.samples.len();
            for (k, s) in arc.samples.iter().enumerate() {
                let at_contact = (i > 0 && k == 0) || (i + 1 < self.arcs.len() && k + 1 == n);
                if at_contact {
                    continue;
                }
                row(s.t, &s.z, &s.u, "step")?;
            }
            if let Some(sw) = self.switches.get(i) {
                row(sw.t_bar, &sw.z_bar, &sw.u_plus, "switch")?;
            }
        }
        Ok(())
    }
}

/// Stratum of an initial condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratum {
    S0,
    Ss,
    Su,
    OnSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumLabel {
    pub label: Stratum,
    /// Forward switching time (for `Ss`) or backward one (negative, for `Su`).
    pub t_bar: Option<f64>,
    /// Set when switches were found in both time directions.
    pub both_directions: bool,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) enum FieldMode {
    Generic,
    Frozen(ControlValue),
}

/// Per-column data of the linear update applied at a switch.
#[derive(Debug, Clone, Default)]
pub(crate) struct JumpInfo {
    pub delta_tau: Vec<f64>,
    pub residuals: Vec<f64>,
}

/// Extra state integrated alongside the extremal.
pub(crate) trait Payload<const N: usize> {
    /// Number of leading components under step-size control.
    const CONTROLLED: usize;

    fn rhs(
        &self,
        sys: &AffineSystem,
        y: &SVector<f64, N>,
        p0cost: f64,
        mode: FieldMode,
        sign: f64,
        tols: &Tolerances,
    ) -> Result<SVector<f64, N>>;

    /// Maps the state just before a contact to the state just after it;
    /// `k_in`, `k_out` are the one-sided derivatives in integration time.
    fn jump(
        &self,
        sys: &AffineSystem,
        y_in: &SVector<f64, N>,
        p0cost: f64,
        k_in: &Phase,
        k_out: &Phase,
        tols: &Tolerances,
    ) -> Result<(SVector<f64, N>, JumpInfo)>;

    /// Correction applied after the frozen-control restart step of length `h`.
    fn after_micro_step(
        &self,
        sys: &AffineSystem,
        y: &mut SVector<f64, N>,
        p0cost: f64,
        h: f64,
        sign: f64,
        tols: &Tolerances,
    ) -> Result<()>;
}

pub(crate) struct PlainPayload;

impl Payload<8> for PlainPayload {
    const CONTROLLED: usize = 8;

    fn rhs(
        &self,
        sys: &AffineSystem,
        y: &Phase,
        p0cost: f64,
        mode: FieldMode,
        sign: f64,
        tols: &Tolerances,
    ) -> Result<Phase> {
        let z = ExtremalPoint::from_phase(y, p0cost);
        let f = match mode {
            FieldMode::Generic => {
                let hd = lifts(sys, &z)?;
                let u = optimal_control(&hd, tols.rho_floor(z.p.norm()))?;
                frozen_rhs(sys, &z, &u)?
            }
            FieldMode::Frozen(u) => frozen_rhs(sys, &z, &u)?,
        };
        Ok(f * sign)
    }

    fn jump(
        &self,
        _: &AffineSystem,
        y_in: &Phase,
        _: f64,
        _: &Phase,
        _: &Phase,
        _: &Tolerances,
    ) -> Result<(Phase, JumpInfo)> {
        Ok((*y_in, JumpInfo::default()))
    }

    fn after_micro_step(&self, _: &AffineSystem, _: &mut Phase, _: f64, _: f64, _: f64, _: &Tolerances) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn phase_of<const N: usize>(y: &SVector<f64, N>) -> Phase {
    y.fixed_rows::<8>(0).into_owned()
}

#[derive(Debug, Clone)]
pub(crate) struct RawArc<const N: usize> {
    pub tau_start: f64,
    pub tau_end: f64,
    pub segments: Vec<DenseSegment<N>>,
    pub states: Vec<(f64, SVector<f64, N>)>,
    pub start_control: Option<ControlValue>,
    pub end_control: Option<ControlValue>,
}

impl<const N: usize> RawArc<N> {
    fn new(tau: f64, y: SVector<f64, N>, start_control: Option<ControlValue>) -> Self {
        Self {
            tau_start: tau,
            tau_end: tau,
            segments: Vec::new(),
            states: vec![(tau, y)],
            start_control,
            end_control: None,
        }
    }

    pub fn eval(&self, tau: f64) -> SVector<f64, N> {
        match segment_index(&self.segments, tau) {
            Some(i) => self.segments[i].eval(tau),
            None => self.states[0].1,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RawSwitch<const N: usize> {
    pub y_in: SVector<f64, N>,
    pub y_out: SVector<f64, N>,
    pub event: SwitchEvent,
    pub jump: JumpInfo,
}

#[derive(Debug, Clone)]
pub(crate) struct RawRun<const N: usize> {
    pub arcs: Vec<RawArc<N>>,
    pub switches: Vec<RawSwitch<N>>,
    pub near_misses: Vec<NearMiss>,
    pub halt: ArcHalt,
    pub rho_min: f64,
    pub sign: f64,
    pub origin: f64,
    pub p0cost: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EngineConfig {
    pub origin: f64,
    pub sign: f64,
    pub duration: f64,
    /// Stop at the first event instead of resolving it.
    pub single_arc: bool,
    /// Fire the minimum event at any rho, not only below the arming level.
    pub always_armed: bool,
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    rho: f64,
    h: Vector2<f64>,
    /// d/dtau (H1, H2)
    w: Vector2<f64>,
    p_norm: f64,
}

impl Probe {
    fn at(sys: &AffineSystem, z: &ExtremalPoint, kz: &Phase) -> Result<Self> {
        let hd = lifts(sys, z)?;
        let [d1, d2] = lift_differentials(sys, z)?;
        Ok(Self {
            rho: hd.rho,
            h: Vector2::new(hd.h1, hd.h2),
            w: Vector2::new(d1.dot(kz), d2.dot(kz)),
            p_norm: z.p.norm(),
        })
    }

    /// d(rho^2)/dtau
    fn g(&self) -> f64 {
        2.0 * self.h.dot(&self.w)
    }

    /// Time to and distance of the closest approach of the linearized path.
    fn linear_approach(&self) -> Option<(f64, f64)> {
        let w2 = self.w.norm_squared();
        if w2 == 0.0 {
            return None;
        }
        let s = -self.h.dot(&self.w) / w2;
        Some((s, (self.h + self.w * s).norm()))
    }
}

struct Cursor<const N: usize> {
    tau: f64,
    y: SVector<f64, N>,
    k1: SVector<f64, N>,
    h: f64,
    probe: Probe,
}

struct Engine<'a, const N: usize, P: Payload<N>> {
    sys: &'a AffineSystem,
    payload: &'a P,
    p0cost: f64,
    cfg: EngineConfig,
    tols: &'a Tolerances,
    steps: usize,
    rho_min: f64,
}

impl<'a, const N: usize, P: Payload<N>> Engine<'a, N, P> {
    fn rhs(&self, y: &SVector<f64, N>, mode: FieldMode) -> Result<SVector<f64, N>> {
        self.payload.rhs(self.sys, y, self.p0cost, mode, self.cfg.sign, self.tols)
    }

    fn point(&self, y: &SVector<f64, N>) -> ExtremalPoint {
        ExtremalPoint::from_phase(&phase_of(y), self.p0cost)
    }

    fn t_of(&self, tau: f64) -> f64 {
        self.cfg.origin + self.cfg.sign * tau
    }

    /// Integrates until the end of the span or an event of the monitor.
    fn advance(&mut self, arc: &mut RawArc<N>, cur: &mut Cursor<N>) -> Result<ArcHalt> {
        let tau_end = self.cfg.duration;
        loop {
            if cur.tau >= tau_end {
                return Ok(ArcHalt::EndOfSpan);
            }
            self.steps += 1;
            if self.steps > self.tols.max_steps {
                return Err(Error::TooManySteps { t: self.t_of(cur.tau), max_steps: self.tols.max_steps });
            }
            let remaining = tau_end - cur.tau;
            let mut h = cur.h.min(remaining);
            let arm = self.tols.arm_rho(cur.probe.p_norm);
            let switch_rho = self.tols.switch_rho(cur.probe.p_norm);
            if cur.probe.rho < arm {
                if let Some((s, miss)) = cur.probe.linear_approach() {
                    if miss <= switch_rho {
                        if s > 0.0 {
                            h = h.min(0.8 * s);
                        }
                    } else {
                        h = h.min(0.1 * cur.probe.rho / cur.probe.w.norm());
                    }
                }
            }
            // avoid leaving a sliver at the end of the span
            if remaining - h < 1e-3 * h {
                h = remaining;
            }
            let h_floor = self.tols.h_min * (1.0 + cur.tau.abs());
            if h < h_floor {
                return Err(Error::StepSizeUnderflow { t: self.t_of(cur.tau), h, rho_min: self.rho_min });
            }
            let mut f = |y: &SVector<f64, N>| self.rhs(y, FieldMode::Generic);
            let step = match dopri5_step(&mut f, cur.tau, &cur.y, &cur.k1, h) {
                Ok(s) => s,
                Err(Error::SingularControl { .. }) => {
                    cur.h = 0.25 * h;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let err = error_norm(&step.error, &cur.y, &step.y1, P::CONTROLLED, self.tols.tol_int, self.tols.tol_int);
            if !(err <= 1.0) {
                cur.h = if err.is_finite() { h * step_factor(err).min(0.9) } else { 0.25 * h };
                continue;
            }
            let z1 = self.point(&step.y1);
            let probe = Probe::at(self.sys, &z1, &phase_of(&step.k7))?;
            let tau1 = if h == remaining { tau_end } else { cur.tau + h };
            let g0 = cur.probe.g();
            let rho0 = cur.probe.rho;
            arc.segments.push(step.dense);
            arc.states.push((tau1, step.y1));
            arc.tau_end = tau1;
            cur.tau = tau1;
            cur.y = step.y1;
            cur.k1 = step.k7;
            cur.h = h * step_factor(err);
            cur.probe = probe;
            self.rho_min = self.rho_min.min(probe.rho);
            if probe.rho < self.tols.switch_rho(probe.p_norm) {
                return Ok(ArcHalt::Contact);
            }
            let armed = self.cfg.always_armed || rho0.min(probe.rho) < self.tols.arm_rho(probe.p_norm);
            if armed && g0 < 0.0 && probe.g() >= 0.0 {
                return Ok(ArcHalt::MinimumBracketed);
            }
        }
    }

    fn run(mut self, y0: SVector<f64, N>) -> Result<RawRun<N>> {
        let z0 = self.point(&y0);
        let hd0 = lifts(self.sys, &z0)?;
        if hd0.rho < self.tols.rho_floor(z0.p.norm()) {
            return Err(Error::SingularControl { rho: hd0.rho });
        }
        let mut arcs = Vec::new();
        let mut switches = Vec::new();
        let mut near_misses = Vec::new();
        let mut arc = RawArc::new(0.0, y0, None);
        if self.cfg.duration <= 0.0 {
            arcs.push(arc);
            return Ok(self.finish(arcs, switches, near_misses, ArcHalt::EndOfSpan));
        }
        let k1 = self.rhs(&y0, FieldMode::Generic)?;
        let probe = Probe::at(self.sys, &z0, &phase_of(&k1))?;
        self.rho_min = probe.rho;
        let mut cur = Cursor { tau: 0.0, y: y0, k1, h: self.cfg.duration.min(1e-2), probe };
        loop {
            let halt = self.advance(&mut arc, &mut cur)?;
            if halt == ArcHalt::EndOfSpan {
                arcs.push(arc);
                return Ok(self.finish(arcs, switches, near_misses, halt));
            }
            if self.cfg.single_arc {
                arcs.push(arc);
                return Ok(self.finish(arcs, switches, near_misses, halt));
            }
            let seg = arc.segments.last().expect("an event follows an accepted step").clone();
            let (tau_c, y_c) = localize_contact(self.sys, &seg, &cur.probe, self.p0cost, self.tols);
            let z_c = self.point(&y_c);
            let rho_c = lifts(self.sys, &z_c)?.rho;
            if rho_c > self.tols.switch_rho(z_c.p.norm()) {
                near_misses.push(NearMiss { t: self.t_of(tau_c), rho_min: rho_c });
                continue;
            }
            let event = build_switch(self.sys, &z_c, self.t_of(tau_c), self.tols)?;
            let sign = self.cfg.sign;
            let (u_in, u_out, k_in, k_out) = if sign > 0.0 {
                (event.u_minus, event.u_plus, event.zdot_minus, event.zdot_plus)
            } else {
                (event.u_plus, event.u_minus, -event.zdot_plus, -event.zdot_minus)
            };
            let (y_out, info) = self.payload.jump(self.sys, &y_c, self.p0cost, &k_in, &k_out, self.tols)?;
            arc.tau_end = tau_c;
            arc.end_control = Some(u_in);
            arcs.push(arc);
            switches.push(RawSwitch { y_in: y_c, y_out, event, jump: info });

            // restart with one frozen-control step
            arc = RawArc::new(tau_c, y_out, Some(u_out));
            let h_mu = (self.tols.micro_step * (1.0 + event.t_bar.abs())).min(self.cfg.duration - tau_c);
            if h_mu <= 0.0 {
                arcs.push(arc);
                return Ok(self.finish(arcs, switches, near_misses, ArcHalt::EndOfSpan));
            }
            let mode = FieldMode::Frozen(u_out);
            let k_frozen = self.rhs(&y_out, mode)?;
            let mut f = |y: &SVector<f64, N>| self.rhs(y, mode);
            let step = dopri5_step(&mut f, tau_c, &y_out, &k_frozen, h_mu)?;
            let mut y1 = step.y1;
            self.payload.after_micro_step(self.sys, &mut y1, self.p0cost, h_mu, sign, self.tols)?;
            let tau1 = if tau_c + h_mu >= self.cfg.duration { self.cfg.duration } else { tau_c + h_mu };
            arc.segments.push(DenseSegment::linear(tau_c, tau1 - tau_c, y_out, y1));
            arc.states.push((tau1, y1));
            arc.tau_end = tau1;
            let k1 = self.rhs(&y1, FieldMode::Generic)?;
            let probe = Probe::at(self.sys, &self.point(&y1), &phase_of(&k1))?;
            cur = Cursor { tau: tau1, y: y1, k1, h: 10.0 * h_mu, probe };
        }
    }

    fn finish(
        self,
        arcs: Vec<RawArc<N>>,
        switches: Vec<RawSwitch<N>>,
        near_misses: Vec<NearMiss>,
        halt: ArcHalt,
    ) -> RawRun<N> {
        RawRun {
            arcs,
            switches,
            near_misses,
            halt,
            rho_min: self.rho_min,
            sign: self.cfg.sign,
            origin: self.cfg.origin,
            p0cost: self.p0cost,
        }
    }
}

/// Minimizes rho^2 along the dense output of the last step, extended past its
/// end when the path is still approaching the switching surface.
fn localize_contact<const N: usize>(
    sys: &AffineSystem,
    seg: &DenseSegment<N>,
    end_probe: &Probe,
    p0cost: f64,
    tols: &Tolerances,
) -> (f64, SVector<f64, N>) {
    let mut b = seg.t1();
    if end_probe.g() < 0.0 {
        if let Some((s, _)) = end_probe.linear_approach() {
            b += 2.0 * s.max(0.0);
        }
    }
    let rho2 = |tau: f64| {
        let z = ExtremalPoint::from_phase(&phase_of(&seg.eval(tau)), p0cost);
        lifts(sys, &z).map(|hd| hd.h1 * hd.h1 + hd.h2 * hd.h2).unwrap_or(f64::INFINITY)
    };
    let _ = tols;
    let (tau_c, _) = minimize_golden(rho2, seg.t0, b, 1e-12 * (1.0 + b.abs()));
    (tau_c, seg.eval(tau_c))
}

/// Classifies a contact point and computes the one-sided data of the switch.
pub(crate) fn build_switch(
    sys: &AffineSystem,
    z: &ExtremalPoint,
    t_bar: f64,
    tols: &Tolerances,
) -> Result<SwitchEvent> {
    let hd = lifts(sys, z)?;
    let on_sigma = tols.switch_rho(z.p.norm()) * (1.0 + 1e-9);
    let class = classify_sigma(&hd, on_sigma, tols.tol_sigma_class);
    match class {
        SigmaClass::SigmaMinus => {}
        SigmaClass::SigmaPlus => return Err(Error::SigmaPlusEncounter { margin: -hd.sigma_form() }),
        SigmaClass::SigmaZero => {
            return Err(Error::NonTransversalCrossing { speed: (-hd.sigma_form()).max(0.0).sqrt() })
        }
        SigmaClass::NotOnSigma => {
            return Err(Error::Precondition(format!("contact point is off Sigma (rho = {:e})", hd.rho)))
        }
    }
    let sc = switch_controls(&hd)?;
    let v_minus = hd.switching_rate(&sc.u_minus);
    let v_plus = hd.switching_rate(&sc.u_plus);
    let speed = v_minus.norm().min(v_plus.norm());
    if speed < tols.tol_transversal {
        return Err(Error::NonTransversalCrossing { speed });
    }
    Ok(SwitchEvent {
        t_bar,
        z_bar: *z,
        rho_bar: hd.rho,
        brackets: Brackets { h01: hd.h01, h02: hd.h02, h12: hd.h12 },
        sigma_class: class,
        u_minus: sc.u_minus,
        u_plus: sc.u_plus,
        zdot_minus: frozen_rhs(sys, z, &sc.u_minus)?,
        zdot_plus: frozen_rhs(sys, z, &sc.u_plus)?,
        rho_slope_minus: -v_minus.norm(),
        rho_slope_plus: v_plus.norm(),
    })
}

pub(crate) fn run_engine<const N: usize, P: Payload<N>>(
    sys: &AffineSystem,
    payload: &P,
    y0: SVector<f64, N>,
    p0cost: f64,
    cfg: EngineConfig,
    tols: &Tolerances,
) -> Result<RawRun<N>> {
    if !(cfg.duration.is_finite() && cfg.duration >= 0.0) {
        return Err(Error::Precondition(format!(
            "integration length must be finite and non-negative, got {}",
            cfg.duration
        )));
    }
    let engine = Engine { sys, payload, p0cost, cfg, tols, steps: 0, rho_min: f64::INFINITY };
    engine.run(y0)
}

impl<const N: usize> RawRun<N> {
    pub fn t_of(&self, tau: f64) -> f64 {
        self.origin + self.sign * tau
    }

    pub(crate) fn to_extremal(&self, sys: &AffineSystem, z0: ExtremalPoint, tols: &Tolerances) -> Result<Extremal> {
        let mut arcs = Vec::with_capacity(self.arcs.len());
        for raw in &self.arcs {
            let mut samples = Vec::with_capacity(raw.states.len() + 1);
            let last = raw.states.len() - 1;
            for (k, (tau, y)) in raw.states.iter().enumerate() {
                let z = ExtremalPoint::from_phase(&phase_of(y), self.p0cost);
                let hd = lifts(sys, &z)?;
                let u = match (k, raw.start_control) {
                    (0, Some(u)) => u,
                    _ => sample_control(&hd, &z, tols, if k == last { raw.end_control } else { None })?,
                };
                samples.push(ArcSample { t: self.t_of(*tau), z, u, rho: hd.rho });
            }
            let last_tau = raw.states[last].0;
            if raw.tau_end != last_tau {
                let z = ExtremalPoint::from_phase(&phase_of(&raw.eval(raw.tau_end)), self.p0cost);
                let hd = lifts(sys, &z)?;
                let u = match raw.end_control {
                    Some(u) => u,
                    None => sample_control(&hd, &z, tols, None)?,
                };
                if raw.tau_end > last_tau {
                    samples.push(ArcSample { t: self.t_of(raw.tau_end), z, u, rho: hd.rho });
                } else {
                    // the contact lies inside the last accepted step
                    samples.pop();
                    samples.push(ArcSample { t: self.t_of(raw.tau_end), z, u, rho: hd.rho });
                }
            }
            arcs.push(ExtremalArc {
                t_start: self.t_of(raw.tau_start),
                t_end: self.t_of(raw.tau_end),
                samples,
                segments: raw.segments.iter().map(|s| s.map(phase_of)).collect(),
                origin: self.origin,
                sign: self.sign,
                p0cost: self.p0cost,
            });
        }
        Ok(Extremal {
            z0,
            direction: if self.sign > 0.0 { Direction::Forward } else { Direction::Backward },
            arcs,
            switches: self.switches.iter().map(|s| s.event).collect(),
            near_misses: self.near_misses.clone(),
        })
    }
}

fn sample_control(
    hd: &HamiltonianData,
    z: &ExtremalPoint,
    tols: &Tolerances,
    fallback: Option<ControlValue>,
) -> Result<ControlValue> {
    match optimal_control(hd, tols.rho_floor(z.p.norm())) {
        Ok(u) => Ok(u),
        Err(e) => fallback.ok_or(e),
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Integrates one smooth arc over `t_span`, stopping early when the event
/// monitor fires. A span with `t1 < t0` is integrated backward.
pub fn integrate_smooth_arc(
    sys: &AffineSystem,
    z0: &ExtremalPoint,
    t_span: (f64, f64),
    tols: &Tolerances,
) -> Result<SmoothArc> {
    z0.validate()?;
    let (t0, t1) = t_span;
    let cfg = EngineConfig {
        origin: t0,
        sign: if t1 >= t0 { 1.0 } else { -1.0 },
        duration: (t1 - t0).abs(),
        single_arc: true,
        always_armed: false,
    };
    let raw = run_engine(sys, &PlainPayload, z0.phase(), z0.p0cost, cfg, tols)?;
    let halt = raw.halt;
    let rho_min = raw.rho_min.min(lifts(sys, z0)?.rho);
    let mut ext = raw.to_extremal(sys, *z0, tols)?;
    Ok(SmoothArc { arc: ext.arcs.remove(0), halt, rho_min })
}

/// Localizes the contact announced by the event monitor at the end of `arc`.
pub fn detect_switch(sys: &AffineSystem, arc: &SmoothArc, tols: &Tolerances) -> Result<SwitchOutcome> {
    let samples = &arc.arc.samples;
    if arc.halt == ArcHalt::EndOfSpan || arc.arc.segments.is_empty() {
        let best = samples.iter().min_by(|a, b| a.rho.total_cmp(&b.rho)).expect("arc has samples");
        return Ok(SwitchOutcome::NearMiss(NearMiss { t: best.t, rho_min: best.rho }));
    }
    let seg = arc.arc.segments.last().expect("checked above");
    let end = samples.last().expect("arc has samples");
    let sign = arc.arc.sign;
    let kz = frozen_rhs(sys, &end.z, &end.u)? * sign;
    let probe = Probe::at(sys, &end.z, &kz)?;
    let (tau_c, y_c) = localize_contact(sys, seg, &probe, end.z.p0cost, tols);
    let z_c = ExtremalPoint::from_phase(&y_c, end.z.p0cost);
    let rho_c = lifts(sys, &z_c)?.rho;
    let t_c = arc.arc.origin + sign * tau_c;
    if rho_c > tols.switch_rho(z_c.p.norm()) {
        return Ok(SwitchOutcome::NearMiss(NearMiss { t: t_c, rho_min: rho_c }));
    }
    Ok(SwitchOutcome::Switch(Box::new(build_switch(sys, &z_c, t_c, tols)?)))
}

/// Extremal from `z0` over `[0, t_final]`, switching at every Sigma- contact.
pub fn propagate_extremal(sys: &AffineSystem, z0: &ExtremalPoint, t_final: f64, tols: &Tolerances) -> Result<Extremal> {
    propagate_extremal_dir(sys, z0, t_final, Direction::Forward, tols)
}

/// Like [`propagate_extremal`], in either time direction. Backward runs use
/// the negated vector field and report physical (negative) times.
pub fn propagate_extremal_dir(
    sys: &AffineSystem,
    z0: &ExtremalPoint,
    duration: f64,
    direction: Direction,
    tols: &Tolerances,
) -> Result<Extremal> {
    z0.validate()?;
    let cfg = EngineConfig { origin: 0.0, sign: direction.sign(), duration, single_arc: false, always_armed: false };
    run_engine(sys, &PlainPayload, z0.phase(), z0.p0cost, cfg, tols)?.to_extremal(sys, *z0, tols)
}

/// Stratum of `z0`: forward switch within `horizon` gives `Ss`, backward
/// switch gives `Su`, neither gives `S0`.
pub fn stratum_of(sys: &AffineSystem, z0: &ExtremalPoint, horizon: f64, tols: &Tolerances) -> Result<StratumLabel> {
    let hd = lifts(sys, z0)?;
    if hd.rho < tols.rho_floor(z0.p.norm()) {
        return Ok(StratumLabel { label: Stratum::OnSigma, t_bar: None, both_directions: false });
    }
    let fwd = propagate_extremal_dir(sys, z0, horizon, Direction::Forward, tols)?;
    let bwd = propagate_extremal_dir(sys, z0, horizon, Direction::Backward, tols)?;
    let f = fwd.switches.first().map(|s| s.t_bar);
    let b = bwd.switches.first().map(|s| s.t_bar);
    Ok(match (f, b) {
        (Some(t), other) => StratumLabel { label: Stratum::Ss, t_bar: Some(t), both_directions: other.is_some() },
        (None, Some(t)) => StratumLabel { label: Stratum::Su, t_bar: Some(t), both_directions: false },
        (None, None) => StratumLabel { label: Stratum::S0, t_bar: None, both_directions: false },
    })
}

/// How [`project_to_stable_manifold`] found its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionMethod {
    Newton,
    Bisection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableProjection {
    pub z0: ExtremalPoint,
    pub mu: f64,
    /// |(H1, H2)| at the contact.
    pub residual: f64,
    pub t_bar: f64,
    pub iterations: usize,
    pub method: ProjectionMethod,
}

/// Closest approach of the extremal from `z0` to Sigma and the signed miss
/// distance with its derivative along `direction`.
#[derive(Debug, Clone, Copy)]
struct Approach {
    t: f64,
    miss: f64,
    dmiss: f64,
    rho: f64,
}

fn closest_approach(
    sys: &AffineSystem,
    z0: &ExtremalPoint,
    direction: &Vector4<f64>,
    horizon: f64,
    tols: &Tolerances,
) -> Result<Option<Approach>> {
    use crate::jacobi::{stm_initial, VariationalPayload, STM_DIM};
    let cfg = EngineConfig { origin: 0.0, sign: 1.0, duration: horizon, single_arc: true, always_armed: true };
    let raw = run_engine::<STM_DIM, _>(sys, &VariationalPayload, stm_initial(z0), z0.p0cost, cfg, tols)?;
    if raw.halt == ArcHalt::EndOfSpan {
        return Ok(None);
    }
    let arc = &raw.arcs[0];
    let seg = arc.segments.last().expect("event after a step").clone();
    let (_, y_end) = arc.states.last().expect("states");
    let z_end = ExtremalPoint::from_phase(&phase_of(y_end), z0.p0cost);
    let hd_end = lifts(sys, &z_end)?;
    let u_end = optimal_control(&hd_end, 0.0)?;
    let probe = Probe::at(sys, &z_end, &frozen_rhs(sys, &z_end, &u_end)?)?;
    let (tau_c, y_c) = localize_contact(sys, &seg, &probe, z0.p0cost, tols);
    let z_c = ExtremalPoint::from_phase(&phase_of(&y_c), z0.p0cost);
    let hd = lifts(sys, &z_c)?;
    let [d1, d2] = lift_differentials(sys, &z_c)?;
    let zdot = phase_of(&seg.eval_derivative(tau_c));
    let w = Vector2::new(d1.dot(&zdot), d2.dot(&zdot));
    if w.norm() == 0.0 {
        return Ok(None);
    }
    let e_perp = Vector2::new(-w[1], w[0]) / w.norm();
    let phi = crate::jacobi::stm_of(&y_c);
    let dz = phi.fixed_view::<8, 4>(0, 4) * direction;
    let dh = Vector2::new(d1.dot(&dz), d2.dot(&dz));
    Ok(Some(Approach {
        t: raw.t_of(tau_c),
        miss: e_perp.dot(&Vector2::new(hd.h1, hd.h2)),
        dmiss: e_perp.dot(&dh),
        rho: hd.rho,
    }))
}

/// Closest approach of an extremal to the switching surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedMiss {
    pub t: f64,
    /// Component of `(H1, H2)` normal to its velocity at the closest
    /// approach; changes sign across the stable stratum.
    pub miss: f64,
    pub rho: f64,
}

/// First local minimum of rho along the extremal from `z0` within
/// `horizon`, with its signed miss distance. `None` when rho has no
/// interior minimum on the span.
pub fn signed_miss(
    sys: &AffineSystem,
    z0: &ExtremalPoint,
    horizon: f64,
    tols: &Tolerances,
) -> Result<Option<SignedMiss>> {
    z0.validate()?;
    Ok(closest_approach(sys, z0, &Vector4::zeros(), horizon, tols)?.map(|a| SignedMiss {
        t: a.t,
        miss: a.miss,
        rho: a.rho,
    }))
}

/// Moves `z0_guess` along the covector `direction` onto the stable stratum:
/// finds `mu` such that the extremal from `z0_guess + mu (0, direction)`
/// reaches `H1 = H2 = 0`. Newton on the signed miss distance, with
/// derivatives from Jacobi fields, then bisection as a fallback.
pub fn project_to_stable_manifold(
    sys: &AffineSystem,
    z0_guess: &ExtremalPoint,
    direction: &Vector4<f64>,
    horizon: f64,
    tols: &Tolerances,
) -> Result<StableProjection> {
    z0_guess.validate()?;
    if direction.norm() == 0.0 {
        return Err(Error::Precondition("projection direction vanishes".into()));
    }
    let at = |mu: f64| ExtremalPoint::new(z0_guess.x, z0_guess.p + direction * mu, z0_guess.p0cost);
    let target = |z: &ExtremalPoint| 1e-11 * (1.0 + z.p.norm());
    let finish = |mu: f64, iterations: usize, method: ProjectionMethod| -> Result<StableProjection> {
        let z = at(mu);
        let ap = closest_approach(sys, &z, direction, horizon, tols)?
            .ok_or(Error::NewtonDivergence { iterations, residual: f64::INFINITY })?;
        let limit = 1e-10 * (1.0 + z.p.norm());
        if ap.rho > limit {
            return Err(Error::NewtonDivergence { iterations, residual: ap.rho });
        }
        Ok(StableProjection { z0: z, mu, residual: ap.rho, t_bar: ap.t, iterations, method })
    };

    let mut mu = 0.0;
    let mut last_residual = f64::INFINITY;
    for it in 0..tols.newton_max_iter {
        let Some(ap) = closest_approach(sys, &at(mu), direction, horizon, tols)? else {
            break;
        };
        last_residual = ap.miss.abs();
        if ap.miss.abs() <= target(&at(mu)) {
            return finish(mu, it, ProjectionMethod::Newton);
        }
        if !(ap.dmiss.abs() > 1e-14) {
            break;
        }
        let next = mu - ap.miss / ap.dmiss;
        if !next.is_finite() {
            break;
        }
        mu = next;
    }

    // bisection on the signed miss distance over an expanding bracket
    let miss_at = |mu: f64| -> Option<f64> {
        closest_approach(sys, &at(mu), direction, horizon, tols).ok().flatten().map(|a| a.miss)
    };
    let Some(m0) = miss_at(0.0) else {
        return Err(Error::NewtonDivergence { iterations: tols.newton_max_iter, residual: last_residual });
    };
    let mut bracket = None;
    'search: for k in 0..12 {
        let r = 0.01 * 2f64.powi(k);
        for cand in [r, -r] {
            if let Some(m) = miss_at(cand) {
                if m.signum() != m0.signum() {
                    bracket = Some((0.0, cand));
                    break 'search;
                }
            }
        }
    }
    let Some((a, b)): Option<(f64, f64)> = bracket else {
        return Err(Error::NewtonDivergence { iterations: tols.newton_max_iter, residual: last_residual });
    };
    let root = bisect(|m| miss_at(m).unwrap_or(f64::NAN), a.min(b), a.max(b), 1e-15)
        .ok_or(Error::NewtonDivergence { iterations: tols.newton_max_iter, residual: last_residual })?;
    finish(root, tols.newton_max_iter, ProjectionMethod::Bisection)
}

/// Solution of the affine adjoint equation of the nilpotent Kepler system,
/// used as a closed-form reference in tests and diagnostics.
pub fn kepler_adjoint(p0: &State, t: f64) -> State {
    State::new(p0[0], p0[1], p0[2] - p0[0] * t, p0[3] - p0[1] * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{builtin_nilpotent_kepler, builtin_pendulum_kepler};

    fn kepler() -> AffineSystem {
        builtin_nilpotent_kepler()
    }

    fn reference() -> ExtremalPoint {
        ExtremalPoint::normal(State::zeros(), State::new(-1.0, 0.0, -2.0, 0.0))
    }

    /// Closed-form state of the reference extremal.
    fn reference_x(t: f64) -> State {
        if t <= 2.0 {
            State::new(t - 0.5 * t * t, 0.0, -t, 0.0)
        } else {
            let s = t - 2.0;
            State::new(-s + 0.5 * s * s, 0.0, -2.0 + s, 0.0)
        }
    }

    #[test]
    fn reference_matches_closed_form() {
        let tols = Tolerances::default();
        let ext = propagate_extremal(&kepler(), &reference(), 4.0, &tols).unwrap();
        let p0 = reference().p;
        let mut worst: f64 = 0.0;
        for arc in &ext.arcs {
            for s in &arc.samples {
                worst = worst.max((s.z.p - kepler_adjoint(&p0, s.t)).abs().max());
                worst = worst.max((s.z.x - reference_x(s.t)).abs().max());
            }
        }
        assert!(worst < 1e-9, "{worst}");
        assert!(ext.end_point().x.norm() < 1e-9);
        assert!(ext.continuity_defect() < 1e-10);
    }

    #[test]
    fn reference_switch_data() {
        let tols = Tolerances::default();
        let ext = propagate_extremal(&kepler(), &reference(), 4.0, &tols).unwrap();
        assert_eq!(ext.switch_count(), 1);
        let sw = &ext.switches[0];
        assert!((sw.t_bar - 2.0).abs() < 1e-9, "{}", sw.t_bar);
        assert!((sw.u_minus.u1 + 1.0).abs() < 1e-8 && sw.u_minus.u2.abs() < 1e-8);
        assert!((sw.u_plus.u1 - 1.0).abs() < 1e-8 && sw.u_plus.u2.abs() < 1e-8);
        assert_eq!(sw.sigma_class, SigmaClass::SigmaMinus);
        assert!((sw.brackets.h01 - 1.0).abs() < 1e-12);
        assert!(sw.brackets.h02.abs() < 1e-12 && sw.brackets.h12.abs() < 1e-12);
        assert!((sw.rho_slope_minus + 1.0).abs() < 1e-8);
        assert!((sw.rho_slope_plus - 1.0).abs() < 1e-8);
    }

    #[test]
    fn smooth_arc_stops_at_contact() {
        let tols = Tolerances::default();
        let arc = integrate_smooth_arc(&kepler(), &reference(), (0.0, 4.0), &tols).unwrap();
        assert_ne!(arc.halt, ArcHalt::EndOfSpan);
        match detect_switch(&kepler(), &arc, &tols).unwrap() {
            SwitchOutcome::Switch(sw) => assert!((sw.t_bar - 2.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        for s in &arc.arc.samples[..arc.arc.samples.len() - 1] {
            assert!(s.rho > 0.0);
        }
    }

    #[test]
    fn near_miss_is_reported() {
        let tols = Tolerances::default();
        let z = ExtremalPoint::normal(State::zeros(), State::new(-1.0, 0.0, -2.0, 1e-4));
        let arc = integrate_smooth_arc(&kepler(), &z, (0.0, 4.0), &tols).unwrap();
        match detect_switch(&kepler(), &arc, &tols).unwrap() {
            SwitchOutcome::NearMiss(nm) => {
                assert!((nm.t - 2.0).abs() < 1e-6, "{}", nm.t);
                assert!((nm.rho_min - 1e-4).abs() < 1e-9, "{}", nm.rho_min);
            }
            other => panic!("{other:?}"),
        }
        let ext = propagate_extremal(&kepler(), &z, 4.0, &tols).unwrap();
        assert_eq!(ext.switch_count(), 0);
        assert_eq!(ext.near_misses.len(), 1);
    }

    #[test]
    fn no_switch_when_adjoint_stays_away() {
        let tols = Tolerances::default();
        let z = ExtremalPoint::normal(State::zeros(), State::new(-1.0, 0.0, -2.0, -0.5));
        let arc = integrate_smooth_arc(&kepler(), &z, (0.0, 4.0), &tols).unwrap();
        assert_eq!(arc.halt, ArcHalt::EndOfSpan);
        assert!(matches!(detect_switch(&kepler(), &arc, &tols).unwrap(), SwitchOutcome::NearMiss(_)));
    }

    #[test]
    fn backward_run_recovers_initial_point() {
        let tols = Tolerances::default();
        let fwd = propagate_extremal(&kepler(), &reference(), 4.0, &tols).unwrap();
        let end = fwd.end_point();
        let bwd = propagate_extremal_dir(&kepler(), &end, 4.0, Direction::Backward, &tols).unwrap();
        assert_eq!(bwd.switch_count(), 1);
        assert!((bwd.switches[0].t_bar + 2.0).abs() < 1e-8);
        let back = bwd.end_point();
        assert!((back.phase() - reference().phase()).norm() < 1e-7);
    }

    #[test]
    fn strata_of_reference_family() {
        let tols = Tolerances::default();
        let label = |p: [f64; 4]| {
            stratum_of(&kepler(), &ExtremalPoint::normal(State::zeros(), State::from(p)), 5.0, &tols).unwrap()
        };
        let s = label([-1.0, 0.0, -2.0, 0.0]);
        assert_eq!(s.label, Stratum::Ss);
        assert!((s.t_bar.unwrap() - 2.0).abs() < 1e-8);
        assert_eq!(label([-1.0, 0.0, 2.0, 0.0]).label, Stratum::Su);
        assert_eq!(label([-1.0, 0.0, -2.0, -0.5]).label, Stratum::S0);
        assert_eq!(label([-1.0, 0.0, 0.0, 0.0]).label, Stratum::OnSigma);
    }

    #[test]
    fn projection_lands_on_stable_stratum() {
        let tols = Tolerances::default();
        let guess = ExtremalPoint::normal(State::zeros(), State::new(-1.0, 0.0, -2.0, -0.1));
        let pr = project_to_stable_manifold(&kepler(), &guess, &Vector4::new(0.0, 0.0, 0.0, 1.0), 5.0, &tols).unwrap();
        assert!((pr.mu - 0.1).abs() < 1e-9, "{}", pr.mu);
        assert!((pr.t_bar - 2.0).abs() < 1e-8);
        assert!(pr.residual <= 1e-10 * (1.0 + pr.z0.p.norm()));

        let on =
            project_to_stable_manifold(&kepler(), &reference(), &Vector4::new(0.0, 0.0, 0.0, 1.0), 5.0, &tols).unwrap();
        assert!(on.mu.abs() < 1e-12);
    }

    #[test]
    fn projection_along_tangent_direction_fails() {
        let tols = Tolerances::default();
        let guess = ExtremalPoint::normal(State::zeros(), State::new(-1.0, 0.0, -2.0, -0.1));
        // scaling the adjoint keeps the miss distance's sign
        let r = project_to_stable_manifold(&kepler(), &guess, &Vector4::new(1.0, 0.0, 2.0, 0.0), 5.0, &tols);
        assert!(matches!(r, Err(Error::NewtonDivergence { .. })), "{r:?}");
    }

    #[test]
    fn zero_length_run_has_single_sample() {
        let tols = Tolerances::default();
        let ext = propagate_extremal(&kepler(), &reference(), 0.0, &tols).unwrap();
        assert_eq!(ext.arcs.len(), 1);
        assert_eq!(ext.arcs[0].samples.len(), 1);
        let mut buf = Vec::new();
        ext.write_csv(&kepler(), &[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }

    #[test]
    fn csv_has_switch_row() {
        let tols = Tolerances::default();
        let ext = propagate_extremal(&kepler(), &reference(), 4.0, &tols).unwrap();
        let mut buf = Vec::new();
        ext.write_csv(&kepler(), &["cfg".to_string()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# cfg\nt,x1,x2,x3,x4,p1,p2,p3,p4,u1,u2,rho,hmax,event\n"));
        let rows: Vec<&str> = text.lines().filter(|l| l.ends_with(",switch")).collect();
        assert_eq!(rows.len(), 1);
        let t: f64 = rows[0].split(',').next().unwrap().parse().unwrap();
        assert!((t - 2.0).abs() < 1e-8);
    }

    #[test]
    fn level_is_conserved() {
        let tols = Tolerances::default();
        let sys = builtin_pendulum_kepler();
        let z = ExtremalPoint::normal(State::new(0.1, -0.2, 0.0, 0.3), State::new(-1.0, 0.3, -1.5, 0.2));
        let h0 = crate::hamiltonian::hmax(&sys, &z).unwrap();
        let ext = propagate_extremal(&sys, &z, 3.0, &tols).unwrap();
        for arc in &ext.arcs {
            for s in &arc.samples {
                let h = crate::hamiltonian::hmax(&sys, &s.z).unwrap();
                assert!((h - h0).abs() < 1e-8, "{} vs {}", h, h0);
            }
        }
    }

    #[test]
    fn sigma_plus_contact_is_an_error() {
        use crate::systems::{FieldFn, JacobianFn};
        use nalgebra::Matrix4;
        use std::sync::Arc;
        // F2 = (2 x3, 0, 0, 1) gives H12 = 2 p1, dominating H01 = -p1
        let f0: FieldFn = Arc::new(|x: &State| State::new(1.0 + x[2], x[3], 0.0, 0.0));
        let f1: FieldFn = Arc::new(|_: &State| State::new(0.0, 0.0, 1.0, 0.0));
        let f2: FieldFn = Arc::new(|x: &State| State::new(2.0 * x[2], 0.0, 0.0, 1.0));
        let j0: JacobianFn = Arc::new(|_: &State| {
            let mut m = Matrix4::zeros();
            m[(0, 2)] = 1.0;
            m[(1, 3)] = 1.0;
            m
        });
        let j1: JacobianFn = Arc::new(|_: &State| Matrix4::zeros());
        let j2: JacobianFn = Arc::new(|_: &State| {
            let mut m = Matrix4::zeros();
            m[(0, 2)] = 2.0;
            m
        });
        let sys = AffineSystem::new("twisted", [f0, f1, f2], [j0, j1, j2]);
        let z = ExtremalPoint::normal(State::zeros(), State::new(-1.0, 0.0, 0.0, 0.0));
        let r = build_switch(&sys, &z, 0.0, &Tolerances::default());
        assert!(matches!(r, Err(Error::SigmaPlusEncounter { .. })), "{r:?}");
    }
}
