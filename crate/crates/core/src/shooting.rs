//! Indirect shooting for the time-minimal transfer and sampling of the
//! final-time map `x_f -> t_f(x_f)`.

use std::io::{self, Write};

use nalgebra::{SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{signed_miss, Side};
use crate::hamiltonian::{hmax, hmax_fiber_gradient, lifts, ExtremalPoint};
use crate::jacobi::propagate_jacobi;
use crate::numerics::condition_number;
use crate::systems::{AffineSystem, State};
use crate::tolerances::Tolerances;

type Vector5 = SVector<f64, 5>;
type Matrix5 = SMatrix<f64, 5, 5>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootGuess {
    pub p0: Vector4<f64>,
    pub t_f: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootResult {
    pub p0: Vector4<f64>,
    pub t_f: f64,
    /// `x(t_f) - x_f`
    pub residual: Vector4<f64>,
    /// `h^max(x0, p0)` with `p0 = -1`.
    pub level: f64,
    pub iterations: usize,
    pub switch_count: usize,
    pub converged: bool,
    /// Condition number of the last shooting Jacobian.
    pub condition: f64,
}

/// Rescales `p` so that `h^max(x0, p) = 0` for a normal extremal.
pub fn normalize_covector(sys: &AffineSystem, x0: &State, p: &Vector4<f64>) -> Result<Vector4<f64>> {
    let hd = lifts(sys, &ExtremalPoint::normal(*x0, *p))?;
    let s = hd.h0 + hd.rho;
    if !(s > 0.0) {
        return Err(Error::Precondition(format!("covector cannot be scaled to the zero level (h0 + rho = {s:e})")));
    }
    Ok(p / s)
}

struct Shot {
    f: Vector5,
    jac: Matrix5,
    switch_count: usize,
}

fn evaluate(sys: &AffineSystem, x0: &State, xf: &State, p: &Vector4<f64>, t_f: f64, tols: &Tolerances) -> Result<Shot> {
    let z0 = ExtremalPoint::normal(*x0, *p);
    let level = hmax(sys, &z0)?;
    let grad = hmax_fiber_gradient(sys, &z0, tols.rho_floor(p.norm()))?;
    let (x, xp, xdot, switch_count) = if t_f == 0.0 {
        (*x0, nalgebra::Matrix4::zeros(), grad, 0)
    } else {
        let flow = propagate_jacobi(sys, &z0, t_f, tols)?;
        let phi = flow.transition_matrix(t_f, Side::Left);
        let xdot = flow.xdot(sys, t_f, Side::Left, tols)?;
        (flow.extremal.end_point().x, phi.fixed_view::<4, 4>(0, 4).into_owned(), xdot, flow.extremal.switch_count())
    };
    let mut f = Vector5::zeros();
    f.fixed_rows_mut::<4>(0).copy_from(&(x - xf));
    f[4] = level;
    let mut jac = Matrix5::zeros();
    jac.fixed_view_mut::<4, 4>(0, 0).copy_from(&xp);
    jac.fixed_view_mut::<4, 1>(0, 4).copy_from(&xdot);
    jac.fixed_view_mut::<1, 4>(4, 0).copy_from(&grad.transpose());
    Ok(Shot { f, jac, switch_count })
}

/// Newton's method on `[x(t_f; x0, p0) - x_f; h^max(x0, p0)] = 0` in
/// `(p0, t_f)` with `p0 = -1`, using the switch-aware transition matrix.
/// Steps are halved until the residual decreases.
pub fn shoot(sys: &AffineSystem, x0: &State, xf: &State, guess: &ShootGuess, tols: &Tolerances) -> Result<ShootResult> {
    let tol_x = tols.tol_shoot;
    let mut p = normalize_covector(sys, x0, &guess.p0)?;
    let mut t_f = guess.t_f.max(0.0);
    let mut shot = evaluate(sys, x0, xf, &p, t_f, tols)?;
    let mut condition = f64::NAN;
    for iteration in 0..=tols.newton_max_iter {
        let dx = shot.f.fixed_rows::<4>(0).into_owned();
        if dx.norm() <= tol_x && shot.f[4].abs() <= tols.tol_level {
            return Ok(ShootResult {
                p0: p,
                t_f,
                residual: dx,
                level: shot.f[4],
                iterations: iteration,
                switch_count: shot.switch_count,
                converged: true,
                condition,
            });
        }
        if iteration == tols.newton_max_iter {
            break;
        }
        condition = condition_number(&shot.jac);
        if !(condition <= tols.max_condition) {
            return Err(Error::SingularJacobian { cond: condition });
        }
        let step = shot.jac.lu().solve(&(-shot.f)).ok_or(Error::SingularJacobian { cond: condition })?;
        let merit = shot.f.norm();
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=tols.max_halvings {
            let p_try = p + step.fixed_rows::<4>(0) * lambda;
            let t_try = (t_f + step[4] * lambda).max(0.0);
            if let Ok(s) = evaluate(sys, x0, xf, &p_try, t_try, tols) {
                if s.f.norm() < merit {
                    accepted = Some((p_try, t_try, s));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((p_new, t_new, s)) = accepted else {
            return Err(Error::NewtonDivergence { iterations: iteration + 1, residual: merit });
        };
        p = p_new;
        t_f = t_new;
        shot = s;
    }
    Err(Error::NewtonDivergence { iterations: tols.newton_max_iter, residual: shot.f.norm() })
}

/// Position of a converged covector relative to the stable stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeamSide {
    Minus,
    Plus,
    Seam,
    Unknown,
}

impl SeamSide {
    fn label(self) -> &'static str {
        match self {
            SeamSide::Minus => "minus",
            SeamSide::Plus => "plus",
            SeamSide::Seam => "seam",
            SeamSide::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfSample {
    pub xf: Vector4<f64>,
    /// Coordinate along the sampled segment, zero at the reference endpoint.
    pub s: f64,
    pub t_f: f64,
    pub p0: Vector4<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub side: SeamSide,
    /// Signed miss distance of the extremal at its closest approach to Sigma.
    pub miss: Option<f64>,
    /// Finite-difference `dt_f/ds` using neighbours on the same side.
    pub slope: Option<f64>,
    /// `t_f` is only an upper bound of the value function unless global
    /// optimality was asserted.
    pub upper_bound: bool,
    pub error: Option<String>,
}

/// One-sided fits of `t_f(s)` at the seam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeamSummary {
    pub s_seam: f64,
    pub t_f_minus: f64,
    pub t_f_plus: f64,
    pub jump: f64,
    pub slope_minus: f64,
    pub slope_plus: f64,
    pub n_minus: usize,
    pub n_plus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfMap {
    pub x_ref: Vector4<f64>,
    pub direction: Vector4<f64>,
    pub rows: Vec<TfSample>,
    pub seam: Option<SeamSummary>,
}

/// Warm-started shots to every endpoint in `grid`, starting from the one
/// closest to the reference endpoint `x(t_f_ref; x0, p0_ref)` and moving
/// outward. Each sample is labelled by the sign of its miss distance to
/// Sigma. The second-order conditions at the reference are not checked
/// here. Per-sample failures are recorded in the rows.
pub fn tf_map_sample(
    sys: &AffineSystem,
    x0: &State,
    p0_ref: &Vector4<f64>,
    t_f_ref: f64,
    grid: &[Vector4<f64>],
    global_optimality: bool,
    tols: &Tolerances,
) -> Result<TfMap> {
    let p_ref = normalize_covector(sys, x0, p0_ref)?;
    let reference = propagate_jacobi(sys, &ExtremalPoint::normal(*x0, p_ref), t_f_ref, tols)?;
    let x_ref = reference.extremal.end_point().x;
    let direction = match (grid.first(), grid.last()) {
        (Some(a), Some(b)) if (b - a).norm() > 0.0 => (b - a).normalize(),
        _ => Vector4::zeros(),
    };
    let mut rows: Vec<Option<TfSample>> = vec![None; grid.len()];
    let Some(start) = (0..grid.len()).min_by(|&i, &j| (grid[i] - x_ref).norm().total_cmp(&(grid[j] - x_ref).norm()))
    else {
        return Ok(TfMap { x_ref, direction, rows: Vec::new(), seam: None });
    };
    let ref_guess = ShootGuess { p0: p_ref, t_f: t_f_ref };
    let order_up = start..grid.len();
    let order_down = (0..start).rev();
    for order in [order_up.collect::<Vec<_>>(), order_down.collect::<Vec<_>>()] {
        let mut guess = match rows[start].as_ref() {
            Some(r) if r.converged => ShootGuess { p0: r.p0, t_f: r.t_f },
            _ => ref_guess,
        };
        for i in order {
            let xf = grid[i];
            let s = (xf - x_ref).dot(&direction);
            let row = match shoot(sys, x0, &xf, &guess, tols) {
                Ok(r) => {
                    guess = ShootGuess { p0: r.p0, t_f: r.t_f };
                    let (side, miss) = classify_side(sys, x0, &r.p0, r.t_f, tols);
                    TfSample {
                        xf,
                        s,
                        t_f: r.t_f,
                        p0: r.p0,
                        converged: true,
                        iterations: r.iterations,
                        side,
                        miss,
                        slope: None,
                        upper_bound: !global_optimality,
                        error: None,
                    }
                }
                Err(e) => TfSample {
                    xf,
                    s,
                    t_f: f64::NAN,
                    p0: Vector4::repeat(f64::NAN),
                    converged: false,
                    iterations: 0,
                    side: SeamSide::Unknown,
                    miss: None,
                    slope: None,
                    upper_bound: !global_optimality,
                    error: Some(e.to_string()),
                },
            };
            rows[i] = Some(row);
        }
    }
    let mut rows: Vec<TfSample> = rows.into_iter().map(|r| r.expect("every grid point visited")).collect();
    fill_slopes(&mut rows);
    let seam = seam_summary(&rows);
    Ok(TfMap { x_ref, direction, rows, seam })
}

fn classify_side(
    sys: &AffineSystem,
    x0: &State,
    p0: &Vector4<f64>,
    t_f: f64,
    tols: &Tolerances,
) -> (SeamSide, Option<f64>) {
    let z0 = ExtremalPoint::normal(*x0, *p0);
    match signed_miss(sys, &z0, t_f, tols) {
        Ok(Some(m)) => {
            let side = if m.miss.abs() <= tols.switch_rho(p0.norm()) {
                SeamSide::Seam
            } else if m.miss < 0.0 {
                SeamSide::Minus
            } else {
                SeamSide::Plus
            };
            (side, Some(m.miss))
        }
        _ => (SeamSide::Unknown, None),
    }
}

fn usable(r: &TfSample, side: SeamSide) -> bool {
    r.converged && r.side == side
}

fn fill_slopes(rows: &mut [TfSample]) {
    let n = rows.len();
    for i in 0..n {
        let side = rows[i].side;
        if !rows[i].converged || !matches!(side, SeamSide::Minus | SeamSide::Plus) {
            continue;
        }
        let prev = (i > 0 && usable(&rows[i - 1], side)).then(|| i - 1);
        let next = (i + 1 < n && usable(&rows[i + 1], side)).then(|| i + 1);
        let (a, b) = match (prev, next) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a, i),
            (None, Some(b)) => (i, b),
            (None, None) => continue,
        };
        let ds = rows[b].s - rows[a].s;
        if ds != 0.0 {
            rows[i].slope = Some((rows[b].t_f - rows[a].t_f) / ds);
        }
    }
}

/// Least-squares quadratic through `(s, t)` evaluated at `s0`: value and slope.
fn quadratic_fit(points: &[(f64, f64)], s0: f64) -> Option<(f64, f64)> {
    if points.len() < 3 {
        return None;
    }
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for &(s, t) in points {
        let d = s - s0;
        let row = nalgebra::Vector3::new(1.0, d, d * d);
        ata += row * row.transpose();
        atb += row * t;
    }
    let c = ata.lu().solve(&atb)?;
    Some((c[0], c[1]))
}

fn seam_summary(rows: &[TfSample]) -> Option<SeamSummary> {
    let seam: Vec<f64> = rows.iter().filter(|r| r.converged && r.side == SeamSide::Seam).map(|r| r.s).collect();
    let minus: Vec<&TfSample> = rows.iter().filter(|r| usable(r, SeamSide::Minus)).collect();
    let plus: Vec<&TfSample> = rows.iter().filter(|r| usable(r, SeamSide::Plus)).collect();
    if minus.is_empty() || plus.is_empty() {
        return None;
    }
    let s_seam = if seam.is_empty() {
        let (a, b) = minus
            .iter()
            .flat_map(|m| plus.iter().map(move |p| (m.s, p.s)))
            .min_by(|x, y| (x.0 - x.1).abs().total_cmp(&(y.0 - y.1).abs()))?;
        0.5 * (a + b)
    } else {
        seam.iter().sum::<f64>() / seam.len() as f64
    };
    let nearest = |side: &[&TfSample]| {
        let mut pts: Vec<(f64, f64)> = side.iter().map(|r| (r.s, r.t_f)).collect();
        pts.sort_by(|a, b| (a.0 - s_seam).abs().total_cmp(&(b.0 - s_seam).abs()));
        pts.truncate(6);
        pts
    };
    let (t_minus, slope_minus) = quadratic_fit(&nearest(&minus), s_seam)?;
    let (t_plus, slope_plus) = quadratic_fit(&nearest(&plus), s_seam)?;
    Some(SeamSummary {
        s_seam,
        t_f_minus: t_minus,
        t_f_plus: t_plus,
        jump: (t_minus - t_plus).abs(),
        slope_minus,
        slope_plus,
        n_minus: minus.len(),
        n_plus: plus.len(),
    })
}

/// Endpoints `x_ref + s d` for `n` values of `s` evenly spread on
/// `[-half_width, half_width]`.
pub fn segment_grid(x_ref: &Vector4<f64>, d: &Vector4<f64>, half_width: f64, n: usize) -> Vec<Vector4<f64>> {
    if n == 1 {
        return vec![*x_ref];
    }
    (0..n).map(|k| x_ref + d * (-half_width + 2.0 * half_width * k as f64 / (n - 1) as f64)).collect()
}

impl TfMap {
    pub fn write_csv<W: Write>(&self, header: &[String], mut out: W) -> io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "xf1,xf2,xf3,xf4,s,tf,p01,p02,p03,p04,converged,side,slope,iterations,upper_bound")?;
        for r in &self.rows {
            for v in r.xf.iter() {
                write!(out, "{:.16e},", v)?;
            }
            write!(out, "{:.16e},{:.16e}", r.s, r.t_f)?;
            for v in r.p0.iter() {
                write!(out, ",{:.16e}", v)?;
            }
            let slope = r.slope.map(|v| format!("{v:.16e}")).unwrap_or_default();
            writeln!(
                out,
                ",{},{},{},{},{}",
                u8::from(r.converged),
                r.side.label(),
                slope,
                r.iterations,
                u8::from(r.upper_bound)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::propagate_extremal;
    use crate::systems::builtin_nilpotent_kepler;

    fn p_ref() -> Vector4<f64> {
        Vector4::new(-1.0, 0.0, -2.0, 0.0)
    }

    fn reference_endpoint() -> State {
        State::new(-0.5, 0.0, -1.0, 0.0)
    }

    #[test]
    fn recovers_reference_from_perturbed_guess() {
        let tols = Tolerances::default();
        let sys = builtin_nilpotent_kepler();
        let x0 = State::zeros();
        let xf = reference_endpoint();
        let guess = ShootGuess { p0: p_ref() + Vector4::new(0.01, -0.01, 0.01, 0.01), t_f: 3.01 };
        let r = shoot(&sys, &x0, &xf, &guess, &tols).unwrap();
        assert!(r.converged);
        assert_eq!(r.switch_count, 1);
        assert!(r.residual.norm() <= tols.tol_shoot);
        assert!(r.level.abs() <= tols.tol_level);
        assert!((r.t_f - 3.0).abs() < 1e-8, "{}", r.t_f);
        assert!((r.p0 - p_ref()).norm() < 1e-8, "{}", r.p0);

        // certificate: a fresh propagation reproduces the residual
        let ext = propagate_extremal(&sys, &ExtremalPoint::normal(x0, r.p0), r.t_f, &tols).unwrap();
        assert!((ext.end_point().x - xf).norm() <= 2.0 * tols.tol_shoot);
    }

    #[test]
    fn zero_time_transfer() {
        let tols = Tolerances::default();
        let sys = builtin_nilpotent_kepler();
        let x0 = State::new(0.1, 0.2, 0.3, 0.4);
        let r = shoot(&sys, &x0, &x0, &ShootGuess { p0: p_ref(), t_f: 0.0 }, &tols).unwrap();
        assert!(r.converged);
        assert_eq!(r.t_f, 0.0);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn unnormalizable_guess_is_rejected() {
        let sys = builtin_nilpotent_kepler();
        let r = normalize_covector(&sys, &State::zeros(), &Vector4::new(-1.0, 0.0, 0.0, 0.0));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn single_point_map_is_the_reference() {
        let tols = Tolerances::default();
        let sys = builtin_nilpotent_kepler();
        let grid = vec![reference_endpoint()];
        let map = tf_map_sample(&sys, &State::zeros(), &p_ref(), 3.0, &grid, false, &tols).unwrap();
        assert_eq!(map.rows.len(), 1);
        let r = &map.rows[0];
        assert!(r.converged && r.upper_bound);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.t_f, 3.0);
        assert_eq!(r.side, SeamSide::Seam);
    }

    /// Along a segment the slope of the final time is `p(t_f) . d` for a
    /// normal extremal at the zero level.
    #[test]
    fn one_sided_segment_is_smooth() {
        let tols = Tolerances::default();
        let sys = builtin_nilpotent_kepler();
        let d = Vector4::new(1.0, 0.0, 0.0, 1.0).normalize();
        let center = reference_endpoint() + d * 0.006;
        let second_difference = |h: f64| {
            let grid = segment_grid(&center, &d, 4.0 * h, 9);
            let map = tf_map_sample(&sys, &State::zeros(), &p_ref(), 3.0, &grid, false, &tols).unwrap();
            assert!(map.rows.iter().all(|r| r.converged && r.side == SeamSide::Plus));
            assert!(map.seam.is_none());
            for r in &map.rows {
                let ext = propagate_extremal(&sys, &ExtremalPoint::normal(State::zeros(), r.p0), r.t_f, &tols).unwrap();
                let oracle = ext.end_point().p.dot(&d);
                assert!((r.slope.unwrap() - oracle).abs() < 1e-4, "{} vs {oracle}", r.slope.unwrap());
            }
            map.rows.windows(3).map(|w| ((w[2].t_f - 2.0 * w[1].t_f + w[0].t_f) / (h * h)).abs()).fold(0.0, f64::max)
        };
        let coarse = second_difference(1e-3);
        let fine = second_difference(5e-4);
        assert!(coarse.is_finite() && fine.is_finite());
        assert!(coarse < 10.0 && fine < 10.0, "{coarse} {fine}");
    }

    #[test]
    fn csv_layout() {
        let tols = Tolerances::default();
        let sys = builtin_nilpotent_kepler();
        let map = tf_map_sample(&sys, &State::zeros(), &p_ref(), 3.0, &[reference_endpoint()], true, &tols).unwrap();
        let mut buf = Vec::new();
        map.write_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "xf1,xf2,xf3,xf4,s,tf,p01,p02,p03,p04,converged,side,slope,iterations,upper_bound"
        );
        assert!(lines.next().unwrap().ends_with(",1,seam,,0,0"));
    }
}
