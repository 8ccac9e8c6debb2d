//! Subcommand bodies. Each writes its artifacts into the output directory,
//! every file carrying the resolved configuration.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use diskopt_core::flow::{propagate_extremal, stratum_of, Stratum, StratumLabel};
use diskopt_core::jacobi::{
    check_theorem3, det_m_profile, fiber_stable_basis, propagate_jacobi, smooth_conjugate_test, uniform_grid,
};
use diskopt_core::shooting::{segment_grid, shoot as shoot_bvp, tf_map_sample, ShootGuess};
use diskopt_core::systems::builtin;
use diskopt_core::{AffineSystem, Error, ExtremalPoint, State};
use nalgebra::Vector4;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("cannot write output: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    /// 1 configuration, 2 numerics, 3 assumption violation.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                Error::UnknownSystem(_)
                | Error::DimensionMismatch { .. }
                | Error::Precondition(_)
                | Error::Unsupported(_) => 1,
                Error::AssumptionViolated { .. } => 3,
                _ => 2,
            },
        }
    }
}

type CmdResult = Result<(), CliError>;

struct Setup {
    sys: AffineSystem,
    x0: State,
}

fn setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let sys = builtin(&cfg.system)?;
    Ok(Setup { sys, x0: Vector4::from(cfg.x0) })
}

fn initial_point(cfg: &RunConfig, x0: State) -> Result<ExtremalPoint, CliError> {
    let z0 = ExtremalPoint::new(x0, Vector4::from(cfg.require_p0()?), cfg.p0cost);
    z0.validate()?;
    Ok(z0)
}

fn create(cfg: &RunConfig, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path: PathBuf = cfg.out_dir.join(name);
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(cfg: &RunConfig, name: &str, body: &T) -> CmdResult {
    let mut out = create(cfg, name)?;
    let doc = json!({ "config": cfg, "result": body });
    serde_json::to_writer_pretty(&mut out, &doc).map_err(io::Error::other)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> CmdResult {
    let s = setup(cfg)?;
    let z0 = initial_point(cfg, s.x0)?;
    let ext = propagate_extremal(&s.sys, &z0, cfg.require_tf()?, &cfg.tolerances)?;
    let mut out = create(cfg, "trajectory.csv")?;
    ext.write_csv(&s.sys, &[cfg.header()], &mut out)?;
    out.flush()?;
    write_json(cfg, "switches.json", &json!({ "switches": ext.switches, "near_misses": ext.near_misses }))?;
    println!("t_final={:.6}, switches={}", ext.t_final(), ext.switch_count());
    for sw in &ext.switches {
        println!(
            "switch t_bar={:.10} u-=({:.6},{:.6}) u+=({:.6},{:.6}) class={:?}",
            sw.t_bar, sw.u_minus.u1, sw.u_minus.u2, sw.u_plus.u1, sw.u_plus.u2, sw.sigma_class
        );
    }
    Ok(())
}

fn label_text(label: &StratumLabel) -> String {
    match (label.label, label.t_bar) {
        (Stratum::Ss, Some(t)) => format!("Ss, t_bar={t:.6}"),
        (Stratum::Ss, None) => "Ss".to_string(),
        (Stratum::Su, _) => "Su".to_string(),
        (Stratum::S0, _) => "S0".to_string(),
        (Stratum::OnSigma, _) => "OnSigma".to_string(),
    }
}

pub fn classify(cfg: &RunConfig) -> CmdResult {
    let s = setup(cfg)?;
    let z0 = initial_point(cfg, s.x0)?;
    let label = stratum_of(&s.sys, &z0, cfg.horizon, &cfg.tolerances)?;
    write_json(cfg, "classify.json", &label)?;
    println!("{}", label_text(&label));
    Ok(())
}

pub fn jacobi(cfg: &RunConfig) -> CmdResult {
    let s = setup(cfg)?;
    let z0 = initial_point(cfg, s.x0)?;
    let tols = &cfg.tolerances;
    if !z0.is_normal() {
        let reason = "abnormal extremal out of scope";
        write_json(cfg, "jacobi_verdict.json", &json!({ "withheld": true, "reason": reason }))?;
        println!("verdict withheld: {reason}");
        return Ok(());
    }
    let tf = cfg.require_tf()?;
    let grid = uniform_grid(tf, cfg.n.unwrap_or(401));
    let flow = propagate_jacobi(&s.sys, &z0, tf, tols)?;
    match flow.extremal.switch_count() {
        0 => {
            let verdict = smooth_conjugate_test(&s.sys, &flow, &grid, tols)?;
            let mut out = create(cfg, "det_profile.csv")?;
            verdict.profile.write_csv(&[cfg.header()], &mut out)?;
            out.flush()?;
            let body = json!({
                "test": "smooth",
                "normal": verdict.normal,
                "first_conjugate_time": verdict.first_conjugate_time,
                "optimal_until": verdict.optimal_until,
                "text": verdict.text,
                "warnings": verdict.profile.notes,
            });
            write_json(cfg, "jacobi_verdict.json", &body)?;
            println!("{}", verdict.text);
        }
        1 => {
            let basis = fiber_stable_basis(&s.sys, &flow, tols)?;
            let profile = det_m_profile(&s.sys, &flow, &basis.basis, &grid, tols)?;
            let verdict = check_theorem3(&profile, z0.p0cost);
            let mut out = create(cfg, "det_profile.csv")?;
            profile.write_csv(&[cfg.header()], &mut out)?;
            out.flush()?;
            write_json(
                cfg,
                "jacobi_verdict.json",
                &json!({ "test": "switching", "stable_basis": basis, "verdict": verdict }),
            )?;
            println!("normal={} disconjugate={} same_sign={}", verdict.normal, verdict.disconjugate, verdict.same_sign);
            for r in &verdict.reasons {
                println!("reason: {r}");
            }
            for c in &verdict.conclusions {
                println!("conclusion: {c}");
            }
        }
        k => {
            return Err(Error::Unsupported(format!("extremal has {k} switches; the tests cover at most one")).into());
        }
    }
    Ok(())
}

pub fn shoot(cfg: &RunConfig) -> CmdResult {
    let s = setup(cfg)?;
    let xf = Vector4::from(cfg.require_xf()?);
    let guess = ShootGuess { p0: Vector4::from(cfg.require_p0()?), t_f: cfg.require_tf()? };
    let r = shoot_bvp(&s.sys, &s.x0, &xf, &guess, &cfg.tolerances)?;
    write_json(cfg, "shoot.json", &r)?;
    println!(
        "converged in {} iterations: t_f={:.12}, p0=({:.12},{:.12},{:.12},{:.12}), |residual|={:.3e}, switches={}",
        r.iterations,
        r.t_f,
        r.p0[0],
        r.p0[1],
        r.p0[2],
        r.p0[3],
        r.residual.norm(),
        r.switch_count
    );
    Ok(())
}

pub fn value_map(cfg: &RunConfig) -> CmdResult {
    let s = setup(cfg)?;
    let tols = &cfg.tolerances;
    let z0 = initial_point(cfg, s.x0)?;
    if !z0.is_normal() {
        return Err(Error::Precondition("value map needs a normal reference extremal".into()).into());
    }
    let tf = cfg.require_tf()?;
    let x_ref = propagate_extremal(&s.sys, &z0, tf, tols)?.end_point().x;
    let d = Vector4::from(cfg.direction.expect("value-map default")).normalize();
    let grid = segment_grid(&x_ref, &d, cfg.half_width.expect("value-map default"), cfg.n.expect("value-map default"));
    let map = tf_map_sample(&s.sys, &s.x0, &z0.p, tf, &grid, cfg.global_optimality, tols)?;
    let mut out = create(cfg, "value_map.csv")?;
    map.write_csv(&[cfg.header()], &mut out)?;
    out.flush()?;
    write_json(cfg, "value_map.json", &json!({ "x_ref": map.x_ref, "direction": map.direction, "seam": map.seam }))?;
    let converged = map.rows.iter().filter(|r| r.converged).count();
    println!("{converged}/{} endpoints converged", map.rows.len());
    match map.seam {
        Some(seam) => println!(
            "seam at s={:.3e}: jump={:.3e}, slope-={:.9}, slope+={:.9}",
            seam.s_seam, seam.jump, seam.slope_minus, seam.slope_plus
        ),
        None => println!("no seam crossing on the segment"),
    }
    Ok(())
}

struct ScanRow {
    p: State,
    label: Result<StratumLabel, Error>,
}

pub fn scan(cfg: &RunConfig) -> CmdResult {
    let s = setup(cfg)?;
    let tols = &cfg.tolerances;
    let center = Vector4::from(cfg.require_p0()?);
    let [a, b] = cfg.axes.expect("scan default");
    let n = cfg.n.expect("scan default");
    let w = cfg.half_width.expect("scan default");
    let offset = |k: usize| if n == 1 { 0.0 } else { -w + 2.0 * w * k as f64 / (n - 1) as f64 };
    let points: Vec<State> = (0..n * n)
        .map(|idx| {
            let mut p = center;
            p[a - 1] += offset(idx / n);
            p[b - 1] += offset(idx % n);
            p
        })
        .collect();
    // indexed collect keeps the row order independent of scheduling
    let rows: Vec<ScanRow> = points
        .par_iter()
        .map(|p| {
            let label = ExtremalPoint::new(s.x0, *p, cfg.p0cost)
                .validate()
                .and_then(|_| stratum_of(&s.sys, &ExtremalPoint::new(s.x0, *p, cfg.p0cost), cfg.horizon, tols));
            ScanRow { p: *p, label }
        })
        .collect();
    let mut out = create(cfg, "scan.csv")?;
    writeln!(out, "# {}", cfg.header())?;
    writeln!(out, "p1,p2,p3,p4,label,t_bar,both_directions,error")?;
    let mut counts = [0usize; 5];
    for r in &rows {
        for v in r.p.iter() {
            write!(out, "{v:.16e},")?;
        }
        match &r.label {
            Ok(l) => {
                let (name, slot) = match l.label {
                    Stratum::S0 => ("S0", 0),
                    Stratum::Ss => ("Ss", 1),
                    Stratum::Su => ("Su", 2),
                    Stratum::OnSigma => ("OnSigma", 3),
                };
                counts[slot] += 1;
                let t = l.t_bar.map(|t| format!("{t:.16e}")).unwrap_or_default();
                writeln!(out, "{name},{t},{},", u8::from(l.both_directions))?;
            }
            Err(e) => {
                counts[4] += 1;
                writeln!(out, "error,,,\"{}\"", e.to_string().replace('"', "'"))?;
            }
        }
    }
    out.flush()?;
    println!(
        "{}x{} grid: S0={} Ss={} Su={} OnSigma={} errors={}",
        n, n, counts[0], counts[1], counts[2], counts[3], counts[4]
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use diskopt_core::Assumption;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(ConfigError::Missing("system")).exit_code(), 1);
        assert_eq!(CliError::from(Error::UnknownSystem("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(Error::SingularControl { rho: 0.0 }).exit_code(), 2);
        assert_eq!(CliError::from(Error::NewtonDivergence { iterations: 1, residual: 1.0 }).exit_code(), 2);
        let a2 = Error::AssumptionViolated { assumption: Assumption::A2, value: 0.0 };
        assert_eq!(CliError::from(a2).exit_code(), 3);
    }
}
