//! Time-minimal control of four-dimensional control-affine systems with the
//! control in the unit disk: extremal flow with switchings, Jacobi fields
//! across switches, second-order optimality tests and shooting.

// `!(x > tol)` style comparisons deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod hamiltonian;
pub mod integrator;
pub mod jacobi;
pub mod numerics;
pub mod shooting;
pub mod systems;
pub mod tolerances;

pub use error::{Assumption, Error, Result};
pub use flow::{
    detect_switch, integrate_smooth_arc, project_to_stable_manifold, propagate_extremal, propagate_extremal_dir,
    stratum_of, ArcHalt, Direction, Extremal, ExtremalArc, NearMiss, Side, SmoothArc, StableProjection, Stratum,
    StratumLabel, SwitchEvent, SwitchOutcome,
};
pub use hamiltonian::{ExtremalPoint, HamiltonianData, Phase, SigmaClass};
pub use jacobi::{JacobiFlow, JacobiProfile, Stm};
pub use shooting::{shoot, tf_map_sample, ShootGuess, ShootResult, TfMap};
pub use systems::{AffineSystem, ControlValue, State};
pub use tolerances::Tolerances;
