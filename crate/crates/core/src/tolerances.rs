//! Numerical thresholds shared by every stage of the pipeline.
//!
//! Thresholds marked "relative" are multiplied by `1 + |p|` (or the analogous
//! scale) at the point of use, because the lifts are homogeneous of degree one
//! in the adjoint.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Local error tolerance of the embedded Runge-Kutta pair (absolute and relative).
    pub tol_int: f64,
    /// Relative: below `tol_rho * (1 + |p|)` the control is undefined.
    pub tol_rho: f64,
    /// Margin on `h12^2 - (h01^2 + h02^2)` separating Sigma+ / Sigma- from Sigma0.
    pub tol_sigma_class: f64,
    /// Relative: a minimum of rho below this is accepted as a switch.
    pub tol_switch_rho: f64,
    /// Relative: the event monitor only watches rho below this level.
    pub rho_arm: f64,
    /// Minimal |d/dt (H1, H2)| at a contact point.
    pub tol_transversal: f64,
    /// Minimal |det(F1, F2, F01, F02)|.
    pub tol_a1: f64,
    /// Relative length of the frozen-control restart step after a switch.
    pub micro_step: f64,
    /// Smallest admissible integration step (relative to 1 + |t|).
    pub h_min: f64,
    pub max_steps: usize,
    /// Fraction of the final time excluded near t = 0 in determinant tests.
    pub epsilon_t0: f64,
    /// A determinant whose ratio to the product of its column norms is below
    /// this value is treated as zero.
    pub tol_det: f64,
    /// Newton target on `|x(t_f) - x_f|` in shooting (absolute).
    pub tol_shoot: f64,
    /// Accepted |h^max| at a converged initial covector.
    pub tol_level: f64,
    pub newton_max_iter: usize,
    pub max_halvings: usize,
    pub max_condition: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol_int: 1e-10,
            tol_rho: 1e-9,
            tol_sigma_class: 1e-9,
            tol_switch_rho: 1e-8,
            rho_arm: 1e-3,
            tol_transversal: 1e-8,
            tol_a1: 1e-10,
            micro_step: 1e-6,
            h_min: 1e-14,
            max_steps: 2_000_000,
            epsilon_t0: 1e-3,
            tol_det: 1e-8,
            tol_shoot: 1e-9,
            tol_level: 1e-9,
            newton_max_iter: 50,
            max_halvings: 30,
            max_condition: 1e12,
        }
    }
}

impl Tolerances {
    pub fn rho_floor(&self, p_norm: f64) -> f64 {
        self.tol_rho * (1.0 + p_norm)
    }

    pub fn switch_rho(&self, p_norm: f64) -> f64 {
        self.tol_switch_rho * (1.0 + p_norm)
    }

    pub fn arm_rho(&self, p_norm: f64) -> f64 {
        self.rho_arm * (1.0 + p_norm)
    }

    /// All thresholds must be strictly positive.
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("tol_int", self.tol_int),
            ("tol_rho", self.tol_rho),
            ("tol_sigma_class", self.tol_sigma_class),
            ("tol_switch_rho", self.tol_switch_rho),
            ("rho_arm", self.rho_arm),
            ("tol_transversal", self.tol_transversal),
            ("tol_a1", self.tol_a1),
            ("micro_step", self.micro_step),
            ("h_min", self.h_min),
            ("epsilon_t0", self.epsilon_t0),
            ("tol_det", self.tol_det),
            ("tol_shoot", self.tol_shoot),
            ("tol_level", self.tol_level),
            ("max_condition", self.max_condition),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("tolerance `{name}` must be positive, got {v}"));
            }
        }
        if self.max_steps == 0 || self.newton_max_iter == 0 {
            return Err("iteration budgets must be positive".into());
        }
        Ok(())
    }
}
