//! Dormand-Prince 5(4) embedded pair with Hairer's fourth-order continuous
//! extension. Only single steps are exposed; step-size policy and event
//! handling live with the caller.

use nalgebra::SVector;

use crate::error::Result;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Continuous extension of one accepted step on `[t0, t0 + h]`.
#[derive(Debug, Clone)]
pub struct DenseSegment<const N: usize> {
    pub t0: f64,
    pub h: f64,
    coeffs: [SVector<f64, N>; 5],
}

impl<const N: usize> DenseSegment<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    /// Evaluates the interpolant; `t` slightly outside the step extrapolates.
    pub fn eval(&self, t: f64) -> SVector<f64, N> {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let c = &self.coeffs;
        c[0] + (c[1] + (c[2] + (c[3] + c[4] * theta1) * theta) * theta1) * theta
    }

    /// Time derivative of the interpolant.
    pub fn eval_derivative(&self, t: f64) -> SVector<f64, N> {
        // y = c0 + c1 s + c2 s(1-s) + c3 s^2 (1-s) + c4 s^2 (1-s)^2, s = theta
        let s = (t - self.t0) / self.h;
        let c = &self.coeffs;
        let d = c[1]
            + c[2] * (1.0 - 2.0 * s)
            + c[3] * (2.0 * s - 3.0 * s * s)
            + c[4] * (2.0 * s * (1.0 - s) * (1.0 - 2.0 * s));
        d / self.h
    }

    /// A segment whose interpolant is the straight line between two states.
    pub fn linear(t0: f64, h: f64, y0: SVector<f64, N>, y1: SVector<f64, N>) -> Self {
        let z = SVector::<f64, N>::zeros();
        Self { t0, h, coeffs: [y0, y1 - y0, z, z, z] }
    }

    pub(crate) fn map<const M: usize>(&self, f: impl Fn(&SVector<f64, N>) -> SVector<f64, M>) -> DenseSegment<M> {
        DenseSegment { t0: self.t0, h: self.h, coeffs: std::array::from_fn(|i| f(&self.coeffs[i])) }
    }
}

/// Result of one attempted step.
#[derive(Debug, Clone)]
pub struct StepAttempt<const N: usize> {
    pub y1: SVector<f64, N>,
    /// Derivative at the new point (first stage of the next step).
    pub k7: SVector<f64, N>,
    /// Embedded error estimate `y5 - y4`.
    pub error: SVector<f64, N>,
    pub dense: DenseSegment<N>,
}

/// One Dormand-Prince step from `(t, y0)` with `k1 = f(y0)` of length `h` for
/// an autonomous right-hand side.
pub fn dopri5_step<const N: usize, F>(
    f: &mut F,
    t: f64,
    y0: &SVector<f64, N>,
    k1: &SVector<f64, N>,
    h: f64,
) -> Result<StepAttempt<N>>
where
    F: FnMut(&SVector<f64, N>) -> Result<SVector<f64, N>>,
{
    let k2 = f(&(y0 + k1 * (h * A21)))?;
    let k3 = f(&(y0 + (k1 * A31 + k2 * A32) * h))?;
    let k4 = f(&(y0 + (k1 * A41 + k2 * A42 + k3 * A43) * h))?;
    let k5 = f(&(y0 + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * h))?;
    let k6 = f(&(y0 + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * h))?;
    let y1 = y0 + (k1 * A71 + k3 * A73 + k4 * A74 + k5 * A75 + k6 * A76) * h;
    let k7 = f(&y1)?;
    let error = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * h;

    let ydiff = y1 - y0;
    let bspl = k1 * h - ydiff;
    let c3 = ydiff - k7 * h - bspl;
    let c4 = (k1 * D1 + k3 * D3 + k4 * D4 + k5 * D5 + k6 * D6 + k7 * D7) * h;
    let dense = DenseSegment { t0: t, h, coeffs: [*y0, ydiff, bspl, c3, c4] };
    Ok(StepAttempt { y1, k7, error, dense })
}

/// Scaled RMS norm of the error over the first `m` components.
pub fn error_norm<const N: usize>(
    err: &SVector<f64, N>,
    y0: &SVector<f64, N>,
    y1: &SVector<f64, N>,
    m: usize,
    atol: f64,
    rtol: f64,
) -> f64 {
    let m = m.min(N);
    let mut acc = 0.0;
    for i in 0..m {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        acc += (err[i] / sc).powi(2);
    }
    (acc / m as f64).sqrt()
}

/// Standard step-size update factor for a fifth-order pair.
pub fn step_factor(err: f64) -> f64 {
    if err == 0.0 {
        5.0
    } else {
        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
    }
}
