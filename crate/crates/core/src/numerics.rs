//! Small scalar and dense-matrix helpers.

use nalgebra::{DMatrix, SMatrix, Vector4};

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for a minimum of a unimodal `f` on `[a, b]`.
pub fn minimize_golden<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    // the end points are candidates too: the minimum may sit on the bracket
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for x in [a, b] {
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}

/// Bisection for a sign change of `f` on `[a, b]`; requires `f(a) f(b) <= 0`.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> Option<f64> {
    let mut fa = f(a);
    let fb = f(b);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return Some(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}

/// Orthonormal basis of the orthogonal complement of a nonzero 4-vector.
pub fn orthonormal_complement(c: &Vector4<f64>) -> [Vector4<f64>; 3] {
    let n = c / c.norm();
    // Gram-Schmidt on the coordinate axes, dropping the one most aligned with n.
    let drop = (0..4).max_by(|&i, &j| n[i].abs().total_cmp(&n[j].abs())).unwrap_or(0);
    let mut out: Vec<Vector4<f64>> = Vec::with_capacity(3);
    for i in (0..4).filter(|&i| i != drop) {
        let mut v = Vector4::zeros();
        v[i] = 1.0;
        v -= n * n.dot(&v);
        for b in &out {
            v -= b * b.dot(&v);
        }
        out.push(v / v.norm());
    }
    [out[0], out[1], out[2]]
}

/// Ratio of singular values `s_max / s_min` (infinite when singular).
pub fn condition_number<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> f64 {
    let sv = DMatrix::from_column_slice(R, C, m.as_slice()).singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `det / prod |column|`, in `[-1, 1]`; zero when a column vanishes.
pub fn hadamard_ratio(m: &nalgebra::Matrix4<f64>) -> f64 {
    let prod: f64 = (0..4).map(|j| m.column(j).norm()).product();
    if prod == 0.0 {
        0.0
    } else {
        m.determinant() / prod
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, fx) = minimize_golden(|t| (t - 0.3).powi(2), -1.0, 2.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-9);
        assert!(fx < 1e-18);
    }

    #[test]
    fn golden_reports_boundary_minimum() {
        let (x, _) = minimize_golden(|t| t, 0.0, 1.0, 1e-12);
        assert_eq!(x, 0.0);
    }

    #[test]
    fn bisect_root() {
        let r = bisect(|t| t * t - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
        assert!(bisect(|t| t * t + 1.0, -1.0, 1.0, 1e-12).is_none());
    }

    #[test]
    fn complement_is_orthonormal() {
        let c = Vector4::new(0.0, 2.0, 0.0, -1.0);
        let b = orthonormal_complement(&c);
        for i in 0..3 {
            assert!(b[i].dot(&c).abs() < 1e-15);
            assert!((b[i].norm() - 1.0).abs() < 1e-15);
            for j in 0..i {
                assert!(b[i].dot(&b[j]).abs() < 1e-15);
            }
        }
    }
}
