//! Small fixed-size vector/matrix helpers.
//!
//! Hand-rolled instead of pulling a linear-algebra crate: everything here is
//! generic over the [`Real`] scalar, and the surface is a handful of 2- and
//! 3-dimensional operations.

use crate::real::{rl, Real};

pub type Vec2<T> = [T; 2];
pub type Vec3<T> = [T; 3];
/// Row-major 3×3.
pub type Mat3<T> = [[T; 3]; 3];
/// Row-major 2×2.
pub type Mat2<T> = [[T; 2]; 2];

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize3<T: Real>(a: Vec3<T>) -> Vec3<T> {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[inline]
pub fn mat3_mul_vec3<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// mᵀ · v
#[inline]
pub fn mat3_tmul_vec3<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = T::zero();
            for k in 0..3 {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn mat3_transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// a · diag(d)
pub fn mat3_mul_diag<T: Real>(a: &Mat3<T>, d: Vec3<T>) -> Mat3<T> {
    let mut out = *a;
    for row in out.iter_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = *x * d[j];
        }
    }
    out
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_mat3<T: Real>(q: [T; 4]) -> Mat3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = rl::<T>(2.0);
    let one = T::one();
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// d(tr(Gᵀ·R(q)))/dq for a fixed coefficient matrix G; the adjoint of
/// [`quat_to_mat3`] applied to an upstream gradient G = dL/dR.
pub fn quat_to_mat3_backward<T: Real>(q: [T; 4], g: &Mat3<T>) -> [T; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = rl::<T>(2.0);
    // Entry-wise partials of R wrt each quaternion component.
    let dw = two
        * (T::zero() * g[0][0] + (-z) * g[0][1] + y * g[0][2] + z * g[1][0] + T::zero() * g[1][1]
            + (-x) * g[1][2]
            + (-y) * g[2][0]
            + x * g[2][1]
            + T::zero() * g[2][2]);
    let dx = two
        * (T::zero() * g[0][0]
            + y * g[0][1]
            + z * g[0][2]
            + y * g[1][0]
            + (-two * x) * g[1][1]
            + (-w) * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            + (-two * x) * g[2][2]);
    let dy = two
        * ((-two * y) * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + T::zero() * g[1][1]
            + z * g[1][2]
            + (-w) * g[2][0]
            + z * g[2][1]
            + (-two * y) * g[2][2]);
    let dz = two
        * ((-two * z) * g[0][0] + (-w) * g[0][1] + x * g[0][2] + w * g[1][0]
            + (-two * z) * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]
            + T::zero() * g[2][2]);
    [dw, dx, dy, dz]
}

/// Inverse and determinant of a 2×2 matrix. Returns `None` when |det| < eps.
#[inline]
pub fn mat2_inverse<T: Real>(m: &Mat2<T>, eps: T) -> Option<(Mat2<T>, T)> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < eps {
        return None;
    }
    let inv_det = T::one() / det;
    Some((
        [
            [m[1][1] * inv_det, -m[0][1] * inv_det],
            [-m[1][0] * inv_det, m[0][0] * inv_det],
        ],
        det,
    ))
}

/// Eigenvalues of a symmetric 2×2 matrix, larger first.
#[inline]
pub fn sym_mat2_eigenvalues<T: Real>(m: &Mat2<T>) -> (T, T) {
    let half = rl::<T>(0.5);
    let mid = (m[0][0] + m[1][1]) * half;
    let diff = (m[0][0] - m[1][1]) * half;
    let rad = (diff * diff + m[0][1] * m[1][0]).max(T::zero()).sqrt();
    (mid + rad, mid - rad)
}

/// Numerically stable softplus ln(1+eˣ).
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// σ(x) = softplus'(x), stable for large |x|.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus: x with softplus(x) = y, y > 0.
#[inline]
pub fn softplus_inverse<T: Real>(y: T) -> T {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_identity_is_identity_rotation() {
        let r = quat_to_mat3([1.0f64, 0.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quat_rotation_is_orthonormal() {
        let q = normalize4([0.9f64, 0.1, -0.3, 0.2]);
        let r = quat_to_mat3(q);
        let rt = mat3_transpose(&r);
        let p = mat3_mul(&r, &rt);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p[i][j] - want).abs() < 1e-12);
            }
        }
    }

    fn normalize4(q: [f64; 4]) -> [f64; 4] {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = normalize4([0.7f64, -0.2, 0.5, 0.1]);
        // Arbitrary fixed upstream gradient.
        let g = [[0.3, -1.1, 0.7], [0.2, 0.9, -0.4], [-0.6, 0.1, 1.3]];
        let grad = quat_to_mat3_backward(q, &g);
        let f = |q: [f64; 4]| {
            let r = quat_to_mat3(q);
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += g[i][j] * r[i][j];
                }
            }
            s
        };
        let eps = 1e-6;
        for c in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[c] += eps;
            qm[c] -= eps;
            let fd = (f(qp) - f(qm)) / (2.0 * eps);
            assert!(
                (fd - grad[c]).abs() < 1e-8,
                "component {c}: fd {fd} vs ad {}",
                grad[c]
            );
        }
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-3f64, 0.1, 1.0, 5.0, 40.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() < 1e-9 * y.max(1.0));
        }
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let (a, b) = sym_mat2_eigenvalues(&[[3.0f64, 0.0], [0.0, 1.0]]);
        assert!((a - 3.0).abs() < 1e-14 && (b - 1.0).abs() < 1e-14);
    }
}
