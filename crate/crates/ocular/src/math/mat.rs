//! Small fixed-size matrix helpers.
//!
//! The state space is four-dimensional and the position plane two-dimensional,
//! so everything here is written directly against `[[f64; N]; N]` arrays. The
//! Cholesky factorization deliberately applies no jitter: a factorization
//! failure means the caller's covariance is not positive definite, which is a
//! contract violation to surface, not to paper over.

use crate::error::{Error, Result};

pub type Mat4 = [[f64; 4]; 4];
pub type Mat2 = [[f64; 2]; 2];
/// 4x2 matrix (state rows, action columns).
pub type Mat42 = [[f64; 2]; 4];

pub fn mat4_zero() -> Mat4 {
    [[0.0; 4]; 4]
}

pub fn mat4_identity() -> Mat4 {
    let mut m = mat4_zero();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat4_scale(m: &Mat4, s: f64) -> Mat4 {
    let mut out = *m;
    for row in &mut out {
        for v in row {
            *v *= s;
        }
    }
    out
}

pub fn mat4_add(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = *a;
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] += b[i][j];
        }
    }
    out
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = mat4_zero();
    for i in 0..4 {
        for k in 0..4 {
            let aik = a[i][k];
            for j in 0..4 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub fn mat4_transpose(a: &Mat4) -> Mat4 {
    let mut out = mat4_zero();
    for i in 0..4 {
        for j in 0..4 {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn mat4_mul_vec(a: &Mat4, x: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i] += a[i][j] * x[j];
        }
    }
    out
}

pub fn mat4_trace(a: &Mat4) -> f64 {
    a[0][0] + a[1][1] + a[2][2] + a[3][3]
}

pub fn mat42_mul_vec(b: &Mat42, u: &[f64; 2]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = b[i][0] * u[0] + b[i][1] * u[1];
    }
    out
}

/// Symmetry check with a relative tolerance; used to validate covariance
/// inputs at module boundaries.
pub fn mat4_is_symmetric(a: &Mat4, tol: f64) -> bool {
    for i in 0..4 {
        for j in (i + 1)..4 {
            let scale = a[i][j].abs().max(a[j][i].abs()).max(1.0);
            if (a[i][j] - a[j][i]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite 4x4
/// matrix. Fails (without jitter) on any non-PD input.
#[derive(Debug, Clone)]
pub struct Chol4 {
    l: Mat4,
}

impl Chol4 {
    pub fn new(a: &Mat4) -> Result<Self> {
        let mut l = mat4_zero();
        for i in 0..4 {
            for j in 0..=i {
                let mut sum = a[i][j];
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::Numeric(format!(
                            "cholesky failed at pivot {i}: covariance is not positive definite"
                        )));
                    }
                    l[i][j] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        Ok(Chol4 { l })
    }

    /// Solve L y = b by forward substitution.
    pub fn forward_solve(&self, b: &[f64; 4]) -> [f64; 4] {
        let l = &self.l;
        let mut y = [0.0; 4];
        for i in 0..4 {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        y
    }

    /// Squared Mahalanobis norm d' Sigma^-1 d = |L^-1 d|^2.
    pub fn mahalanobis_sq(&self, d: &[f64; 4]) -> f64 {
        let y = self.forward_solve(d);
        y.iter().map(|v| v * v).sum()
    }

    /// mean + L z for a standard-normal z.
    pub fn affine(&self, mean: &[f64; 4], z: &[f64; 4]) -> [f64; 4] {
        let l = &self.l;
        let mut out = *mean;
        for i in 0..4 {
            for k in 0..=i {
                out[i] += l[i][k] * z[k];
            }
        }
        out
    }
}

pub fn mat2_det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Inverse of a symmetric positive-definite 2x2 matrix.
pub fn mat2_inverse(m: &Mat2) -> Result<Mat2> {
    let det = mat2_det(m);
    if det <= 0.0 || !det.is_finite() || m[0][0] <= 0.0 {
        return Err(Error::Numeric(
            "2x2 ellipse shape matrix is not positive definite".into(),
        ));
    }
    Ok([
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ])
}

/// Quadratic form (q - c)' M (q - c) in the plane.
pub fn mat2_quadform(m: &Mat2, c: &[f64; 2], q: &[f64; 2]) -> f64 {
    let dx = q[0] - c[0];
    let dy = q[1] - c[1];
    m[0][0] * dx * dx + (m[0][1] + m[1][0]) * dx * dy + m[1][1] * dy * dy
}
