//! Closed-form eigen decomposition of symmetric 3x3 matrices.

use std::f64::consts::PI;

use crate::vec3::{mat_vec, Mat3, Vec3};

/// Eigenvalues in ascending order.
pub fn sym3_eigenvalues(a: &Mat3) -> [f64; 3] {
    let p1 = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *a;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            if i == j {
                *x -= q;
            }
            *x /= p;
        }
    }
    let r = (det3(&b) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let mid = 3.0 * q - hi - lo;
    let mut out = [lo, mid, hi];
    out.sort_by(f64::total_cmp);
    out
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Unit eigenvector of symmetric `a` for eigenvalue `lambda`.
///
/// Taken as the largest cross product of two rows of `a - lambda I`. When the
/// eigenvalue is repeated any unit vector of the eigenspace is returned.
pub fn sym3_eigenvector(a: &Mat3, lambda: f64) -> Vec3 {
    let rows = [
        Vec3::new(a[0][0] - lambda, a[0][1], a[0][2]),
        Vec3::new(a[1][0], a[1][1] - lambda, a[1][2]),
        Vec3::new(a[2][0], a[2][1], a[2][2] - lambda),
    ];
    let crosses = [
        rows[0].cross(rows[1]),
        rows[0].cross(rows[2]),
        rows[1].cross(rows[2]),
    ];
    let best = crosses
        .iter()
        .copied()
        .max_by(|x, y| x.norm_sq().total_cmp(&y.norm_sq()))
        .unwrap();
    let row_scale = rows.iter().map(|r| r.norm_sq()).fold(0.0, f64::max);
    if best.norm_sq() > 1e-30 * row_scale * row_scale && best.norm_sq() > 0.0 {
        return best.normalized();
    }
    // rank <= 1: any vector orthogonal to the dominant row
    let r = rows
        .iter()
        .copied()
        .max_by(|x, y| x.norm_sq().total_cmp(&y.norm_sq()))
        .unwrap();
    if r.norm_sq() == 0.0 {
        return Vec3::new(0.0, 0.0, 1.0);
    }
    r.cross(least_aligned_axis(r)).normalized()
}

/// Eigenpair with the smallest eigenvalue, plus the gap to the next one.
pub struct SmallestEigen {
    pub value: f64,
    pub vector: Vec3,
    pub gap: f64,
}

pub fn smallest_eigenpair(a: &Mat3) -> SmallestEigen {
    let ev = sym3_eigenvalues(a);
    let vector = sym3_eigenvector(a, ev[0]);
    // Rayleigh quotient is accurate to second order in the vector error
    let value = vector.dot(mat_vec(a, vector));
    SmallestEigen {
        value,
        vector,
        gap: ev[1] - ev[0],
    }
}

/// World axis with the smallest absolute component of `v`.
pub fn least_aligned_axis(v: Vec3) -> Vec3 {
    let a = [v.x.abs(), v.y.abs(), v.z.abs()];
    if a[0] <= a[1] && a[0] <= a[2] {
        Vec3::new(1.0, 0.0, 0.0)
    } else if a[1] <= a[2] {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    }
}

/// Inverse of a symmetric 3x3 matrix via its adjugate; `None` if singular.
pub fn sym3_inverse(m: &Mat3) -> Option<Mat3> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    let c11 = m[0][0] * m[2][2] - m[0][2] * m[2][0];
    let c12 = m[0][2] * m[1][0] - m[0][0] * m[1][2];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    Some([
        [c00 * inv, c01 * inv, c02 * inv],
        [c01 * inv, c11 * inv, c12 * inv],
        [c02 * inv, c12 * inv, c22 * inv],
    ])
}
