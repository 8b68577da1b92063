//! Projection of sites, dual vertices and crossing-edge midpoints onto the
//! zero level of the per-site SDF.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eigen::smallest_eigenpair;
use crate::error::{Error, Result};
use crate::geometry::Tetrahedralization;
use crate::sdf::classify_crossing;
use crate::vec3::{mat_vec, Mat3, Scalar, Vec3, V3};

/// Regularizer in every Newton-style denominator.
pub const NEWTON_EPS: f64 = 1e-8;

/// Plane normals are not differentiated when the two smallest covariance
/// eigenvalues are closer than this.
pub const EIGENGAP_FLOOR: f64 = 1e-8;

/// How dual vertices of crossing tetrahedra reach the zero level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Project onto the plane fitted to the projected sites.
    #[default]
    Robust,
    /// Newton step with barycentrically interpolated value and gradient.
    Barycentric,
    /// Barycentric inside the tetrahedron, robust outside.
    Hybrid,
}

impl FromStr for ProjectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" => Ok(Self::Robust),
            "barycentric" => Ok(Self::Barycentric),
            "hybrid" => Ok(Self::Hybrid),
            _ => Err(Error::InvalidArgument(format!(
                "unknown projection mode `{s}` (robust, barycentric, hybrid)"
            ))),
        }
    }
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Robust => "robust",
            Self::Barycentric => "barycentric",
            Self::Hybrid => "hybrid",
        })
    }
}

/// Tetrahedra and Delaunay edges straddling the zero level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroCrossingSet {
    pub crossing_tets: Vec<usize>,
    /// `(i, j)` with `i < j` and `phi_i * phi_j < 0`.
    pub crossing_edges: Vec<(usize, usize)>,
}

impl ZeroCrossingSet {
    /// Tetrahedra flagged in `invalid` never count as crossing.
    pub fn new(tri: &Tetrahedralization, sdf: &[f64], invalid: &[bool]) -> Self {
        let crossing_tets = tri
            .tets
            .iter()
            .enumerate()
            .filter(|(t, tet)| !invalid[*t] && classify_crossing(tet.map(|s| sdf[s])))
            .map(|(t, _)| t)
            .collect();
        let crossing_edges = tri
            .edges
            .iter()
            .copied()
            .filter(|&(i, j)| sdf[i] * sdf[j] < 0.0)
            .collect();
        Self {
            crossing_tets,
            crossing_edges,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.crossing_tets.is_empty()
    }
}

/// `s - phi * g / (|g| + eps)`.
#[inline]
pub fn project_site_t<T: Scalar>(s: V3<T>, phi: T, g: V3<T>) -> V3<T> {
    let scale = phi / (g.norm() + T::cst(NEWTON_EPS));
    s - g.mul_s(scale)
}

pub fn project_site(s: Vec3, phi: f64, grad: Vec3) -> Vec3 {
    project_site_t(s, phi, grad)
}

/// Plane fitted to four points by least squares.
#[derive(Clone, Copy, Debug)]
pub struct Plane {
    pub centroid: Vec3,
    pub normal: Vec3,
    /// Mean squared distance of the points to the plane (the smallest
    /// covariance eigenvalue).
    pub residual: f64,
    pub covariance: Mat3,
    pub eigengap: f64,
}

impl Plane {
    /// The normal is not differentiable when the eigengap is this small.
    pub fn is_isotropic(&self) -> bool {
        self.eigengap < EIGENGAP_FLOOR
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        (p - self.centroid).dot(self.normal)
    }
}

/// Least-squares plane through `points`; the normal sign is chosen so that
/// `normal . orient_hint >= 0`.
pub fn fit_plane(points: [Vec3; 4], orient_hint: Vec3) -> Plane {
    let centroid = (points[0] + points[1] + points[2] + points[3]) * 0.25;
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        let d = p - centroid;
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += 0.25 * d[a] * d[b];
            }
        }
    }
    let eig = smallest_eigenpair(&cov);
    let normal = if eig.vector.dot(orient_hint) < 0.0 {
        -eig.vector
    } else {
        eig.vector
    };
    Plane {
        centroid,
        normal,
        residual: eig.value,
        covariance: cov,
        eigengap: eig.gap,
    }
}

/// Orthogonal projection of `v` onto `plane`.
pub fn project_vertex_robust(v: Vec3, plane: &Plane) -> Vec3 {
    v - plane.normal * plane.signed_distance(v)
}

/// Adjoint of [`project_vertex_robust`] composed with [`fit_plane`].
///
/// Returns the adjoint of `v` and of the four fitted points. The normal is
/// differentiated through the smallest eigenvector of the covariance with the
/// implicit-function rule `dn = -(C - l0 I)⁺ dC n`, unless the plane is
/// isotropic, in which case the normal is held fixed.
pub fn robust_backward(v: Vec3, points: [Vec3; 4], plane: &Plane, out_bar: Vec3) -> (Vec3, [Vec3; 4]) {
    let n = plane.normal;
    let c = plane.centroid;
    let d = plane.signed_distance(v);
    let along = n.dot(out_bar);
    let v_bar = out_bar - n * along;
    let c_bar = n * along;
    let mut pts_bar = [c_bar * 0.25; 4];
    if !plane.is_isotropic() {
        let n_bar = -(out_bar * d) - (v - c) * along;
        // pseudo-inverse of M = C - l0 I on the complement of n
        let mut m = plane.covariance;
        for (a, row) in m.iter_mut().enumerate() {
            row[a] -= plane.residual;
            for (b, x) in row.iter_mut().enumerate() {
                *x += n[a] * n[b];
            }
        }
        let Some(inv) = crate::eigen::sym3_inverse(&m) else {
            return (v_bar, pts_bar);
        };
        let y = mat_vec(&inv, n_bar) - n * n.dot(n_bar);
        let a = -y;
        // C̄ = a nᵀ; each centered point gets ¼ (C̄ + C̄ᵀ) Δ
        for (k, p) in points.iter().enumerate() {
            let delta = *p - c;
            pts_bar[k] += (a * n.dot(delta) + n * a.dot(delta)) * 0.25;
        }
    }
    (v_bar, pts_bar)
}

/// Signed volume-style triple product over any scalar.
#[inline]
fn orient_t<T: Scalar>(a: V3<T>, b: V3<T>, c: V3<T>, d: V3<T>) -> T {
    (b - a).dot((c - a).cross(d - a))
}

pub fn barycentric_t<T: Scalar>(s: [V3<T>; 4], x: V3<T>) -> [T; 4] {
    let vol = orient_t(s[0], s[1], s[2], s[3]);
    [
        orient_t(x, s[1], s[2], s[3]) / vol,
        orient_t(s[0], x, s[2], s[3]) / vol,
        orient_t(s[0], s[1], x, s[3]) / vol,
        orient_t(s[0], s[1], s[2], x) / vol,
    ]
}

/// Newton step from `v` using SDF value and gradient interpolated at its
/// barycentric coordinates (extrapolated when `v` is outside the tet).
pub fn project_vertex_barycentric_t<T: Scalar>(v: V3<T>, s: [V3<T>; 4], phi: [T; 4], grads: [V3<T>; 4]) -> V3<T> {
    let l = barycentric_t(s, v);
    let mut f = T::cst(0.0);
    let mut g = V3::zero();
    for k in 0..4 {
        f += l[k] * phi[k];
        g += grads[k].mul_s(l[k]);
    }
    project_site_t(v, f, g)
}

pub fn project_vertex_barycentric(v: Vec3, s: [Vec3; 4], phi: [f64; 4], grads: [Vec3; 4]) -> Vec3 {
    project_vertex_barycentric_t(v, s, phi, grads)
}

/// All barycentric coordinates of `v` lie in `[0, 1]`.
pub fn inside_tet(v: Vec3, s: [Vec3; 4]) -> bool {
    barycentric_t(s, v).iter().all(|&l| (0.0..=1.0).contains(&l))
}

/// Newton step from the midpoint of a crossing edge using averaged values
/// and gradients of its endpoints.
pub fn project_midpoint_t<T: Scalar>(si: V3<T>, sj: V3<T>, phi_i: T, phi_j: T, gi: V3<T>, gj: V3<T>) -> V3<T> {
    let half = T::cst(0.5);
    let b = (si + sj).mul_s(half);
    let f = (phi_i + phi_j) * half;
    let g = (gi + gj).mul_s(half);
    project_site_t(b, f, g)
}

pub fn project_midpoint(si: Vec3, sj: Vec3, phi_i: f64, phi_j: f64, gi: Vec3, gj: Vec3) -> Vec3 {
    project_midpoint_t(si, sj, phi_i, phi_j, gi, gj)
}
