//! Tetrahedral primitives and the Delaunay tetrahedralization of the sites.

mod delaunay;
mod predicates;

pub use delaunay::delaunay;
pub use predicates::{insphere_sign, orient_sign};

use crate::error::{Error, Result};
use crate::vec3::{Scalar, Vec3, V3};

/// `|p . (q x r)|` below this marks a tetrahedron as near-degenerate.
pub const DEGENERATE_TRIPLE: f64 = 1e-12;

/// Scalar triple product `p . (q x r)` with `p = b - a`, `q = c - a`, `r = d - a`.
#[inline]
pub fn orient(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> f64 {
    (b - a).dot((c - a).cross(d - a))
}

pub fn tet_volume(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> f64 {
    orient(a, b, c, d).abs() / 6.0
}

/// Circumcenter of a tetrahedron written in its local edge frame.
///
/// Works over any [`Scalar`]; callers are responsible for rejecting flat
/// tetrahedra first.
#[inline]
pub fn circumcenter_t<T: Scalar>(a: V3<T>, b: V3<T>, c: V3<T>, d: V3<T>) -> V3<T> {
    let p = b - a;
    let q = c - a;
    let r = d - a;
    let alpha = p.norm_sq();
    let beta = q.norm_sq();
    let gamma = r.norm_sq();
    let qxr = q.cross(r);
    let num = qxr.mul_s(alpha) + r.cross(p).mul_s(beta) + p.cross(q).mul_s(gamma);
    let den = p.dot(qxr).scale(2.0);
    a + num.div_s(den)
}

pub fn circumcenter(a: Vec3, b: Vec3, c: Vec3, d: Vec3) -> Result<Vec3> {
    let triple = orient(a, b, c, d);
    if triple.abs() < DEGENERATE_TRIPLE {
        return Err(Error::NearDegenerate(triple));
    }
    Ok(circumcenter_t(a, b, c, d))
}

/// Barycentric coordinates of `x` with respect to the tetrahedron `abcd`.
pub fn barycentric(a: Vec3, b: Vec3, c: Vec3, d: Vec3, x: Vec3) -> [f64; 4] {
    let vol = orient(a, b, c, d);
    let la = orient(x, b, c, d) / vol;
    let lb = orient(a, x, c, d) / vol;
    let lc = orient(a, b, x, d) / vol;
    let ld = orient(a, b, c, x) / vol;
    [la, lb, lc, ld]
}

pub fn det4(m: &[[f64; 4]; 4]) -> f64 {
    let s0 = m[0][0] * m[1][1] - m[1][0] * m[0][1];
    let s1 = m[0][0] * m[1][2] - m[1][0] * m[0][2];
    let s2 = m[0][0] * m[1][3] - m[1][0] * m[0][3];
    let s3 = m[0][1] * m[1][2] - m[1][1] * m[0][2];
    let s4 = m[0][1] * m[1][3] - m[1][1] * m[0][3];
    let s5 = m[0][2] * m[1][3] - m[1][2] * m[0][3];
    let c5 = m[2][2] * m[3][3] - m[3][2] * m[2][3];
    let c4 = m[2][1] * m[3][3] - m[3][1] * m[2][3];
    let c3 = m[2][1] * m[3][2] - m[3][1] * m[2][2];
    let c2 = m[2][0] * m[3][3] - m[3][0] * m[2][3];
    let c1 = m[2][0] * m[3][2] - m[3][0] * m[2][2];
    let c0 = m[2][0] * m[3][1] - m[3][0] * m[2][1];
    s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0
}

/// Positive iff `e` lies strictly inside the circumsphere of the positively
/// oriented tetrahedron `abcd`.
pub fn insphere(a: Vec3, b: Vec3, c: Vec3, d: Vec3, e: Vec3) -> f64 {
    let row = |p: Vec3| {
        let r = p - e;
        [r.x, r.y, r.z, r.norm_sq()]
    };
    -det4(&[row(a), row(b), row(c), row(d)])
}

/// Delaunay tetrahedralization of a fixed site set, with adjacency.
#[derive(Clone, Debug)]
pub struct Tetrahedralization {
    /// Site indices of every tetrahedron, positively oriented.
    pub tets: Vec<[usize; 4]>,
    /// Neighbor across the face opposite vertex `k`; `None` on the convex hull.
    pub face_neighbors: Vec<[Option<usize>; 4]>,
    /// Tetrahedra incident to each site.
    pub site_to_tets: Vec<Vec<usize>>,
    /// Sites sharing a Delaunay edge with each site, sorted.
    pub site_rings: Vec<Vec<usize>>,
    /// Unique Delaunay edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Tetrahedra whose triple product falls under [`DEGENERATE_TRIPLE`].
    pub degenerate: Vec<bool>,
}

impl Tetrahedralization {
    pub(crate) fn from_tets(
        n_sites: usize,
        sites: &[Vec3],
        tets: Vec<[usize; 4]>,
        face_neighbors: Vec<[Option<usize>; 4]>,
    ) -> Self {
        let mut counts = vec![0usize; n_sites];
        for tet in &tets {
            for &s in tet {
                counts[s] += 1;
            }
        }
        let mut site_to_tets: Vec<Vec<usize>> = counts.iter().map(|&c| Vec::with_capacity(c)).collect();
        let mut degenerate = Vec::with_capacity(tets.len());
        for (t, tet) in tets.iter().enumerate() {
            for &s in tet {
                site_to_tets[s].push(t);
            }
            let [a, b, c, d] = tet.map(|s| sites[s]);
            degenerate.push(orient(a, b, c, d).abs() < DEGENERATE_TRIPLE);
        }
        // rings come from the incident tets; ascending rings give sorted edges
        let site_rings: Vec<Vec<usize>> = site_to_tets
            .iter()
            .enumerate()
            .map(|(i, ts)| {
                let mut ring = Vec::with_capacity(3 * ts.len());
                ring.extend(ts.iter().flat_map(|&t| tets[t]).filter(|&j| j != i));
                ring.sort_unstable();
                ring.dedup();
                ring
            })
            .collect();
        let edges = site_rings
            .iter()
            .enumerate()
            .flat_map(|(i, ring)| ring.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect();
        Self {
            tets,
            face_neighbors,
            site_to_tets,
            site_rings,
            edges,
            degenerate,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.site_to_tets.len()
    }

    pub fn len(&self) -> usize {
        self.tets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tets.is_empty()
    }

    /// Sites sharing a Delaunay edge with site `i`.
    pub fn one_ring(&self, i: usize) -> &[usize] {
        &self.site_rings[i]
    }

    /// Tetrahedra with each vertex list sorted, then the list sorted; for
    /// comparing triangulations independent of storage order.
    pub fn canonical_tets(&self) -> Vec<[usize; 4]> {
        let mut out: Vec<[usize; 4]> = self
            .tets
            .iter()
            .map(|t| {
                let mut s = *t;
                s.sort_unstable();
                s
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Index of tetrahedra incident to edge `(i, j)`.
    pub fn tets_around_edge(&self, i: usize, j: usize) -> Vec<usize> {
        self.site_to_tets[i]
            .iter()
            .copied()
            .filter(|&t| self.tets[t].contains(&j))
            .collect()
    }

    pub fn total_volume(&self, sites: &[Vec3]) -> f64 {
        self.tets
            .iter()
            .map(|t| tet_volume(sites[t[0]], sites[t[1]], sites[t[2]], sites[t[3]]))
            .sum()
    }
}
