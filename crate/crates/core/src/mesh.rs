//! Triangle meshes from an optimized state: the dual-facet extraction, the
//! marching-tetrahedra baseline, and a manifoldness report.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{barycentric, Tetrahedralization};
use crate::projection::{project_midpoint, ZeroCrossingSet};
use crate::sdf::{SiteState, TetFieldCache};
use crate::vec3::Vec3;

/// Vertices closer than this are merged.
pub const WELD_TOLERANCE: f64 = 1e-12;
/// Triangles with smaller area are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-14;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Per triangle: the crossing Delaunay edge (dual extraction) or the
    /// tetrahedron (marching tetrahedra) it came from.
    pub provenance: Vec<usize>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    /// Area-weighted normal (twice the area in length).
    pub fn triangle_cross(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(c - a)
    }

    pub fn area(&self, t: usize) -> f64 {
        0.5 * self.triangle_cross(t).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Volume enclosed by a closed mesh; positive when normals point out.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn map_vertices(&mut self, f: impl Fn(Vec3) -> Vec3) {
        for v in &mut self.vertices {
            *v = f(*v);
        }
    }

    /// Merge vertices within [`WELD_TOLERANCE`], then drop triangles that
    /// collapse or fall under [`MIN_TRIANGLE_AREA`], and unreferenced vertices.
    pub fn weld(&mut self) {
        let q = |x: f64| (x / WELD_TOLERANCE).round() as i64;
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut remap = vec![0usize; self.vertices.len()];
        let mut kept: Vec<Vec3> = Vec::with_capacity(self.vertices.len());
        for (i, &v) in self.vertices.iter().enumerate() {
            let key = [q(v.x), q(v.y), q(v.z)];
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = cells.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                            if let Some(&k) = list.iter().find(|&&k| kept[k].dist(v) <= WELD_TOLERANCE) {
                                found = Some(k);
                                break 'search;
                            }
                        }
                    }
                }
            }
            remap[i] = found.unwrap_or_else(|| {
                kept.push(v);
                cells.entry(key).or_default().push(kept.len() - 1);
                kept.len() - 1
            });
        }
        self.vertices = kept;
        let mut tris = Vec::with_capacity(self.triangles.len());
        let mut prov = Vec::with_capacity(self.triangles.len());
        for (t, p) in self.triangles.iter().zip(&self.provenance) {
            let t = t.map(|i| remap[i]);
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                continue;
            }
            let [a, b, c] = t.map(|i| self.vertices[i]);
            if 0.5 * (b - a).cross(c - a).norm() <= MIN_TRIANGLE_AREA {
                continue;
            }
            tris.push(t);
            prov.push(*p);
        }
        self.triangles = tris;
        self.provenance = prov;
        self.compact();
    }

    /// Remove vertices no triangle references.
    pub fn compact(&mut self) {
        let mut used = vec![usize::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        for t in &mut self.triangles {
            for i in t.iter_mut() {
                if used[*i] == usize::MAX {
                    used[*i] = verts.len();
                    verts.push(self.vertices[*i]);
                }
                *i = used[*i];
            }
        }
        self.vertices = verts;
    }
}

/// Result of [`extract_dccvt`].
#[derive(Clone, Debug)]
pub struct Extraction {
    pub mesh: TriangleMesh,
    /// Crossing edges whose ring of incident tetrahedra is broken by the hull
    /// or by a degenerate tetrahedron; their facets are open fans.
    pub open_fans: usize,
}

impl Extraction {
    pub fn watertight(&self) -> bool {
        self.open_fans == 0
    }
}

/// Even permutations of a positively oriented tet keep its orientation.
fn permutation_parity(from: [usize; 4], to: [usize; 4]) -> bool {
    let mut p = to.map(|v| from.iter().position(|&w| w == v).unwrap());
    let mut swaps = 0;
    for i in 0..4 {
        while p[i] != i {
            let j = p[i];
            p.swap(i, j);
            swaps += 1;
        }
    }
    swaps % 2 == 0
}

/// Vertices of tet `t` other than `i` and `j`, ordered so that
/// `(i, j, a, b)` is positively oriented.
fn wedge(tet: [usize; 4], i: usize, j: usize) -> (usize, usize) {
    let mut rest = tet.iter().copied().filter(|&v| v != i && v != j);
    let (a, b) = (rest.next().unwrap(), rest.next().unwrap());
    if permutation_parity(tet, [i, j, a, b]) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Tets around edge `(neg, pos)` in right-handed order about `pos - neg`.
/// The flag is false when the walk hits the hull or a tet outside `usable`.
fn edge_ring(tri: &Tetrahedralization, neg: usize, pos: usize, usable: &[bool]) -> (Vec<usize>, bool) {
    let around = tri.tets_around_edge(neg, pos);
    let Some(&start) = around.iter().find(|&&t| usable[t]) else {
        return (Vec::new(), false);
    };
    // step across the face that keeps (neg, pos, b): opposite a
    let forward = |t: usize| -> Option<usize> {
        let (a, _) = wedge(tri.tets[t], neg, pos);
        let k = tri.tets[t].iter().position(|&v| v == a).unwrap();
        tri.face_neighbors[t][k].filter(|&n| usable[n])
    };
    let backward = |t: usize| -> Option<usize> {
        let (_, b) = wedge(tri.tets[t], neg, pos);
        let k = tri.tets[t].iter().position(|&v| v == b).unwrap();
        tri.face_neighbors[t][k].filter(|&n| usable[n])
    };
    let mut ring = vec![start];
    let mut t = start;
    loop {
        match forward(t) {
            Some(n) if n == start => return (ring, true),
            Some(n) => {
                ring.push(n);
                t = n;
            }
            None => break,
        }
        if ring.len() > around.len() {
            return (ring, false);
        }
    }
    // open: extend backwards from the start
    let mut before = Vec::new();
    let mut t = start;
    while let Some(n) = backward(t) {
        before.push(n);
        t = n;
        if before.len() + ring.len() > around.len() {
            break;
        }
    }
    before.reverse();
    before.extend(ring);
    (before, false)
}

/// Zero point of the linear interpolant between two values of opposite sign.
fn zero_between(p: Vec3, fp: f64, q: Vec3, fq: f64) -> Vec3 {
    let t = fp / (fp - fq);
    p + (q - p) * t
}

/// Position of the mesh vertex of crossing tetrahedron `t`: the average of
/// the zero crossings along the segments from its dual vertex to its sites.
pub fn dual_vertex_position(state: &SiteState, tri: &Tetrahedralization, cache: &TetFieldCache, t: usize) -> Vec3 {
    let tet = tri.tets[t];
    let s = tet.map(|i| state.positions[i]);
    let phi = tet.map(|i| state.sdf[i]);
    let v = cache.circumcenters[t];
    let w = barycentric(s[0], s[1], s[2], s[3], v);
    let fv = (0..4).map(|k| w[k] * phi[k]).sum::<f64>();
    let mut sum = Vec3::ZERO;
    let mut count = 0;
    for k in 0..4 {
        if (fv < 0.0) != (phi[k] < 0.0) {
            sum += zero_between(v, fv, s[k], phi[k]);
            count += 1;
        }
    }
    if count == 0 {
        v
    } else {
        sum / count as f64
    }
}

/// Dual-facet extraction: one vertex per crossing tetrahedron, one fan per
/// crossing Delaunay edge, centered at the edge's projected midpoint.
/// Normals point from negative to positive SDF.
pub fn extract_dccvt(state: &SiteState, tri: &Tetrahedralization, cache: &TetFieldCache) -> Result<Extraction> {
    let phi = &state.sdf;
    let crossing = ZeroCrossingSet::new(tri, phi, &cache.invalid);
    if crossing.is_empty() {
        return Err(Error::EmptyReconstruction { iteration: None });
    }
    let site_grads = cache.site_gradients(tri);
    let mut slot = vec![usize::MAX; tri.len()];
    let mut usable = vec![false; tri.len()];
    let mut vertices: Vec<Vec3> = crossing
        .crossing_tets
        .par_iter()
        .map(|&t| dual_vertex_position(state, tri, cache, t))
        .collect();
    for (k, &t) in crossing.crossing_tets.iter().enumerate() {
        slot[t] = k;
        usable[t] = true;
    }

    let fans: Vec<(Vec3, Vec<usize>, bool)> = crossing
        .crossing_edges
        .par_iter()
        .map(|&(i, j)| {
            let (neg, pos) = if phi[i] < 0.0 { (i, j) } else { (j, i) };
            let (ring, closed) = edge_ring(tri, neg, pos, &usable);
            let pos_i = state.positions[i];
            let pos_j = state.positions[j];
            let center = project_midpoint(pos_i, pos_j, phi[i], phi[j], site_grads[i], site_grads[j]);
            (center, ring, closed)
        })
        .collect();

    let mut mesh = TriangleMesh::default();
    let mut open_fans = 0;
    for (e, (center, ring, closed)) in fans.into_iter().enumerate() {
        if !closed {
            open_fans += 1;
        }
        if ring.len() < 2 {
            continue;
        }
        let c = vertices.len();
        vertices.push(center);
        let n = ring.len();
        let segments = if closed { n } else { n - 1 };
        for m in 0..segments {
            let a = slot[ring[m]];
            let b = slot[ring[(m + 1) % n]];
            mesh.triangles.push([c, a, b]);
            mesh.provenance.push(e);
        }
    }
    mesh.vertices = vertices;
    mesh.weld();
    if mesh.is_empty() {
        return Err(Error::EmptyReconstruction { iteration: None });
    }
    Ok(Extraction { mesh, open_fans })
}

/// Marching tetrahedra: one vertex per sign-changing Delaunay edge at the
/// linear zero crossing, one or two triangles per crossing tetrahedron.
pub fn extract_mtet_baseline(state: &SiteState, tri: &Tetrahedralization) -> Result<TriangleMesh> {
    let phi = &state.sdf;
    let pos = &state.positions;
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    let mut vertex_of = |a: usize, b: usize, mesh: &mut TriangleMesh| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            mesh.vertices.push(zero_between(pos[key.0], phi[key.0], pos[key.1], phi[key.1]));
            mesh.vertices.len() - 1
        })
    };
    for (t, tet) in tri.tets.iter().enumerate() {
        if tri.degenerate[t] {
            continue;
        }
        let neg: Vec<usize> = tet.iter().copied().filter(|&i| phi[i] < 0.0).collect();
        let posv: Vec<usize> = tet.iter().copied().filter(|&i| phi[i] >= 0.0).collect();
        let tris: Vec<[usize; 3]> = match neg.len() {
            1 | 3 => {
                let (lone, others) = if neg.len() == 1 { (neg[0], &posv) } else { (posv[0], &neg) };
                vec![[
                    vertex_of(lone, others[0], &mut mesh),
                    vertex_of(lone, others[1], &mut mesh),
                    vertex_of(lone, others[2], &mut mesh),
                ]]
            }
            2 => {
                let q = [
                    vertex_of(neg[0], posv[0], &mut mesh),
                    vertex_of(neg[0], posv[1], &mut mesh),
                    vertex_of(neg[1], posv[1], &mut mesh),
                    vertex_of(neg[1], posv[0], &mut mesh),
                ];
                vec![[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
            }
            _ => continue,
        };
        let centroid = |set: &[usize]| set.iter().fold(Vec3::ZERO, |a, &i| a + pos[i]) / set.len() as f64;
        let outward = centroid(&posv) - centroid(&neg);
        for mut tr in tris {
            let [a, b, c] = tr.map(|i| mesh.vertices[i]);
            if (b - a).cross(c - a).dot(outward) < 0.0 {
                tr.swap(1, 2);
            }
            mesh.triangles.push(tr);
            mesh.provenance.push(t);
        }
    }
    mesh.weld();
    if mesh.is_empty() {
        return Err(Error::EmptyReconstruction { iteration: None });
    }
    Ok(mesh)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifoldReport {
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
    /// Interior edges whose two triangles traverse them in the same direction.
    pub inconsistent_edges: usize,
    pub components: usize,
    pub euler_characteristic: i64,
}

impl ManifoldReport {
    pub fn is_closed_manifold(&self) -> bool {
        self.boundary_edges == 0 && self.non_manifold_edges == 0
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn manifold_check(mesh: &TriangleMesh) -> ManifoldReport {
    let mut edges: HashMap<(usize, usize), Vec<(usize, bool)>> = HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            edges.entry((a.min(b), a.max(b))).or_default().push((t, a < b));
        }
    }
    let mut parent: Vec<usize> = (0..mesh.triangles.len()).collect();
    let mut report = ManifoldReport {
        boundary_edges: 0,
        non_manifold_edges: 0,
        inconsistent_edges: 0,
        components: 0,
        euler_characteristic: 0,
    };
    for uses in edges.values() {
        match uses.len() {
            1 => report.boundary_edges += 1,
            2 => {
                if uses[0].1 == uses[1].1 {
                    report.inconsistent_edges += 1;
                }
            }
            _ => report.non_manifold_edges += 1,
        }
        for w in uses.windows(2) {
            let (a, b) = (find(&mut parent, w[0].0), find(&mut parent, w[1].0));
            parent[a] = b;
        }
    }
    let mut used = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for &i in t {
            used[i] = true;
        }
    }
    let v = used.iter().filter(|&&u| u).count() as i64;
    report.components = (0..mesh.triangles.len()).filter(|&t| find(&mut parent, t) == t).count();
    report.euler_characteristic = v - edges.len() as i64 + mesh.triangles.len() as i64;
    report
}

/// Edge-connected pieces of `mesh`, largest (by triangle count) first.
pub fn split_components(mesh: &TriangleMesh) -> Vec<TriangleMesh> {
    let mut first_use: HashMap<(usize, usize), usize> = HashMap::new();
    let mut parent: Vec<usize> = (0..mesh.triangles.len()).collect();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let other = *first_use.entry((a.min(b), a.max(b))).or_insert(t);
            let (x, y) = (find(&mut parent, other), find(&mut parent, t));
            parent[x] = y;
        }
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut parts: Vec<TriangleMesh> = Vec::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let root = find(&mut parent, t);
        let k = *slot.entry(root).or_insert_with(|| {
            parts.push(TriangleMesh {
                vertices: mesh.vertices.clone(),
                triangles: Vec::new(),
                provenance: Vec::new(),
            });
            parts.len() - 1
        });
        parts[k].triangles.push(*tri);
        parts[k].provenance.push(mesh.provenance[t]);
    }
    for p in &mut parts {
        p.compact();
    }
    // stable, so equal sizes keep their order of first appearance
    parts.sort_by_key(|p| std::cmp::Reverse(p.triangles.len()));
    parts
}
