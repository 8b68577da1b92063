//! Incremental Bowyer-Watson insertion with a symbolic vertex at infinity.
//!
//! Hull faces are closed by "infinite" cells `(a, b, c, INF)`, so no bounding
//! super-tetrahedron is needed and the convex hull is always covered. Ties in
//! the in-sphere test (after exact-sign evaluation) are broken by perturbing
//! the lifted coordinate of each site by an amount that shrinks with its
//! index (lower index dominates).

use std::collections::HashMap;

use std::cmp::Ordering;

use super::predicates::{insphere_sign, orient_sign};
use super::{orient, Tetrahedralization, DEGENERATE_TRIPLE};
use crate::error::{Error, Result};
use crate::vec3::Vec3;

const INF: usize = usize::MAX;
const NONE: usize = usize::MAX;

#[derive(Clone, Copy, Debug)]
struct Cell {
    v: [usize; 4],
    n: [usize; 4],
    alive: bool,
}

impl Cell {
    fn inf_slot(&self) -> Option<usize> {
        self.v.iter().position(|&x| x == INF)
    }
}

struct Builder<'a> {
    pts: &'a [Vec3],
    cells: Vec<Cell>,
    free: Vec<usize>,
    last_finite: usize,
    mark: Vec<u32>,
    stamp: u32,
    walk_state: u64,
    // scratch buffers reused across insertions
    cavity: Vec<usize>,
    boundary: Vec<(usize, usize)>,
    faces: Vec<([usize; 3], (usize, usize))>,
}

/// Delaunay tetrahedralization of `sites`.
///
/// Deterministic for a given input: sites are inserted in a fixed spatial
/// (Morton) order and all tie-breaking depends only on site indices.
pub fn delaunay(sites: &[Vec3]) -> Result<Tetrahedralization> {
    if sites.len() < 4 {
        return Err(Error::DegenerateInput);
    }
    if let Some(p) = sites.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument(format!("site {p} is not finite")));
    }
    check_duplicates(sites)?;
    let order = morton_order(sites);
    let first = initial_simplex(sites, &order).ok_or(Error::DegenerateInput)?;

    let mut b = Builder {
        pts: sites,
        cells: Vec::with_capacity(sites.len() * 8),
        free: Vec::new(),
        last_finite: 0,
        mark: Vec::new(),
        stamp: 0,
        walk_state: 0x9e37_79b9_7f4a_7c15,
        cavity: Vec::new(),
        boundary: Vec::new(),
        faces: Vec::new(),
    };
    b.init(first);
    for &i in &order {
        if first.contains(&i) {
            continue;
        }
        b.insert(i)?;
    }
    Ok(b.finish())
}

fn check_duplicates(sites: &[Vec3]) -> Result<()> {
    let mut idx: Vec<usize> = (0..sites.len()).collect();
    idx.sort_by(|&a, &b| sites[a].x.total_cmp(&sites[b].x));
    for (k, &a) in idx.iter().enumerate() {
        for &b in &idx[k + 1..] {
            if sites[b].x - sites[a].x > 1e-12 {
                break;
            }
            if sites[a].dist(sites[b]) < 1e-12 {
                return Err(Error::DuplicateSites(a.min(b), a.max(b)));
            }
        }
    }
    Ok(())
}

fn morton_order(sites: &[Vec3]) -> Vec<usize> {
    let lo = sites.iter().fold(Vec3::splat(f64::INFINITY), |m, p| m.min_by_axis(*p));
    let hi = sites.iter().fold(Vec3::splat(f64::NEG_INFINITY), |m, p| m.max_by_axis(*p));
    let ext = (hi - lo).max_by_axis(Vec3::splat(1e-300));
    let spread = |v: u64| -> u64 {
        let mut x = v & 0x1f_ffff;
        x = (x | x << 32) & 0x1f00000000ffff;
        x = (x | x << 16) & 0x1f0000ff0000ff;
        x = (x | x << 8) & 0x100f00f00f00f00f;
        x = (x | x << 4) & 0x10c30c30c30c30c3;
        x = (x | x << 2) & 0x1249249249249249;
        x
    };
    let scale = (1u64 << 21) as f64 - 1.0;
    let mut keyed: Vec<(u64, usize)> = sites
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = |v: f64, l: f64, e: f64| (((v - l) / e) * scale) as u64;
            let key = spread(q(p.x, lo.x, ext.x))
                | spread(q(p.y, lo.y, ext.y)) << 1
                | spread(q(p.z, lo.z, ext.z)) << 2;
            (key, i)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn initial_simplex(sites: &[Vec3], order: &[usize]) -> Option<[usize; 4]> {
    let a = order[0];
    let b = order[1];
    let ab = sites[b] - sites[a];
    let c = *order[2..]
        .iter()
        .find(|&&c| ab.cross(sites[c] - sites[a]).norm() > 1e-12)?;
    let d = *order[2..]
        .iter()
        .find(|&&d| d != c && orient(sites[a], sites[b], sites[c], sites[d]).abs() > DEGENERATE_TRIPLE)?;
    if orient(sites[a], sites[b], sites[c], sites[d]) > 0.0 {
        Some([a, b, c, d])
    } else {
        Some([b, a, c, d])
    }
}

impl Builder<'_> {
    fn p(&self, i: usize) -> Vec3 {
        self.pts[i]
    }

    fn alloc(&mut self, cell: Cell) -> usize {
        if let Some(id) = self.free.pop() {
            self.cells[id] = cell;
            self.mark[id] = 0;
            id
        } else {
            self.cells.push(cell);
            self.mark.push(0);
            self.cells.len() - 1
        }
    }

    fn init(&mut self, v: [usize; 4]) {
        let root = self.alloc(Cell {
            v,
            n: [NONE; 4],
            alive: true,
        });
        self.last_finite = root;
        let mut ghosts = [0usize; 4];
        for k in 0..4 {
            // replace the vertex by INF and swap two others to keep orientation
            let mut gv = v;
            gv[k] = INF;
            let (s0, s1) = match k {
                0 => (1, 2),
                1 => (0, 2),
                2 => (0, 1),
                _ => (0, 1),
            };
            gv.swap(s0, s1);
            ghosts[k] = self.alloc(Cell {
                v: gv,
                n: [NONE; 4],
                alive: true,
            });
            self.cells[root].n[k] = ghosts[k];
        }
        // ghost cells are linked to the root through their INF-opposite face
        for &g in &ghosts {
            let slot = self.cells[g].inf_slot().unwrap();
            self.cells[g].n[slot] = root;
        }
        // remaining ghost faces pair up by their shared edge
        let mut faces: HashMap<[usize; 3], (usize, usize)> = HashMap::new();
        for &g in &ghosts {
            for k in 0..4 {
                if self.cells[g].v[k] == INF {
                    continue;
                }
                let key = face_key(&self.cells[g].v, k);
                if let Some((og, ok)) = faces.remove(&key) {
                    self.cells[g].n[k] = og;
                    self.cells[og].n[ok] = g;
                } else {
                    faces.insert(key, (g, k));
                }
            }
        }
        debug_assert!(faces.is_empty());
    }

    /// Orientation of the cell with vertex slot `k` replaced by point `q`.
    /// Undefined (returns `None`) if another slot holds INF.
    fn orient_sub(&self, cell: &Cell, k: usize, q: Vec3) -> Option<f64> {
        let mut pts = [Vec3::ZERO; 4];
        for s in 0..4 {
            if s == k {
                pts[s] = q;
            } else if cell.v[s] == INF {
                return None;
            } else {
                pts[s] = self.p(cell.v[s]);
            }
        }
        Some(orient(pts[0], pts[1], pts[2], pts[3]))
    }

    /// Reliable sign of [`Self::orient_sub`].
    fn orient_sub_sign(&self, cell: &Cell, k: usize, q: Vec3) -> Option<Ordering> {
        let mut pts = [Vec3::ZERO; 4];
        for s in 0..4 {
            if s == k {
                pts[s] = q;
            } else if cell.v[s] == INF {
                return None;
            } else {
                pts[s] = self.p(cell.v[s]);
            }
        }
        Some(orient_sign(pts[0], pts[1], pts[2], pts[3]))
    }

    fn in_conflict(&self, cid: usize, e: usize) -> bool {
        let cell = &self.cells[cid];
        let pe = self.p(e);
        match cell.inf_slot() {
            Some(m) => {
                match self.orient_sub_sign(cell, m, pe).unwrap() {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => {
                        let f = [1, 2, 3].map(|j| self.p(cell.v[(m + j) % 4]));
                        in_circumcircle(f[0], f[1], f[2], pe)
                    }
                }
            }
            None => {
                let [a, b, c, d] = cell.v.map(|s| self.p(s));
                match insphere_sign(a, b, c, d, pe) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => self.insphere_tiebreak(cell, e),
                }
            }
        }
    }

    /// Sign of the in-sphere test under a lifting perturbation that decreases
    /// with site index.
    fn insphere_tiebreak(&self, cell: &Cell, e: usize) -> bool {
        let mut slots: [(usize, usize); 5] = [
            (cell.v[0], 0),
            (cell.v[1], 1),
            (cell.v[2], 2),
            (cell.v[3], 3),
            (e, 4),
        ];
        slots.sort_unstable();
        let pe = self.p(e);
        for (_, slot) in slots {
            if slot == 4 {
                return true;
            }
            match self.orient_sub_sign(cell, slot, pe).unwrap() {
                Ordering::Greater => return false,
                Ordering::Less => return true,
                Ordering::Equal => {}
            }
        }
        false
    }

    fn next_rand(&mut self) -> u64 {
        self.walk_state ^= self.walk_state << 13;
        self.walk_state ^= self.walk_state >> 7;
        self.walk_state ^= self.walk_state << 17;
        self.walk_state
    }

    fn locate(&mut self, e: usize) -> Option<usize> {
        let pe = self.p(e);
        let mut cur = self.last_finite;
        if !self.cells[cur].alive || self.cells[cur].inf_slot().is_some() {
            cur = self.cells.iter().position(|c| c.alive && c.inf_slot().is_none())?;
        }
        let max_steps = 4 * self.cells.len() + 16;
        for _ in 0..max_steps {
            let cell = self.cells[cur];
            if cell.inf_slot().is_some() {
                return Some(cur);
            }
            let start = (self.next_rand() % 4) as usize;
            let mut moved = false;
            for t in 0..4 {
                let k = (start + t) % 4;
                if self.orient_sub_sign(&cell, k, pe).unwrap() == Ordering::Less {
                    cur = cell.n[k];
                    moved = true;
                    break;
                }
            }
            if !moved {
                return Some(cur);
            }
        }
        None
    }

    fn insert(&mut self, e: usize) -> Result<()> {
        // a finite cell reached by the walk contains the point, hence its
        // circumsphere does too, whatever the rounded in-sphere sign says
        let mut start = self
            .locate(e)
            .filter(|&c| self.cells[c].inf_slot().is_none() || self.in_conflict(c, e));
        if start.is_none() {
            start = (0..self.cells.len()).find(|&c| self.cells[c].alive && self.in_conflict(c, e));
        }
        let Some(start) = start else {
            return Err(Error::InvalidArgument(format!(
                "site {e} could not be located in the triangulation"
            )));
        };

        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
        let stamp = self.stamp;
        let mut cavity = std::mem::take(&mut self.cavity);
        cavity.clear();
        cavity.push(start);
        self.mark[start] = stamp;
        let mut head = 0;
        while head < cavity.len() {
            let c = cavity[head];
            head += 1;
            for k in 0..4 {
                let nb = self.cells[c].n[k];
                if self.mark[nb] != stamp && self.in_conflict(nb, e) {
                    self.mark[nb] = stamp;
                    cavity.push(nb);
                }
            }
        }

        let pe = self.p(e);
        // grow the cavity until every new cell is properly oriented
        let mut boundary = std::mem::take(&mut self.boundary);
        loop {
            boundary.clear();
            let mut grow = None;
            'scan: for &c in &cavity {
                let cell = self.cells[c];
                for k in 0..4 {
                    let nb = cell.n[k];
                    if self.mark[nb] == stamp {
                        continue;
                    }
                    let ok = match cell.inf_slot() {
                        Some(m) if m != k => {
                            let mut f = [Vec3::ZERO; 2];
                            let mut j = 0;
                            for s in (0..4).filter(|&s| s != m && s != k) {
                                f[j] = self.p(cell.v[s]);
                                j += 1;
                            }
                            (f[0] - pe).cross(f[1] - pe).norm() > 1e-14
                        }
                        _ => self.orient_sub(&cell, k, pe).unwrap() > DEGENERATE_TRIPLE,
                    };
                    if !ok {
                        grow = Some(nb);
                        break 'scan;
                    }
                    boundary.push((c, k));
                }
            }
            match grow {
                Some(nb) => {
                    self.mark[nb] = stamp;
                    cavity.push(nb);
                }
                None => break,
            }
        }

        // cavities are small, so unpaired faces are matched by linear scan
        let mut faces = std::mem::take(&mut self.faces);
        faces.clear();
        let mut last_created_finite = None;
        for &(c, k) in &boundary {
            let old = self.cells[c];
            let mut v = old.v;
            v[k] = e;
            let nb = old.n[k];
            let id = self.alloc(Cell {
                v,
                n: [NONE; 4],
                alive: true,
            });
            self.cells[id].n[k] = nb;
            let back = self.cells[nb].n.iter().position(|&x| x == c).unwrap();
            self.cells[nb].n[back] = id;
            for s in 0..4 {
                if s == k {
                    continue;
                }
                let key = face_key(&v, s);
                if let Some(pos) = faces.iter().position(|f| f.0 == key) {
                    let (other, os) = faces.swap_remove(pos).1;
                    self.cells[id].n[s] = other;
                    self.cells[other].n[os] = id;
                } else {
                    faces.push((key, (id, s)));
                }
            }
            if last_created_finite.is_none() && !v.contains(&INF) {
                last_created_finite = Some(id);
            }
        }
        debug_assert!(faces.is_empty(), "unpaired faces after insertion");
        for &c in &cavity {
            self.cells[c].alive = false;
            self.free.push(c);
        }
        if let Some(f) = last_created_finite {
            self.last_finite = f;
        }
        self.cavity = cavity;
        self.boundary = boundary;
        self.faces = faces;
        Ok(())
    }

    /// Finite cells in canonical form: vertex ids ascending up to one swap
    /// of the last two (keeping positive orientation), cells sorted. Small
    /// perturbations that keep the connectivity therefore keep all indices.
    fn finish(self) -> Tetrahedralization {
        let mut finite: Vec<([usize; 4], usize, [usize; 4])> = Vec::new();
        for (id, c) in self.cells.iter().enumerate() {
            if !(c.alive && c.inf_slot().is_none()) {
                continue;
            }
            let mut slots = [0, 1, 2, 3];
            slots.sort_unstable_by_key(|&k| c.v[k]);
            if permutation_is_odd(slots) {
                slots.swap(2, 3);
            }
            finite.push((slots.map(|k| c.v[k]), id, slots));
        }
        finite.sort_unstable();
        let mut remap = vec![NONE; self.cells.len()];
        for (t, f) in finite.iter().enumerate() {
            remap[f.1] = t;
        }
        let tets = finite.iter().map(|f| f.0).collect();
        let neighbors = finite
            .iter()
            .map(|&(_, id, slots)| {
                slots.map(|k| {
                    let r = remap[self.cells[id].n[k]];
                    (r != NONE).then_some(r)
                })
            })
            .collect();
        Tetrahedralization::from_tets(self.pts.len(), self.pts, tets, neighbors)
    }
}

fn permutation_is_odd(p: [usize; 4]) -> bool {
    let mut inversions = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            if p[i] > p[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2 == 1
}

/// Sorted vertex ids of the face opposite slot `k`.
fn face_key(v: &[usize; 4], k: usize) -> [usize; 3] {
    let mut f = [0; 3];
    let mut j = 0;
    for (s, &x) in v.iter().enumerate() {
        if s != k {
            f[j] = x;
            j += 1;
        }
    }
    f.sort_unstable();
    f
}

/// `p` strictly inside the circumcircle of the (coplanar) triangle `abc`.
fn in_circumcircle(a: Vec3, b: Vec3, c: Vec3, p: Vec3) -> bool {
    let ab = b - a;
    let ac = c - a;
    let n = ab.cross(ac);
    let nn = n.norm_sq();
    if nn <= 0.0 {
        return false;
    }
    let cc = a + (n.cross(ab).scaled(ac.norm_sq()) + ac.cross(n).scaled(ab.norm_sq())) / (2.0 * nn);
    let r2 = cc.dist_sq(a);
    cc.dist_sq(p) < r2 * (1.0 - 1e-12)
}
