//! Exact nearest-neighbor queries over a static point set using a k-d tree.

use rayon::prelude::*;

use crate::vec3::Vec3;

/// Points per leaf.
const LEAF_SIZE: usize = 8;
const LEAF: u8 = 3;

#[derive(Clone, Debug)]
pub struct NearestNeighbors {
    points: Vec<Vec3>,
    /// Points in tree order, and their original indices.
    sorted: Vec<Vec3>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    start: u32,
    end: u32,
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
}

impl NearestNeighbors {
    pub fn new(points: &[Vec3]) -> Self {
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build(points, &mut ids, 0, &mut nodes);
        }
        Self {
            points: points.to_vec(),
            sorted: ids.iter().map(|&i| points[i as usize]).collect(),
            ids,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Index of the nearest point and the squared distance to it. Ties go to
    /// the lower index. An empty set answers `(usize::MAX, inf)`.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        if !self.nodes.is_empty() {
            self.search(0, q, &mut best);
        }
        best
    }

    pub fn nearest_all(&self, queries: &[Vec3]) -> Vec<(usize, f64)> {
        queries.par_iter().map(|&q| self.nearest(q)).collect()
    }

    fn search(&self, node: usize, q: Vec3, best: &mut (usize, f64)) {
        let n = self.nodes[node];
        if n.axis == LEAF {
            for k in n.start as usize..n.end as usize {
                let d = self.sorted[k].dist_sq(q);
                let i = self.ids[k] as usize;
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near as usize, q, best);
        // equal distances may still hide a lower index on the far side
        if diff * diff <= best.1 {
            self.search(far as usize, q, best);
        }
    }
}

/// Build the subtree over `ids` (occupying `offset..offset + ids.len()` in
/// tree order) and return its node index.
fn build(points: &[Vec3], ids: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let me = nodes.len();
    let end = offset + ids.len();
    nodes.push(Node {
        start: offset as u32,
        end: end as u32,
        axis: LEAF,
        split: 0.0,
        left: 0,
        right: 0,
    });
    if ids.len() <= LEAF_SIZE {
        return me;
    }
    let (lo, hi) = ids.iter().fold(
        (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
        |(lo, hi), &i| (lo.min_by_axis(points[i as usize]), hi.max_by_axis(points[i as usize])),
    );
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    if ext[axis] == 0.0 {
        return me;
    }
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let split = points[ids[mid] as usize][axis];
    let (left_ids, right_ids) = ids.split_at_mut(mid);
    let left = build(points, left_ids, offset, nodes);
    let right = build(points, right_ids, offset + mid, nodes);
    nodes[me] = Node {
        start: offset as u32,
        end: end as u32,
        axis: axis as u8,
        split,
        left: left as u32,
        right: right as u32,
    };
    me
}
