//! Per-site SDF values, per-tetrahedron least-squares gradients, analytic
//! oracles used for initialization, and the smeared Heaviside.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eigen::{sym3_eigenvalues, sym3_inverse};
use crate::error::{Error, Result};
use crate::geometry::{circumcenter, orient, Tetrahedralization, DEGENERATE_TRIPLE};
use crate::vec3::{Mat3, Vec3};

/// Smallest admissible eigenvalue of a tetrahedron's Gram matrix.
pub const GRAM_EIGEN_FLOOR: f64 = 1e-14;

/// The optimization unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteState {
    pub positions: Vec<Vec3>,
    pub sdf: Vec<f64>,
    /// Stable identity of each site; survives insertion of new sites.
    pub ids: Vec<u64>,
    /// Bumped whenever the site set changes size.
    pub generation: u64,
    next_id: u64,
}

impl SiteState {
    pub fn new(positions: Vec<Vec3>, sdf: Vec<f64>) -> Result<Self> {
        if positions.len() != sdf.len() {
            return Err(Error::InvalidArgument(format!(
                "{} positions but {} sdf values",
                positions.len(),
                sdf.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("site {i} is not finite")));
        }
        if let Some(i) = sdf.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("sdf value {i} is not finite")));
        }
        let n = positions.len() as u64;
        Ok(Self {
            positions,
            sdf,
            ids: (0..n).collect(),
            generation: 0,
            next_id: n,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Append sites and return their fresh ids.
    pub fn extend(&mut self, sites: &[(Vec3, f64)]) -> Vec<u64> {
        let mut out = Vec::with_capacity(sites.len());
        for &(p, v) in sites {
            self.positions.push(p.clamp(-1.0, 1.0));
            self.sdf.push(v);
            self.ids.push(self.next_id);
            out.push(self.next_id);
            self.next_id += 1;
        }
        if !sites.is_empty() {
            self.generation += 1;
        }
        out
    }
}

/// A tetrahedron straddles the zero level iff its SDF values have strictly
/// opposite signs.
pub fn classify_crossing(phi: [f64; 4]) -> bool {
    let lo = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lo < 0.0 && 0.0 < hi
}

/// Least-squares gradient operator of one tetrahedron.
///
/// With `ds` the sites minus their centroid, `G = dsᵀ ds` and
/// `W = G⁻¹ dsᵀ`, the gradient of any per-site field `f` is `W (f - mean f)`.
/// The columns of `W` sum to zero, so centering `f` is optional.
#[derive(Clone, Copy, Debug)]
pub struct TetLsq {
    pub centered: [Vec3; 4],
    pub gram_inv: Mat3,
    pub weights: [[f64; 4]; 3],
}

impl TetLsq {
    pub fn new(sites: [Vec3; 4]) -> Result<Self> {
        let mean = (sites[0] + sites[1] + sites[2] + sites[3]) * 0.25;
        let centered = sites.map(|s| s - mean);
        let mut gram = [[0.0; 3]; 3];
        for d in &centered {
            for a in 0..3 {
                for b in 0..3 {
                    gram[a][b] += d[a] * d[b];
                }
            }
        }
        let smallest = sym3_eigenvalues(&gram)[0];
        if smallest < GRAM_EIGEN_FLOOR {
            return Err(Error::SingularGram(smallest));
        }
        let gram_inv = sym3_inverse(&gram).ok_or(Error::SingularGram(smallest))?;
        let mut weights = [[0.0; 4]; 3];
        for (k, d) in centered.iter().enumerate() {
            for a in 0..3 {
                weights[a][k] = gram_inv[a][0] * d.x + gram_inv[a][1] * d.y + gram_inv[a][2] * d.z;
            }
        }
        Ok(Self {
            centered,
            gram_inv,
            weights,
        })
    }

    pub fn apply(&self, f: [f64; 4]) -> Vec3 {
        let mean = (f[0] + f[1] + f[2] + f[3]) * 0.25;
        let mut g = Vec3::ZERO;
        for (k, &v) in f.iter().enumerate() {
            let c = v - mean;
            g.x += self.weights[0][k] * c;
            g.y += self.weights[1][k] * c;
            g.z += self.weights[2][k] * c;
        }
        g
    }

    /// Reverse-mode step: given `g = apply(f)` and its adjoint `g_bar`,
    /// returns adjoints of the four site positions and of `f`.
    pub fn backward(&self, f: [f64; 4], g: Vec3, g_bar: Vec3) -> ([Vec3; 4], [f64; 4]) {
        let mean = (f[0] + f[1] + f[2] + f[3]) * 0.25;
        let y = crate::vec3::mat_vec(&self.gram_inv, g_bar);
        let mut s_bar = [Vec3::ZERO; 4];
        let mut f_bar = [0.0; 4];
        for k in 0..4 {
            let d = self.centered[k];
            // G = ΣdΔdᵀ with adjoint -y gᵀ contributes -(y gᵀ + g yᵀ) d
            let from_gram = -(y * g.dot(d) + g * y.dot(d));
            s_bar[k] = from_gram + y * (f[k] - mean);
            f_bar[k] = d.dot(y);
        }
        (s_bar, f_bar)
    }
}

/// Least-squares gradient of the linear field through the four site values,
/// together with the weight matrix `W`.
pub fn tet_gradient(sites: [Vec3; 4], phi: [f64; 4]) -> Result<(Vec3, [[f64; 4]; 3])> {
    let lsq = TetLsq::new(sites)?;
    Ok((lsq.apply(phi), lsq.weights))
}

/// Per-tetrahedron quantities derived from one state snapshot.
#[derive(Clone, Debug)]
pub struct TetFieldCache {
    pub circumcenters: Vec<Vec3>,
    pub volumes: Vec<f64>,
    pub gradients: Vec<Vec3>,
    pub lsq: Vec<Option<TetLsq>>,
    /// Tetrahedra excluded from projections, centroids and site gradients:
    /// flat (no circumcenter) or with a singular Gram matrix.
    pub invalid: Vec<bool>,
    pub generation: u64,
}

impl TetFieldCache {
    pub fn build(state: &SiteState, tri: &Tetrahedralization) -> Self {
        let per_tet: Vec<(Vec3, f64, Vec3, Option<TetLsq>, bool)> = tri
            .tets
            .par_iter()
            .map(|t| {
                let p = t.map(|s| state.positions[s]);
                let phi = t.map(|s| state.sdf[s]);
                let triple = orient(p[0], p[1], p[2], p[3]);
                let vol = triple.abs() / 6.0;
                let cc = circumcenter(p[0], p[1], p[2], p[3]).ok();
                let lsq = TetLsq::new(p).ok();
                let invalid = cc.is_none() || lsq.is_none() || triple.abs() < DEGENERATE_TRIPLE;
                let grad = lsq.map(|l| l.apply(phi)).unwrap_or(Vec3::ZERO);
                (cc.unwrap_or(Vec3::ZERO), vol, grad, lsq, invalid)
            })
            .collect();
        let mut cache = Self {
            circumcenters: Vec::with_capacity(per_tet.len()),
            volumes: Vec::with_capacity(per_tet.len()),
            gradients: Vec::with_capacity(per_tet.len()),
            lsq: Vec::with_capacity(per_tet.len()),
            invalid: Vec::with_capacity(per_tet.len()),
            generation: state.generation,
        };
        for (cc, vol, grad, lsq, invalid) in per_tet {
            cache.circumcenters.push(cc);
            cache.volumes.push(vol);
            cache.gradients.push(grad);
            cache.lsq.push(lsq);
            cache.invalid.push(invalid);
        }
        cache
    }

    /// Volume-weighted mean of the gradients of the valid tetrahedra incident
    /// to site `i`; zero for a site without any.
    pub fn site_gradient(&self, tri: &Tetrahedralization, i: usize) -> Vec3 {
        let mut sum = Vec3::ZERO;
        let mut vol = 0.0;
        for &t in &tri.site_to_tets[i] {
            if self.invalid[t] {
                continue;
            }
            sum += self.gradients[t] * self.volumes[t];
            vol += self.volumes[t];
        }
        if vol > 0.0 {
            sum / vol
        } else {
            Vec3::ZERO
        }
    }

    pub fn site_gradients(&self, tri: &Tetrahedralization) -> Vec<Vec3> {
        (0..tri.n_sites())
            .into_par_iter()
            .map(|i| self.site_gradient(tri, i))
            .collect()
    }

    /// Per-site sum of incident valid-tet volumes.
    pub fn site_volumes(&self, tri: &Tetrahedralization) -> Vec<f64> {
        tri.site_to_tets
            .iter()
            .map(|ts| ts.iter().filter(|&&t| !self.invalid[t]).map(|&t| self.volumes[t]).sum())
            .collect()
    }
}

/// Smeared-out Heaviside with half-width `eps`.
pub fn heaviside(phi: f64, eps: f64) -> f64 {
    heaviside_parts(phi, eps).0
}

/// Which branch of the Heaviside a value falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeavisidePiece {
    Below,
    Band,
    Above,
}

pub fn heaviside_piece(phi: f64, eps: f64) -> HeavisidePiece {
    if phi < -eps {
        HeavisidePiece::Below
    } else if phi > eps {
        HeavisidePiece::Above
    } else {
        HeavisidePiece::Band
    }
}

/// Value, derivative in `phi` and derivative in `eps`.
pub fn heaviside_parts(phi: f64, eps: f64) -> (f64, f64, f64) {
    match heaviside_piece(phi, eps) {
        HeavisidePiece::Below => (0.0, 0.0, 0.0),
        HeavisidePiece::Above => (1.0, 0.0, 0.0),
        HeavisidePiece::Band => {
            let a = PI * phi / eps;
            let h = 0.5 + phi / (2.0 * eps) + a.sin() / (2.0 * PI);
            let dphi = (1.0 + a.cos()) / (2.0 * eps);
            let deps = -phi * (1.0 + a.cos()) / (2.0 * eps * eps);
            (h, dphi, deps)
        }
    }
}

/// Mean Delaunay edge length after discarding the longest 5% (rounded up),
/// together with the indices (into `edges`) of the edges that were kept.
pub fn trimmed_edge_mean(positions: &[Vec3], edges: &[(usize, usize)]) -> (f64, Vec<usize>) {
    if edges.is_empty() {
        return (0.0, Vec::new());
    }
    let mut order: Vec<(f64, usize)> = edges
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| (positions[i].dist(positions[j]), k))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let drop = ((edges.len() * 5).div_ceil(100)).min(edges.len() - 1);
    let kept = &order[..edges.len() - drop];
    let mean = kept.iter().map(|e| e.0).sum::<f64>() / kept.len() as f64;
    (mean, kept.iter().map(|e| e.1).collect())
}

pub fn compute_eps_h(positions: &[Vec3], tri: &Tetrahedralization) -> f64 {
    trimmed_edge_mean(positions, &tri.edges).0
}

/// `resolution³` lattice sites spanning the domain cube, jittered per axis
/// by at most `perturbation`.
pub fn init_grid_sites(resolution: usize, perturbation: f64, seed: u64) -> Vec<Vec3> {
    assert!(resolution >= 2, "grid resolution must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 2.0 / (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution.pow(3));
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let mut p = Vec3::new(
                    -1.0 + step * i as f64,
                    -1.0 + step * j as f64,
                    -1.0 + step * k as f64,
                );
                if perturbation > 0.0 {
                    for a in 0..3 {
                        p[a] += rng.gen_range(-perturbation..=perturbation);
                    }
                }
                out.push(p.clamp(-1.0, 1.0));
            }
        }
    }
    out
}

pub fn init_sdf(sites: &[Vec3], oracle: &SdfOracle) -> Vec<f64> {
    sites.iter().map(|&p| oracle.value(p)).collect()
}

/// One sinusoid of the smooth noise field.
#[derive(Clone, Debug)]
pub struct Wave {
    pub direction: Vec3,
    pub frequency: f64,
    pub phase: f64,
}

/// Analytic or sampled signed distance fields used to initialize `sdf`.
#[derive(Clone, Debug)]
pub enum SdfOracle {
    Sphere { center: Vec3, radius: f64 },
    /// Torus around the z axis.
    Torus { center: Vec3, major: f64, minor: f64 },
    Box { center: Vec3, half: Vec3 },
    Grid(GridSdf),
    /// `base` plus a bounded sum of eight random low-frequency sinusoids.
    Noisy {
        base: Box<SdfOracle>,
        amplitude: f64,
        waves: Vec<Wave>,
    },
    /// `base` defined in original coordinates, evaluated at normalized points
    /// `p = (x - center) * scale`.
    Transformed {
        base: Box<SdfOracle>,
        center: Vec3,
        scale: f64,
    },
}

const NOISE_WAVES: usize = 8;

impl SdfOracle {
    pub fn sphere(radius: f64) -> Self {
        SdfOracle::Sphere {
            center: Vec3::ZERO,
            radius,
        }
    }

    pub fn torus(major: f64, minor: f64) -> Self {
        SdfOracle::Torus {
            center: Vec3::ZERO,
            major,
            minor,
        }
    }

    pub fn noisy(base: SdfOracle, amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_79);
        let waves = (0..NOISE_WAVES)
            .map(|_| {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let t: f64 = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                Wave {
                    direction: Vec3::new(r * t.cos(), r * t.sin(), z),
                    frequency: rng.gen_range(1.0..3.0),
                    phase: rng.gen_range(0.0..2.0 * PI),
                }
            })
            .collect();
        SdfOracle::Noisy {
            base: Box::new(base),
            amplitude,
            waves,
        }
    }

    pub fn value(&self, p: Vec3) -> f64 {
        self.eval(p).0
    }

    /// Value and spatial gradient at `p`.
    pub fn eval(&self, p: Vec3) -> (f64, Vec3) {
        match self {
            SdfOracle::Sphere { center, radius } => {
                let d = p - *center;
                let n = d.norm();
                let g = if n > 0.0 { d / n } else { Vec3::ZERO };
                (n - radius, g)
            }
            SdfOracle::Torus { center, major, minor } => {
                let d = p - *center;
                let rho = (d.x * d.x + d.y * d.y).sqrt();
                let qx = rho - major;
                let q = (qx * qx + d.z * d.z).sqrt();
                let g = if q > 0.0 && rho > 0.0 {
                    Vec3::new(qx / q * d.x / rho, qx / q * d.y / rho, d.z / q)
                } else {
                    Vec3::ZERO
                };
                (q - minor, g)
            }
            SdfOracle::Box { center, half } => box_sdf(p - *center, *half),
            SdfOracle::Grid(grid) => grid.eval(p),
            SdfOracle::Noisy {
                base,
                amplitude,
                waves,
            } => {
                let (v, g) = base.eval(p);
                let mut nv = 0.0;
                let mut ng = Vec3::ZERO;
                for w in waves {
                    let a = w.frequency * w.direction.dot(p) + w.phase;
                    nv += a.sin();
                    ng += w.direction * (w.frequency * a.cos());
                }
                let k = amplitude / waves.len() as f64;
                (v + k * nv, g + ng * k)
            }
            SdfOracle::Transformed { base, center, scale } => {
                let x = p / *scale + *center;
                let (v, g) = base.eval(x);
                (v * scale, g)
            }
        }
    }
}

fn box_sdf(d: Vec3, half: Vec3) -> (f64, Vec3) {
    let q = Vec3::new(d.x.abs() - half.x, d.y.abs() - half.y, d.z.abs() - half.z);
    let sign = Vec3::new(d.x.signum(), d.y.signum(), d.z.signum());
    let outside = q.max_by_axis(Vec3::ZERO);
    let on = outside.norm();
    if on > 0.0 {
        let g = outside / on;
        return (on, Vec3::new(g.x * sign.x, g.y * sign.y, g.z * sign.z));
    }
    // inside: distance to the nearest face
    let mut axis = 0;
    for a in 1..3 {
        if q[a] > q[axis] {
            axis = a;
        }
    }
    let mut g = Vec3::ZERO;
    g[axis] = sign[axis];
    (q[axis], g)
}

/// SDF samples on a regular lattice, interpolated trilinearly.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSdf {
    pub dims: [usize; 3],
    pub min: Vec3,
    pub max: Vec3,
    /// x-fastest order.
    pub values: Vec<f64>,
}

impl GridSdf {
    pub fn new(dims: [usize; 3], min: Vec3, max: Vec3, values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument("grid needs at least 2 samples per axis".into()));
        }
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidArgument(format!(
                "grid expects {} values, got {}",
                dims[0] * dims[1] * dims[2],
                values.len()
            )));
        }
        if (0..3).any(|a| max[a] <= min[a]) {
            return Err(Error::InvalidArgument("grid bounds are empty".into()));
        }
        Ok(Self { dims, min, max, values })
    }

    /// Sample `oracle` on a lattice over `[min, max]`.
    pub fn from_oracle(oracle: &SdfOracle, dims: [usize; 3], min: Vec3, max: Vec3) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let t = Vec3::new(
                        i as f64 / (dims[0] - 1) as f64,
                        j as f64 / (dims[1] - 1) as f64,
                        k as f64 / (dims[2] - 1) as f64,
                    );
                    let p = Vec3::new(
                        min.x + t.x * (max.x - min.x),
                        min.y + t.y * (max.y - min.y),
                        min.z + t.z * (max.z - min.z),
                    );
                    values.push(oracle.value(p));
                }
            }
        }
        Self { dims, min, max, values }
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Trilinear value and its analytic gradient; points outside the box are
    /// clamped onto it.
    pub fn eval(&self, p: Vec3) -> (f64, Vec3) {
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut h = [0.0; 3];
        for a in 0..3 {
            let n = self.dims[a] - 1;
            h[a] = (self.max[a] - self.min[a]) / n as f64;
            let u = ((p[a] - self.min[a]) / h[a]).clamp(0.0, n as f64);
            let c = (u.floor() as usize).min(n - 1);
            cell[a] = c;
            frac[a] = u - c as f64;
        }
        let [i, j, k] = cell;
        let [fx, fy, fz] = frac;
        let c000 = self.at(i, j, k);
        let c100 = self.at(i + 1, j, k);
        let c010 = self.at(i, j + 1, k);
        let c110 = self.at(i + 1, j + 1, k);
        let c001 = self.at(i, j, k + 1);
        let c101 = self.at(i + 1, j, k + 1);
        let c011 = self.at(i, j + 1, k + 1);
        let c111 = self.at(i + 1, j + 1, k + 1);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(c000, c100, fx);
        let c10 = lerp(c010, c110, fx);
        let c01 = lerp(c001, c101, fx);
        let c11 = lerp(c011, c111, fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let v = lerp(c0, c1, fz);
        let dx = lerp(
            lerp(c100 - c000, c110 - c010, fy),
            lerp(c101 - c001, c111 - c011, fy),
            fz,
        ) / h[0];
        let dy = lerp(c10 - c00, c11 - c01, fz) / h[1];
        let dz = (c1 - c0) / h[2];
        (v, Vec3::new(dx, dy, dz))
    }

    /// Little-endian binary: three `i32` dims, six `f64` bounds, then values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(36 + 8 * self.values.len());
        for d in self.dims {
            buf.extend_from_slice(&(d as i32).to_le_bytes());
        }
        for v in self.min.to_array().into_iter().chain(self.max.to_array()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: msg.to_string(),
        };
        if buf.len() < 60 {
            return Err(bad("truncated grid header"));
        }
        let mut dims = [0usize; 3];
        for (a, d) in dims.iter_mut().enumerate() {
            let v = i32::from_le_bytes(buf[4 * a..4 * a + 4].try_into().unwrap());
            if v < 2 {
                return Err(bad("grid dimension below 2"));
            }
            *d = v as usize;
        }
        let f = |off: usize| f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        let min = Vec3::new(f(12), f(20), f(28));
        let max = Vec3::new(f(36), f(44), f(52));
        let n = dims[0] * dims[1] * dims[2];
        if buf.len() != 60 + 8 * n {
            return Err(bad(&format!("expected {} value bytes, found {}", 8 * n, buf.len() - 60)));
        }
        let values = (0..n).map(|k| f(60 + 8 * k)).collect();
        Self::new(dims, min, max, values).map_err(|e| bad(&e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::delaunay;
    use proptest::{prop_assert, proptest};

    fn random_tet(rng: &mut ChaCha8Rng) -> [Vec3; 4] {
        [0; 4].map(|_| {
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
    }

    #[test]
    fn crossing_classification() {
        assert!(classify_crossing([-1.0, 1.0, 1.0, 1.0]));
        assert!(!classify_crossing([0.1, 0.2, 0.3, 0.4]));
        assert!(!classify_crossing([0.0, 0.5, 1.0, 2.0]));
    }

    #[test]
    fn linear_field_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Vec3::new(0.3, -0.8, 0.52);
        for _ in 0..100 {
            let s = random_tet(&mut rng);
            let (g, _) = tet_gradient(s, s.map(|p| n.dot(p) + 0.7)).unwrap();
            assert!((g - n).norm() < 1e-10);
            let (z, _) = tet_gradient(s, [0.4; 4]).unwrap();
            assert!(z.norm() < 1e-15);
        }
    }

    #[test]
    fn gradient_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = random_tet(&mut rng);
            let phi = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
            let (g, _) = tet_gradient(s, phi).unwrap();
            let sbar = (s[0] + s[1] + s[2] + s[3]) * 0.25;
            let pbar = phi.iter().sum::<f64>() / 4.0;
            let resid = |g: Vec3| (0..4).map(|k| (pbar + (s[k] - sbar).dot(g) - phi[k]).powi(2)).sum::<f64>() / 4.0;
            let best = resid(g);
            for _ in 0..1000 {
                let d = Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                );
                assert!(best <= resid(g + d) + 1e-15);
            }
        }
    }

    #[test]
    fn gradient_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_tet(&mut rng);
        let phi = [0.1, -0.3, 0.25, 0.7];
        let t = Vec3::new(0.2, -0.4, 0.1);
        let (a, _) = tet_gradient(s, phi).unwrap();
        let (b, _) = tet_gradient(s.map(|p| p + t), phi).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn flat_tet_has_singular_gram() {
        let s = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        assert!(matches!(tet_gradient(s, [0.0; 4]), Err(Error::SingularGram(_))));
    }

    #[test]
    fn lsq_backward_matches_duals() {
        use crate::vec3::{Dual, V3};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_tet(&mut rng);
        let f = [0.3, -0.2, 0.5, 0.1];
        let g_bar = Vec3::new(0.7, -1.1, 0.4);
        // forward-mode oracle: differentiate g_bar · g through a generic solve
        type D = Dual<16>;
        let sd: [V3<D>; 4] = [0, 1, 2, 3].map(|k| s[k].seed::<16>(3 * k));
        let fd: [D; 4] = [0, 1, 2, 3].map(|k| D::var(f[k], 12 + k));
        let mean = (sd[0] + sd[1] + sd[2] + sd[3]).mul_s(D::constant(0.25));
        let c = sd.map(|p| p - mean);
        let fm = (fd[0] + fd[1] + fd[2] + fd[3]) * D::constant(0.25);
        let mut gram = [[D::constant(0.0); 3]; 3];
        let mut rhs = [D::constant(0.0); 3];
        for k in 0..4 {
            for a in 0..3 {
                rhs[a] += c[k][a] * (fd[k] - fm);
                for b in 0..3 {
                    gram[a][b] += c[k][a] * c[k][b];
                }
            }
        }
        // Cramer's rule
        let det = |m: &[[D; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&gram);
        let mut obj = D::constant(0.0);
        for a in 0..3 {
            let mut m = gram;
            for r in 0..3 {
                m[r][a] = rhs[r];
            }
            obj += det(&m) / d * D::constant(g_bar[a]);
        }
        let lsq = TetLsq::new(s).unwrap();
        let g = lsq.apply(f);
        let (sb, fb) = lsq.backward(f, g, g_bar);
        for k in 0..4 {
            for a in 0..3 {
                assert!((sb[k][a] - obj.d[3 * k + a]).abs() < 1e-9, "s {k} {a}");
            }
            assert!((fb[k] - obj.d[12 + k]).abs() < 1e-9, "f {k}");
        }
    }

    #[test]
    fn site_gradient_of_linear_field() {
        let sites = init_grid_sites(4, 0.05, 3);
        let n = Vec3::new(0.6, 0.0, -0.8);
        let state = SiteState::new(sites.clone(), sites.iter().map(|p| n.dot(*p)).collect()).unwrap();
        let tri = delaunay(&state.positions).unwrap();
        let cache = TetFieldCache::build(&state, &tri);
        for g in cache.site_gradients(&tri) {
            assert!((g - n).norm() < 1e-9);
        }
    }

    #[test]
    fn site_gradient_matches_weighted_sum() {
        let sites = init_grid_sites(4, 0.1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi: Vec<f64> = sites.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let state = SiteState::new(sites, phi).unwrap();
        let tri = delaunay(&state.positions).unwrap();
        let cache = TetFieldCache::build(&state, &tri);
        for i in 0..state.len() {
            let mut num = Vec3::ZERO;
            let mut den = 0.0;
            for (t, tet) in tri.tets.iter().enumerate() {
                if tet.contains(&i) {
                    let p = tet.map(|s| state.positions[s]);
                    let v = crate::geometry::tet_volume(p[0], p[1], p[2], p[3]);
                    let (g, _) = tet_gradient(p, tet.map(|s| state.sdf[s])).unwrap();
                    num += g * v;
                    den += v;
                    assert!((cache.volumes[t] - v).abs() < 1e-15);
                }
            }
            assert!((cache.site_gradient(&tri, i) - num / den).norm() < 1e-12);
        }
    }

    #[test]
    fn heaviside_values() {
        let eps = 0.13;
        assert_eq!(heaviside(0.0, eps), 0.5);
        assert_eq!(heaviside(-2.0 * eps, eps), 0.0);
        assert_eq!(heaviside(2.0 * eps, eps), 1.0);
        let want = 0.75 + 1.0 / (2.0 * PI);
        assert!((heaviside(eps / 2.0, eps) - want).abs() < 1e-12);
        // continuity at the band edges
        assert!((heaviside(eps, eps) - 1.0).abs() < 1e-15);
        assert!(heaviside(-eps, eps).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn heaviside_is_antisymmetric_and_monotone(x in -1.0f64..1.0, dx in 0.0f64..0.5, eps in 0.01f64..0.5) {
            prop_assert!((heaviside(x, eps) + heaviside(-x, eps) - 1.0).abs() < 1e-12);
            prop_assert!(heaviside(x + dx, eps) >= heaviside(x, eps) - 1e-15);
        }

        #[test]
        fn heaviside_derivatives_match_differences(x in -0.3f64..0.3, eps in 0.05f64..0.5) {
            let h = 1e-6;
            let (_, dphi, deps) = heaviside_parts(x, eps);
            if (x.abs() - eps).abs() > 1e-4 {
                let fd = (heaviside(x + h, eps) - heaviside(x - h, eps)) / (2.0 * h);
                let fe = (heaviside(x, eps + h) - heaviside(x, eps - h)) / (2.0 * h);
                prop_assert!((fd - dphi).abs() < 1e-5);
                prop_assert!((fe - deps).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn trimmed_mean_drops_the_longest_five_percent() {
        let mut pts = vec![Vec3::ZERO];
        let mut edges = Vec::new();
        for k in 0..19 {
            pts.push(Vec3::new(1.0, 0.0, 0.0) * (1.0 + k as f64 * 0.0));
            edges.push((0, k + 1));
        }
        pts.push(Vec3::new(100.0, 0.0, 0.0));
        edges.push((0, 20));
        let (m, kept) = trimmed_edge_mean(&pts, &edges);
        assert_eq!(m, 1.0);
        assert_eq!(kept.len(), 19);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..60).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let edges: Vec<(usize, usize)> = (0..59).map(|k| (k, k + 1)).collect();
        let mut lens: Vec<f64> = edges.iter().map(|&(a, b)| pts[a].dist(pts[b])).collect();
        lens.sort_by(f64::total_cmp);
        let keep = 59 - (59.0f64 * 0.05).ceil() as usize;
        let oracle = lens[..keep].iter().sum::<f64>() / keep as f64;
        assert!((trimmed_edge_mean(&pts, &edges).0 - oracle).abs() < 1e-15);
    }

    #[test]
    fn grid_sites() {
        let corners = init_grid_sites(2, 0.0, 0);
        assert_eq!(corners.len(), 8);
        assert!(corners.iter().all(|p| p.x.abs() == 1.0 && p.y.abs() == 1.0 && p.z.abs() == 1.0));
        let a = init_grid_sites(5, 0.005, 42);
        let lattice = init_grid_sites(5, 0.0, 0);
        for (p, q) in a.iter().zip(&lattice) {
            assert!((0..3).all(|k| (p[k] - q[k]).abs() <= 0.005));
        }
        assert_eq!(a, init_grid_sites(5, 0.005, 42));
    }

    #[test]
    fn oracles() {
        let s = SdfOracle::sphere(0.6);
        assert!((s.value(Vec3::ZERO) + 0.6).abs() < 1e-15);
        assert!(s.value(Vec3::new(0.6, 0.0, 0.0)).abs() < 1e-15);
        let n = SdfOracle::noisy(SdfOracle::sphere(0.6), 0.05, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            assert!((n.value(p) - s.value(p)).abs() <= 0.05);
        }
        let t = SdfOracle::torus(0.5, 0.2);
        assert!(t.value(Vec3::new(0.7, 0.0, 0.0)).abs() < 1e-15);
        assert!((t.value(Vec3::ZERO) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn oracle_gradients_match_differences() {
        let oracles = [
            SdfOracle::sphere(0.6),
            SdfOracle::torus(0.5, 0.2),
            SdfOracle::Box {
                center: Vec3::new(0.1, 0.0, 0.0),
                half: Vec3::new(0.3, 0.4, 0.5),
            },
            SdfOracle::noisy(SdfOracle::sphere(0.5), 0.1, 3),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for o in &oracles {
            for _ in 0..50 {
                let p = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let (_, g) = o.eval(p);
                let h = 1e-6;
                for a in 0..3 {
                    let mut e = Vec3::ZERO;
                    e[a] = h;
                    let fd = (o.value(p + e) - o.value(p - e)) / (2.0 * h);
                    assert!((fd - g[a]).abs() < 1e-5, "{o:?} axis {a}");
                }
            }
        }
    }

    #[test]
    fn grid_round_trip_and_interpolation() {
        let n = Vec3::new(0.3, -0.5, 0.2);
        let mut values = Vec::new();
        let dims = [5, 4, 6];
        let (lo, hi) = (Vec3::splat(-1.0), Vec3::new(1.0, 0.5, 1.5));
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = Vec3::new(
                        lo.x + (hi.x - lo.x) * i as f64 / 4.0,
                        lo.y + (hi.y - lo.y) * j as f64 / 3.0,
                        lo.z + (hi.z - lo.z) * k as f64 / 5.0,
                    );
                    values.push(n.dot(p) + 0.1);
                }
            }
        }
        let grid = GridSdf::new(dims, lo, hi, values).unwrap();
        let (v, g) = grid.eval(Vec3::new(0.13, -0.2, 0.7));
        assert!((v - (n.dot(Vec3::new(0.13, -0.2, 0.7)) + 0.1)).abs() < 1e-12);
        assert!((g - n).norm() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.sdf");
        grid.write(&path).unwrap();
        assert_eq!(GridSdf::read(&path).unwrap(), grid);
    }

    #[test]
    fn transformed_oracle_rescales() {
        let base = SdfOracle::Sphere {
            center: Vec3::new(5.0, 0.0, 0.0),
            radius: 2.0,
        };
        let t = SdfOracle::Transformed {
            base: Box::new(base),
            center: Vec3::new(5.0, 0.0, 0.0),
            scale: 0.25,
        };
        assert!((t.value(Vec3::ZERO) + 0.5).abs() < 1e-15);
        assert!(t.value(Vec3::new(0.5, 0.0, 0.0)).abs() < 1e-15);
    }
}
