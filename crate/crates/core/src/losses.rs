//! The four loss terms and the forward evaluation of the full pipeline:
//! triangulate, build per-tet fields, project onto the zero level, score.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{delaunay, Tetrahedralization};
use crate::neighbors::NearestNeighbors;
use crate::projection::{
    fit_plane, inside_tet, project_midpoint, project_site, project_vertex_barycentric, project_vertex_robust, Plane,
    ProjectionMode, ZeroCrossingSet,
};
use crate::sdf::{heaviside, heaviside_piece, trimmed_edge_mean, HeavisidePiece, SiteState, TetFieldCache, TetLsq};
use crate::vec3::Vec3;

/// Multipliers of the loss terms in the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cd: f64,
    pub cvt: f64,
    pub eik: f64,
    pub mbmc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cd: 1.0,
            cvt: 0.1,
            eik: 0.02,
            mbmc: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        cd: 0.0,
        cvt: 0.0,
        eik: 0.0,
        mbmc: 0.0,
    };

    pub fn only_cd() -> Self {
        Self { cd: 1.0, ..Self::ZERO }
    }

    pub fn only_cvt() -> Self {
        Self { cvt: 1.0, ..Self::ZERO }
    }

    pub fn only_eik() -> Self {
        Self { eik: 1.0, ..Self::ZERO }
    }

    pub fn only_mbmc() -> Self {
        Self { mbmc: 1.0, ..Self::ZERO }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferMode {
    /// Half the mean over targets plus half the mean over samples.
    #[default]
    Symmetric,
    /// Mean over targets of the squared distance to the nearest sample.
    OneSided,
}

impl FromStr for ChamferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "one-sided" => Ok(Self::OneSided),
            _ => Err(Error::InvalidArgument(format!(
                "unknown chamfer mode `{s}` (symmetric, one-sided)"
            ))),
        }
    }
}

impl fmt::Display for ChamferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Symmetric => "symmetric",
            Self::OneSided => "one-sided",
        })
    }
}

/// Everything besides the state that the loss depends on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub projection: ProjectionMode,
    pub chamfer: ChamferMode,
    /// Include projected crossing-edge midpoints in the Chamfer samples.
    pub use_midpoints: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            projection: ProjectionMode::Robust,
            chamfer: ChamferMode::Symmetric,
            use_midpoints: true,
        }
    }
}

/// Loss breakdown of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cd: f64,
    pub cvt: f64,
    pub eik: f64,
    pub mbmc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossTerms {
    pub fn new(cd: f64, cvt: f64, eik: f64, mbmc: f64, weights: LossWeights) -> Self {
        let total = weights.cd * cd + weights.cvt * cvt + weights.eik * eik + weights.mbmc * mbmc;
        Self {
            cd,
            cvt,
            eik,
            mbmc,
            total,
            weights,
        }
    }
}

/// Target point cloud with its nearest-neighbor index.
#[derive(Clone, Debug)]
pub struct Targets {
    index: NearestNeighbors,
}

impl Targets {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("target point cloud is empty".into()));
        }
        Ok(Self {
            index: NearestNeighbors::new(points),
        })
    }

    pub fn points(&self) -> &[Vec3] {
        self.index.points()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &NearestNeighbors {
        &self.index
    }

}

/// Where a Chamfer sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    /// Projected dual vertex of the `k`-th crossing tetrahedron.
    Vertex(usize),
    /// Projected midpoint of the `k`-th crossing edge.
    Midpoint(usize),
}

/// Nearest-neighbor assignments of one Chamfer evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChamferPairs {
    pub target_to_sample: Vec<usize>,
    pub sample_to_target: Vec<usize>,
}

/// Chamfer loss between `samples` and the targets, with its assignments.
pub fn chamfer_with_pairs(samples: &[Vec3], targets: &Targets, mode: ChamferMode) -> Result<(f64, ChamferPairs)> {
    if samples.is_empty() {
        return Err(Error::EmptyReconstruction { iteration: None });
    }
    let sample_index = NearestNeighbors::new(samples);
    let t2s = sample_index.nearest_all(targets.points());
    let forward = t2s.iter().map(|p| p.1).sum::<f64>() / t2s.len() as f64;
    let (value, s2t) = match mode {
        ChamferMode::OneSided => (forward, Vec::new()),
        ChamferMode::Symmetric => {
            let s2t = targets.index().nearest_all(samples);
            let backward = s2t.iter().map(|p| p.1).sum::<f64>() / s2t.len() as f64;
            (0.5 * forward + 0.5 * backward, s2t)
        }
    };
    Ok((
        value,
        ChamferPairs {
            target_to_sample: t2s.iter().map(|p| p.0).collect(),
            sample_to_target: s2t.iter().map(|p| p.0).collect(),
        },
    ))
}

pub fn chamfer_loss(samples: &[Vec3], targets: &[Vec3], mode: ChamferMode) -> Result<f64> {
    Ok(chamfer_with_pairs(samples, &Targets::new(targets)?, mode)?.0)
}

/// Mean of the dual vertices of the valid tetrahedra incident to site `i`;
/// the site itself when it has none.
pub fn approx_cell_centroid(
    i: usize,
    tri: &Tetrahedralization,
    invalid: &[bool],
    dual_vertices: &[Vec3],
    site: Vec3,
) -> Vec3 {
    let mut sum = Vec3::ZERO;
    let mut count = 0usize;
    for &t in &tri.site_to_tets[i] {
        if !invalid[t] {
            sum += dual_vertices[t];
            count += 1;
        }
    }
    if count == 0 {
        site
    } else {
        sum / count as f64
    }
}

/// Mean (unsquared) distance of each site to its centroid.
pub fn cvt_loss(positions: &[Vec3], centroids: &[Vec3]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    positions.iter().zip(centroids).map(|(s, c)| s.dist(*c)).sum::<f64>() / positions.len() as f64
}

/// Volume-weighted deviation of the site gradients from unit norm.
pub fn eikonal_loss(tri: &Tetrahedralization, volumes: &[f64], site_grads: &[Vec3]) -> f64 {
    if tri.is_empty() {
        return 0.0;
    }
    let sum: f64 = tri
        .tets
        .iter()
        .zip(volumes)
        .map(|(t, v)| v * t.iter().map(|&i| (site_grads[i].norm_sq() - 1.0).powi(2)).sum::<f64>())
        .sum();
    sum / (4.0 * tri.len() as f64)
}

/// Gradient of the Heaviside field over one tetrahedron.
pub fn mean_curvature_grad(lsq: &TetLsq, h: [f64; 4]) -> Vec3 {
    lsq.apply(h)
}

/// Per-tetrahedron Heaviside gradients (zero for invalid tetrahedra).
pub fn mbmc_gradients(tri: &Tetrahedralization, cache: &TetFieldCache, h: &[f64]) -> Vec<Vec3> {
    tri.tets
        .iter()
        .enumerate()
        .map(|(t, tet)| match &cache.lsq[t] {
            Some(l) if !cache.invalid[t] => mean_curvature_grad(l, tet.map(|i| h[i])),
            _ => Vec3::ZERO,
        })
        .collect()
}

/// Volume-weighted mean norm of the Heaviside gradients.
pub fn mbmc_loss(volumes: &[f64], mbmc_grads: &[Vec3]) -> f64 {
    if volumes.is_empty() {
        return 0.0;
    }
    volumes.iter().zip(mbmc_grads).map(|(v, g)| v * g.norm()).sum::<f64>() / volumes.len() as f64
}

/// Forward pass over one state snapshot, keeping every intermediate the
/// backward pass needs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub config: LossConfig,
    pub tri: Tetrahedralization,
    pub cache: TetFieldCache,
    pub site_grads: Vec<Vec3>,
    pub eps_h: f64,
    /// Indices into `tri.edges` that entered the trimmed mean.
    pub kept_edges: Vec<usize>,
    pub heaviside: Vec<f64>,
    pub heaviside_pieces: Vec<HeavisidePiece>,
    pub mbmc_grads: Vec<Vec3>,
    pub crossing: ZeroCrossingSet,
    /// Position of each tet in `crossing.crossing_tets`.
    pub crossing_slot: Vec<Option<usize>>,
    /// Every site projected onto the zero level.
    pub projected_sites: Vec<Vec3>,
    /// Per crossing tet: projected dual vertex.
    pub projected_vertices: Vec<Vec3>,
    /// Per crossing tet: fitted plane when the robust projection was used.
    pub planes: Vec<Option<Plane>>,
    /// Per crossing edge: projected midpoint.
    pub projected_midpoints: Vec<Vec3>,
    pub samples: Vec<Vec3>,
    pub sources: Vec<SampleSource>,
    pub pairs: ChamferPairs,
    /// Per tet: projected dual vertex for crossing tets, circumcenter otherwise.
    pub dual_vertices: Vec<Vec3>,
    pub centroids: Vec<Vec3>,
    pub terms: LossTerms,
}

/// Triangulate `state` and evaluate the total loss.
pub fn evaluate(state: &SiteState, targets: &Targets, config: &LossConfig) -> Result<Evaluation> {
    let tri = delaunay(&state.positions)?;
    evaluate_with(state, tri, targets, config)
}

pub fn evaluate_with(
    state: &SiteState,
    tri: Tetrahedralization,
    targets: &Targets,
    config: &LossConfig,
) -> Result<Evaluation> {
    let pos = &state.positions;
    let phi = &state.sdf;
    let cache = TetFieldCache::build(state, &tri);
    let site_grads = cache.site_gradients(&tri);
    let (eps_h, kept_edges) = trimmed_edge_mean(pos, &tri.edges);
    let heaviside_vals: Vec<f64> = phi.iter().map(|&f| heaviside(f, eps_h)).collect();
    let heaviside_pieces = phi.iter().map(|&f| heaviside_piece(f, eps_h)).collect();
    let mbmc_grads = mbmc_gradients(&tri, &cache, &heaviside_vals);

    let crossing = ZeroCrossingSet::new(&tri, phi, &cache.invalid);
    if crossing.is_empty() {
        return Err(Error::EmptyReconstruction { iteration: None });
    }
    let mut crossing_slot = vec![None; tri.len()];
    for (k, &t) in crossing.crossing_tets.iter().enumerate() {
        crossing_slot[t] = Some(k);
    }
    let projected_sites: Vec<Vec3> = (0..state.len())
        .map(|i| project_site(pos[i], phi[i], site_grads[i]))
        .collect();

    let projected: Vec<(Vec3, Option<Plane>)> = crossing
        .crossing_tets
        .par_iter()
        .map(|&t| {
            let tet = tri.tets[t];
            let v = cache.circumcenters[t];
            let s = tet.map(|i| pos[i]);
            let robust = match config.projection {
                ProjectionMode::Robust => true,
                ProjectionMode::Barycentric => false,
                ProjectionMode::Hybrid => !inside_tet(v, s),
            };
            if robust {
                let hint = tet.iter().fold(Vec3::ZERO, |a, &i| a + site_grads[i]);
                let plane = fit_plane(tet.map(|i| projected_sites[i]), hint);
                (project_vertex_robust(v, &plane), Some(plane))
            } else {
                let p = project_vertex_barycentric(v, s, tet.map(|i| phi[i]), tet.map(|i| site_grads[i]));
                (p, None)
            }
        })
        .collect();
    let (projected_vertices, planes): (Vec<Vec3>, Vec<Option<Plane>>) = projected.into_iter().unzip();

    let projected_midpoints: Vec<Vec3> = crossing
        .crossing_edges
        .iter()
        .map(|&(i, j)| project_midpoint(pos[i], pos[j], phi[i], phi[j], site_grads[i], site_grads[j]))
        .collect();

    let mut samples = projected_vertices.clone();
    let mut sources: Vec<SampleSource> = (0..samples.len()).map(SampleSource::Vertex).collect();
    if config.use_midpoints {
        samples.extend_from_slice(&projected_midpoints);
        sources.extend((0..projected_midpoints.len()).map(SampleSource::Midpoint));
    }
    let (cd, pairs) = chamfer_with_pairs(&samples, targets, config.chamfer)?;

    let dual_vertices: Vec<Vec3> = (0..tri.len())
        .map(|t| match crossing_slot[t] {
            Some(k) => projected_vertices[k],
            None => cache.circumcenters[t],
        })
        .collect();
    let centroids: Vec<Vec3> = (0..state.len())
        .map(|i| approx_cell_centroid(i, &tri, &cache.invalid, &dual_vertices, pos[i]))
        .collect();

    let cvt = cvt_loss(pos, &centroids);
    let eik = eikonal_loss(&tri, &cache.volumes, &site_grads);
    let mbmc = mbmc_loss(&cache.volumes, &mbmc_grads);
    let terms = LossTerms::new(cd, cvt, eik, mbmc, config.weights);

    Ok(Evaluation {
        config: *config,
        tri,
        cache,
        site_grads,
        eps_h,
        kept_edges,
        heaviside: heaviside_vals,
        heaviside_pieces,
        mbmc_grads,
        crossing,
        crossing_slot,
        projected_sites,
        projected_vertices,
        planes,
        projected_midpoints,
        samples,
        sources,
        pairs,
        dual_vertices,
        centroids,
        terms,
    })
}

/// Loss breakdown of `state` against `targets`.
pub fn total_loss(state: &SiteState, tri: &Tetrahedralization, targets: &Targets, config: &LossConfig) -> Result<LossTerms> {
    Ok(evaluate_with(state, tri.clone(), targets, config)?.terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tet_volume;
    use crate::sdf::{heaviside_parts, init_grid_sites, init_sdf, SdfOracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn sphere_fixture(seed: u64) -> (SiteState, Targets) {
        let sites = init_grid_sites(5, 0.3, seed);
        let sdf = init_sdf(&sites, &SdfOracle::sphere(0.55));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<Vec3> = random_points(300, &mut rng).iter().map(|p| p.normalized() * 0.5).collect();
        (SiteState::new(sites, sdf).unwrap(), Targets::new(&t).unwrap())
    }

    #[test]
    fn chamfer_of_a_set_with_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_points(40, &mut rng);
        assert_eq!(chamfer_loss(&x, &x, ChamferMode::Symmetric).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_single_pair() {
        let c = chamfer_loss(&[Vec3::ZERO], &[Vec3::new(0.3, 0.0, 0.0)], ChamferMode::Symmetric).unwrap();
        assert!((c - 0.09).abs() < 1e-15);
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [50, 700] {
            let s = random_points(n, &mut rng);
            let t = random_points(n + 13, &mut rng);
            let min_to = |p: &Vec3, set: &[Vec3]| set.iter().map(|q| p.dist_sq(*q)).fold(f64::INFINITY, f64::min);
            let fwd = t.iter().map(|p| min_to(p, &s)).sum::<f64>() / t.len() as f64;
            let bwd = s.iter().map(|p| min_to(p, &t)).sum::<f64>() / s.len() as f64;
            let sym = chamfer_loss(&s, &t, ChamferMode::Symmetric).unwrap();
            let one = chamfer_loss(&s, &t, ChamferMode::OneSided).unwrap();
            assert!((sym - 0.5 * (fwd + bwd)).abs() < 1e-12);
            assert!((one - fwd).abs() < 1e-12);
        }
    }

    #[test]
    fn chamfer_rejects_empty_samples() {
        assert!(matches!(
            chamfer_loss(&[], &[Vec3::ZERO], ChamferMode::Symmetric),
            Err(Error::EmptyReconstruction { .. })
        ));
    }

    #[test]
    fn cvt_single_displaced_site() {
        let c: Vec<Vec3> = (0..8).map(|k| Vec3::splat(k as f64 * 0.1)).collect();
        let mut s = c.clone();
        s[3].y += 0.2;
        assert!((cvt_loss(&s, &c) - 0.025).abs() < 1e-15);
        assert_eq!(cvt_loss(&c, &c), 0.0);
    }

    #[test]
    fn centroid_is_the_mean_of_incident_dual_vertices() {
        let (state, targets) = sphere_fixture(1);
        let e = evaluate(&state, &targets, &LossConfig::default()).unwrap();
        for i in 0..state.len() {
            let ts: Vec<usize> = (0..e.tri.len())
                .filter(|&t| e.tri.tets[t].contains(&i) && !e.cache.invalid[t])
                .collect();
            let mut sum = Vec3::ZERO;
            for &t in &ts {
                sum += match e.crossing.crossing_tets.iter().position(|&c| c == t) {
                    Some(k) => e.projected_vertices[k],
                    None => e.cache.circumcenters[t],
                };
            }
            let want = if ts.is_empty() { state.positions[i] } else { sum / ts.len() as f64 };
            assert!(e.centroids[i].dist(want) < 1e-14);
        }
    }

    #[test]
    fn eikonal_vanishes_on_unit_linear_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sites = init_grid_sites(4, 0.4, 4);
        let dir = random_points(1, &mut rng)[0].normalized();
        let sdf: Vec<f64> = sites.iter().map(|p| p.dot(dir) + 0.1).collect();
        let state = SiteState::new(sites, sdf).unwrap();
        let tri = delaunay(&state.positions).unwrap();
        let cache = TetFieldCache::build(&state, &tri);
        let g = cache.site_gradients(&tri);
        assert!(eikonal_loss(&tri, &cache.volumes, &g) < 1e-12);
    }

    #[test]
    fn eikonal_of_a_constant_field_is_the_mean_volume() {
        let sites = init_grid_sites(4, 0.4, 7);
        let state = SiteState::new(sites.clone(), vec![0.3; sites.len()]).unwrap();
        let tri = delaunay(&sites).unwrap();
        let cache = TetFieldCache::build(&state, &tri);
        let g = cache.site_gradients(&tri);
        let mean_vol = cache.volumes.iter().sum::<f64>() / tri.len() as f64;
        assert!((eikonal_loss(&tri, &cache.volumes, &g) - mean_vol).abs() < 1e-14);
    }

    #[test]
    fn eikonal_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sites = init_grid_sites(4, 0.4, 8);
        let sdf: Vec<f64> = sites.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let state = SiteState::new(sites.clone(), sdf).unwrap();
        let tri = delaunay(&sites).unwrap();
        let cache = TetFieldCache::build(&state, &tri);
        let g = cache.site_gradients(&tri);
        let mut want = 0.0;
        for t in &tri.tets {
            let v = tet_volume(sites[t[0]], sites[t[1]], sites[t[2]], sites[t[3]]).abs();
            for &i in t {
                want += v * (g[i].norm_sq() - 1.0).powi(2);
            }
        }
        want /= 4.0 * tri.len() as f64;
        assert!((eikonal_loss(&tri, &cache.volumes, &g) - want).abs() < 1e-12);
    }

    #[test]
    fn mbmc_is_zero_outside_the_band() {
        let sites = init_grid_sites(4, 0.4, 3);
        let state = SiteState::new(sites.clone(), vec![5.0; sites.len()]).unwrap();
        let tri = delaunay(&sites).unwrap();
        let cache = TetFieldCache::build(&state, &tri);
        let eps = trimmed_edge_mean(&sites, &tri.edges).0;
        let h: Vec<f64> = state.sdf.iter().map(|&f| heaviside(f, eps)).collect();
        let g = mbmc_gradients(&tri, &cache, &h);
        assert!(g.iter().all(|v| *v == Vec3::ZERO));
        assert_eq!(mbmc_loss(&cache.volumes, &g), 0.0);
    }

    #[test]
    fn heaviside_gradient_is_parallel_to_the_field_gradient() {
        // inside the band H is a monotone function of a linear phi, so its
        // least-squares gradient points the same way up to the curvature of H,
        // which vanishes at the zero crossing
        let s = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1e-5, 0.0, 0.0),
            Vec3::new(0.0, 1e-5, 0.0),
            Vec3::new(0.0, 0.0, 1e-5),
        ];
        let dir = Vec3::new(0.3, -0.5, 0.8).normalized();
        let mean = (s[0] + s[1] + s[2] + s[3]) * 0.25;
        let phi = s.map(|p| (p - mean).dot(dir) + 1e-8);
        let lsq = TetLsq::new(s).unwrap();
        let h = phi.map(|f| heaviside(f, 0.1));
        let gh = mean_curvature_grad(&lsq, h);
        let gp = lsq.apply(phi);
        let angle = (gh.cross(gp).norm() / (gh.norm() * gp.norm())).asin();
        assert!(angle < 1e-6, "angle {angle}");
        assert!(heaviside_parts(phi[0], 0.1).1 > 0.0);
    }

    #[test]
    fn mbmc_matches_an_independent_least_squares_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let s: [Vec3; 4] = std::array::from_fn(|_| random_points(1, &mut rng)[0]);
            let h: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            let Ok(lsq) = TetLsq::new(s) else { continue };
            // normal equations solved with nalgebra
            let mean = (s[0] + s[1] + s[2] + s[3]) * 0.25;
            let hm = h.iter().sum::<f64>() / 4.0;
            let a = nalgebra::Matrix4x3::from_fn(|r, c| (s[r] - mean)[c]);
            let b = nalgebra::Vector4::from_fn(|r, _| h[r] - hm);
            let x = (a.transpose() * a).try_inverse().unwrap() * a.transpose() * b;
            let g = mean_curvature_grad(&lsq, h);
            assert!((g - Vec3::new(x[0], x[1], x[2])).norm() < 1e-8 * (1.0 + g.norm()));
        }
    }

    #[test]
    fn mbmc_scales_with_volume() {
        let vols = [0.1, 0.2, 0.3];
        let g = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0), Vec3::ZERO];
        let doubled = vols.map(|v| 2.0 * v);
        assert!((mbmc_loss(&doubled, &g) - 2.0 * mbmc_loss(&vols, &g)).abs() < 1e-15);
        assert!((mbmc_loss(&vols, &g) - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn breakdown_matches_standalone_terms() {
        let (state, targets) = sphere_fixture(2);
        let e = evaluate(&state, &targets, &LossConfig::default()).unwrap();
        let cd = chamfer_loss(&e.samples, targets.points(), ChamferMode::Symmetric).unwrap();
        assert_eq!(e.terms.cd, cd);
        assert_eq!(e.terms.cvt, cvt_loss(&state.positions, &e.centroids));
        assert_eq!(e.terms.eik, eikonal_loss(&e.tri, &e.cache.volumes, &e.site_grads));
        assert_eq!(e.terms.mbmc, mbmc_loss(&e.cache.volumes, &e.mbmc_grads));
        let t = e.terms;
        let want = t.cd + 0.1 * t.cvt + 0.02 * t.eik + 0.1 * t.mbmc;
        assert!((t.total - want).abs() < 1e-15);
        assert!(t.cd >= 0.0 && t.cvt >= 0.0 && t.eik >= 0.0 && t.mbmc >= 0.0);
        assert_eq!(e.samples.len(), e.crossing.crossing_tets.len() + e.crossing.crossing_edges.len());
    }

    #[test]
    fn zero_weights_leave_only_chamfer() {
        let (state, targets) = sphere_fixture(3);
        let tri = delaunay(&state.positions).unwrap();
        let config = LossConfig {
            weights: LossWeights::only_cd(),
            ..LossConfig::default()
        };
        let t = total_loss(&state, &tri, &targets, &config).unwrap();
        assert_eq!(t.total, t.cd);
    }

    #[test]
    fn no_zero_crossing_is_an_empty_reconstruction() {
        let sites = init_grid_sites(4, 0.2, 1);
        let state = SiteState::new(sites.clone(), vec![1.0; sites.len()]).unwrap();
        let targets = Targets::new(&[Vec3::ZERO]).unwrap();
        assert!(matches!(
            evaluate(&state, &targets, &LossConfig::default()),
            Err(Error::EmptyReconstruction { .. })
        ));
    }

    #[test]
    fn total_is_invariant_under_site_permutation() {
        let (state, targets) = sphere_fixture(4);
        let n = state.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(3, 40);
        let permuted = SiteState::new(
            perm.iter().map(|&i| state.positions[i]).collect(),
            perm.iter().map(|&i| state.sdf[i]).collect(),
        )
        .unwrap();
        let a = evaluate(&state, &targets, &LossConfig::default()).unwrap().terms;
        let b = evaluate(&permuted, &targets, &LossConfig::default()).unwrap().terms;
        for (x, y) in [(a.cd, b.cd), (a.cvt, b.cvt), (a.eik, b.eik), (a.mbmc, b.mbmc)] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn moving_sites_to_centroids_contracts_cvt() {
        // The averaged dual vertices are not the exact cell centroids, so the
        // sequence has small upward steps; it still contracts overall. Hull
        // cells are unbounded, so the moving sites sit inside a fixed frame.
        for seed in 0..5 {
            let inner: Vec<Vec3> = init_grid_sites(4, 0.5, seed).iter().map(|p| *p * 0.6).collect();
            let n = inner.len();
            let mut pos = inner;
            pos.extend(
                init_grid_sites(6, 0.0, 0)
                    .into_iter()
                    .filter(|p| (0..3).any(|a| p[a].abs() > 0.99)),
            );
            let mut state = SiteState::new(pos.clone(), vec![1.0; pos.len()]).unwrap();
            let mut hist = Vec::new();
            for _ in 0..20 {
                let tri = delaunay(&state.positions).unwrap();
                let cache = TetFieldCache::build(&state, &tri);
                let cent: Vec<Vec3> = (0..n)
                    .map(|i| approx_cell_centroid(i, &tri, &cache.invalid, &cache.circumcenters, state.positions[i]))
                    .collect();
                hist.push(cvt_loss(&state.positions[..n], &cent));
                state.positions[..n].copy_from_slice(&cent);
            }
            assert!(hist[1] < hist[0] && hist[2] < hist[1], "{hist:?}");
            assert!(hist[19] < hist[0] / 10.0, "{hist:?}");
        }
    }
}
