//! Adaptive site insertion near the zero level, and near-surface site
//! initialization.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::least_aligned_axis;
use crate::error::{Error, Result};
use crate::geometry::Tetrahedralization;
use crate::losses::Evaluation;
use crate::projection::NEWTON_EPS;
use crate::sdf::{SdfOracle, SiteState};
use crate::vec3::Vec3;

pub const DEFAULT_ALPHA_KAPPA: f64 = 0.8;
pub const DEFAULT_OFFSET_RADIUS: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsampleSchedule {
    /// Sites added per step as a fraction of the current count.
    pub fraction_per_step: f64,
    pub max_steps: usize,
    /// Steps are spread evenly over this fraction of the iterations.
    pub active_until: f64,
    pub site_cap: usize,
    pub alpha_kappa: f64,
}

impl Default for UpsampleSchedule {
    fn default() -> Self {
        Self {
            fraction_per_step: 0.10,
            max_steps: 10,
            active_until: 0.80,
            site_cap: 2 * 16 * 16 * 16 * 4,
            alpha_kappa: DEFAULT_ALPHA_KAPPA,
        }
    }
}

impl UpsampleSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction_per_step > 0.0) || !(self.active_until > 0.0 && self.active_until <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid upsampling schedule {self:?}")));
        }
        Ok(())
    }

    /// Iteration at which step `m` (1-based) fires.
    pub fn firing_iteration(&self, m: usize, iterations: usize) -> usize {
        (m as f64 * self.active_until * iterations as f64 / self.max_steps as f64).floor() as usize
    }
}

/// Whether to upsample at iteration `iter`, and how many sites to add.
pub fn should_upsample(
    iter: usize,
    iterations: usize,
    schedule: &UpsampleSchedule,
    steps_done: usize,
    n_sites: usize,
) -> (bool, usize) {
    if steps_done >= schedule.max_steps || n_sites >= schedule.site_cap {
        return (false, 0);
    }
    let fires = (1..=schedule.max_steps).any(|m| schedule.firing_iteration(m, iterations) == iter);
    if !fires {
        return (false, 0);
    }
    let wanted = (schedule.fraction_per_step * n_sites as f64).round() as usize;
    let k = wanted.min(schedule.site_cap - n_sites) / 4 * 4;
    (k > 0, k)
}

/// Distance from site `i` to its nearest Delaunay neighbor; infinite for a
/// site without neighbors.
pub fn local_spacing(i: usize, tri: &Tetrahedralization, positions: &[Vec3]) -> f64 {
    tri.one_ring(i)
        .iter()
        .map(|&j| positions[i].dist(positions[j]))
        .fold(f64::INFINITY, f64::min)
}

pub fn unit_gradient(g: Vec3) -> Vec3 {
    g / (g.norm() + NEWTON_EPS)
}

/// `alpha` times the mean squared difference between the unit gradient of
/// site `i` and those of its neighbors, plus `1 - alpha`.
pub fn curvature_proxy(i: usize, tri: &Tetrahedralization, unit_grads: &[Vec3], alpha: f64) -> f64 {
    let ring = tri.one_ring(i);
    if ring.is_empty() {
        return 1.0 - alpha;
    }
    let mean = ring.iter().map(|&j| unit_grads[i].dist_sq(unit_grads[j])).sum::<f64>() / ring.len() as f64;
    alpha * mean + (1.0 - alpha)
}

#[derive(Clone, Debug)]
pub struct SiteFeatures {
    pub rho: Vec<f64>,
    pub kappa: Vec<f64>,
    pub score: Vec<f64>,
    pub rho_median: f64,
    pub kappa_median: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// `(rho/median rho) * (kappa/median kappa)` for active sites, zero for the
/// rest. Medians are taken over active sites with finite spacing.
pub fn scores(rho: &[f64], kappa: &[f64], active: &[bool]) -> Result<(Vec<f64>, f64, f64)> {
    let idx: Vec<usize> = (0..rho.len()).filter(|&i| active[i] && rho[i].is_finite()).collect();
    if idx.is_empty() {
        return Err(Error::NoActiveSites);
    }
    let rho_med = median(&mut idx.iter().map(|&i| rho[i]).collect::<Vec<_>>());
    let kappa_med = median(&mut idx.iter().map(|&i| kappa[i]).collect::<Vec<_>>());
    let mut out = vec![0.0; rho.len()];
    for &i in &idx {
        out[i] = (rho[i] / rho_med) * (kappa[i] / kappa_med);
    }
    Ok((out, rho_med, kappa_med))
}

/// Spacing, curvature and score of every site of an evaluated state.
pub fn site_features(eval: &Evaluation, positions: &[Vec3], alpha: f64) -> Result<SiteFeatures> {
    let tri = &eval.tri;
    let n = positions.len();
    let unit: Vec<Vec3> = eval.site_grads.iter().map(|&g| unit_gradient(g)).collect();
    let rho: Vec<f64> = (0..n).into_par_iter().map(|i| local_spacing(i, tri, positions)).collect();
    let kappa: Vec<f64> = (0..n).into_par_iter().map(|i| curvature_proxy(i, tri, &unit, alpha)).collect();
    let mut active = vec![false; n];
    for &t in &eval.crossing.crossing_tets {
        for &i in &tri.tets[t] {
            active[i] = true;
        }
    }
    let (score, rho_median, kappa_median) = scores(&rho, &kappa, &active)?;
    Ok(SiteFeatures {
        rho,
        kappa,
        score,
        rho_median,
        kappa_median,
    })
}

/// `k` distinct indices drawn with probability proportional to score,
/// without replacement (exponential-key weighted sampling). When fewer than
/// `k` scores are positive, all of those are returned.
pub fn select_candidates(scores: &[f64], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(i, &s)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / s, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keyed.into_iter().take(k).map(|x| x.1).collect();
    out.sort_unstable();
    out
}

/// Unit directions to the corners of a regular tetrahedron centered at the
/// origin.
pub fn tetra_directions() -> [Vec3; 4] {
    let k = 1.0 / 3f64.sqrt();
    [
        Vec3::new(k, k, k),
        Vec3::new(k, -k, -k),
        Vec3::new(-k, k, -k),
        Vec3::new(-k, -k, k),
    ]
}

/// Orthonormal frame whose third axis is the unit gradient.
pub fn gradient_frame(grad: Vec3) -> [Vec3; 3] {
    let g = unit_gradient(grad);
    if g.norm() < 0.5 {
        return [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)];
    }
    let g = g.normalized();
    let a = least_aligned_axis(g);
    let e1 = (a - g * a.dot(g)).normalized();
    let e2 = g.cross(e1);
    [e1, e2, g]
}

/// Four new sites on a regular tetrahedron of circumradius `rho / 4` around
/// `site`, oriented by the gradient, with first-order extrapolated SDF values.
pub fn insert_tetra(site: Vec3, phi: f64, rho: f64, grad: Vec3) -> [(Vec3, f64); 4] {
    let [e1, e2, e3] = gradient_frame(grad);
    let r = rho / 4.0;
    tetra_directions().map(|d| {
        let p = (site + (e1 * d.x + e2 * d.y + e3 * d.z) * r).clamp(-1.0, 1.0);
        (p, phi + grad.dot(p - site))
    })
}

/// Record of one insertion batch.
#[derive(Clone, Debug)]
pub struct UpsampleEvent {
    pub iteration: usize,
    pub parents: Vec<usize>,
    pub n_before: usize,
    pub n_after: usize,
    /// Inserted sites with their SDF values at insertion time.
    pub inserted: Vec<(Vec3, f64)>,
}

/// Insert `k / 4` tetra groups at score-sampled sites of `state`.
pub fn upsample(
    state: &mut SiteState,
    eval: &Evaluation,
    k: usize,
    alpha: f64,
    seed: u64,
    iteration: usize,
) -> Result<UpsampleEvent> {
    let features = site_features(eval, &state.positions, alpha)?;
    let parents = select_candidates(&features.score, k / 4, seed);
    let mut inserted = Vec::with_capacity(parents.len() * 4);
    for &i in &parents {
        inserted.extend(insert_tetra(
            state.positions[i],
            state.sdf[i],
            features.rho[i],
            eval.site_grads[i],
        ));
    }
    let n_before = state.len();
    state.extend(&inserted);
    Ok(UpsampleEvent {
        iteration,
        parents,
        n_before,
        n_after: state.len(),
        inserted,
    })
}

/// `count` sites near a uniform subsample of the targets, each displaced
/// uniformly within a ball of `offset_radius`, with oracle SDF values.
pub fn near_sampling_init(
    targets: &[Vec3],
    count: usize,
    offset_radius: f64,
    oracle: &SdfOracle,
    seed: u64,
) -> Result<Vec<(Vec3, f64)>> {
    if count > targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{count} near sites requested from {} target points",
            targets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, targets.len(), count).into_vec();
    Ok(picked
        .into_iter()
        .map(|t| {
            let offset = loop {
                let v = Vec3::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
                if v.norm_sq() <= 1.0 {
                    break v * offset_radius;
                }
            };
            let p = (targets[t] + offset).clamp(-1.0, 1.0);
            (p, oracle.value(p))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::delaunay;
    use crate::sdf::init_grid_sites;
    use proptest::{prop_assert, proptest};

    #[test]
    fn schedule_fires_evenly_up_to_eighty_percent() {
        let s = UpsampleSchedule {
            site_cap: usize::MAX,
            ..UpsampleSchedule::default()
        };
        let fired: Vec<usize> = (0..1000).filter(|&it| should_upsample(it, 1000, &s, 0, 4096).0).collect();
        assert_eq!(fired, (1..=10).map(|m| 80 * m).collect::<Vec<_>>());
        assert_eq!(should_upsample(80, 1000, &s, 10, 4096), (false, 0));
        assert_eq!(should_upsample(80, 1000, &s, 0, 4096), (true, 408));
    }

    #[test]
    fn cap_limits_insertions() {
        let s = UpsampleSchedule {
            site_cap: 110,
            ..UpsampleSchedule::default()
        };
        assert_eq!(should_upsample(80, 1000, &s, 0, 110), (false, 0));
        assert_eq!(should_upsample(80, 1000, &s, 0, 103), (true, 4));
        assert_eq!(should_upsample(80, 1000, &s, 0, 108), (false, 0));
    }

    #[test]
    fn lattice_spacing() {
        let sites = init_grid_sites(5, 0.0, 0);
        let tri = delaunay(&sites).unwrap();
        let h = 2.0 / 4.0;
        for i in 0..sites.len() {
            assert!((local_spacing(i, &tri, &sites) - h).abs() < 1e-12);
        }
    }

    #[test]
    fn spacing_matches_ring_brute_force() {
        let sites = init_grid_sites(4, 0.6, 3);
        let tri = delaunay(&sites).unwrap();
        for i in 0..sites.len() {
            let mut best = f64::INFINITY;
            for t in &tri.tets {
                if t.contains(&i) {
                    for &j in t {
                        if j != i {
                            best = best.min(sites[i].dist(sites[j]));
                        }
                    }
                }
            }
            assert_eq!(local_spacing(i, &tri, &sites), best);
        }
    }

    #[test]
    fn curvature_proxy_bounds() {
        let sites = init_grid_sites(3, 0.2, 1);
        let tri = delaunay(&sites).unwrap();
        let flat = vec![Vec3::new(0.0, 0.0, 1.0); sites.len()];
        for i in 0..sites.len() {
            assert!((curvature_proxy(i, &tri, &flat, 0.8) - 0.2).abs() < 1e-15);
        }
        let mut flipped = vec![Vec3::new(0.0, 0.0, -1.0); sites.len()];
        flipped[13] = Vec3::new(0.0, 0.0, 1.0);
        assert!((curvature_proxy(13, &tri, &flipped, 0.8) - 3.4).abs() < 1e-12);
    }

    #[test]
    fn curvature_is_larger_on_smaller_spheres() {
        let sites = init_grid_sites(10, 0.2, 5);
        let tri = delaunay(&sites).unwrap();
        let mean_kappa = |r: f64| {
            let oracle = SdfOracle::sphere(r);
            let unit: Vec<Vec3> = sites.iter().map(|&p| unit_gradient(oracle.eval(p).1)).collect();
            let near: Vec<usize> = (0..sites.len()).filter(|&i| oracle.value(sites[i]).abs() < 0.1).collect();
            near.iter().map(|&i| curvature_proxy(i, &tri, &unit, 0.8)).sum::<f64>() / near.len() as f64
        };
        assert!(mean_kappa(0.3) > mean_kappa(0.8));
    }

    #[test]
    fn score_examples() {
        let rho = [1.0, 2.0, 3.0, 0.5, f64::INFINITY];
        let kappa = [0.2, 0.4, 0.6, 3.0, 1.0];
        let active = [true, true, true, false, true];
        let (s, rm, km) = scores(&rho, &kappa, &active).unwrap();
        assert_eq!((rm, km), (2.0, 0.4));
        assert_eq!(s[1], 1.0);
        assert_eq!(s[3], 0.0);
        assert_eq!(s[4], 0.0);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[2] - 2.25).abs() < 1e-15);
        assert!(matches!(scores(&rho, &kappa, &[false; 5]), Err(Error::NoActiveSites)));
    }

    #[test]
    fn ten_site_score_sum() {
        let rho: Vec<f64> = (1..=10).map(|k| k as f64 * 0.1).collect();
        let kappa: Vec<f64> = (1..=10).map(|k| 0.2 + 0.05 * k as f64).collect();
        let active = [true, false, true, true, false, true, true, true, false, true];
        let (s, _, _) = scores(&rho, &kappa, &active).unwrap();
        // active rho: .1 .3 .4 .6 .7 .8 1.0 -> median .6; kappa median .5
        let want: f64 = (0..10)
            .filter(|&i| active[i])
            .map(|i| (rho[i] / 0.6) * (kappa[i] / 0.5))
            .sum();
        assert!((s.iter().sum::<f64>() - want).abs() < 1e-12);
    }

    #[test]
    fn selection_follows_scores() {
        assert_eq!(select_candidates(&[0.0, 2.0, 0.0], 1, 9), vec![1]);
        assert_eq!(select_candidates(&[1.0; 6], 6, 9), (0..6).collect::<Vec<_>>());
        assert_eq!(select_candidates(&[0.0, 1.0, 1.0], 5, 9), vec![1, 2]);
        let mut hits = 0;
        let n = 100_000;
        for seed in 0..n {
            if select_candidates(&[1.0, 3.0], 1, seed) == vec![1] {
                hits += 1;
            }
        }
        let f = hits as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.01, "{f}");
    }

    #[test]
    fn tetra_insertion_geometry() {
        let g = Vec3::new(0.3, -1.2, 0.4);
        let s = Vec3::new(0.1, 0.2, -0.3);
        let rho = 0.08;
        let new = insert_tetra(s, 0.05, rho, g);
        let edge = (8.0f64 / 3.0).sqrt() * rho / 4.0;
        let mut centroid = Vec3::ZERO;
        for a in 0..4 {
            centroid += new[a].0 * 0.25;
            assert!((new[a].1 - (0.05 + g.dot(new[a].0 - s))).abs() < 1e-15);
            for b in a + 1..4 {
                assert!((new[a].0.dist(new[b].0) - edge).abs() < 1e-12);
            }
        }
        assert!(centroid.dist(s) < 1e-15);
        let frame = gradient_frame(g);
        assert!((frame[2] - g.normalized()).norm() < 1e-7);
        assert!(frame[0].dot(frame[1]).abs() < 1e-15 && frame[0].dot(frame[2]).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_uses_world_axes() {
        let f = gradient_frame(Vec3::ZERO);
        assert_eq!(f[2], Vec3::new(0.0, 0.0, 1.0));
    }

    proptest! {
        #[test]
        fn insertion_keeps_parent_side_on_linear_fields(
            gx in -1.0f64..1.0, gy in -1.0f64..1.0, gz in -1.0f64..1.0,
            off in 0.05f64..0.5, rho in 0.01f64..0.2,
        ) {
            let g = Vec3::new(gx, gy, gz);
            prop_assume_nonzero(g)?;
            let g = g.normalized();
            let s = Vec3::new(0.1, -0.1, 0.2);
            // a site at least rho/4 from the zero level keeps its sign
            let phi = off.max(rho / 4.0 + 1e-9);
            for (p, f) in insert_tetra(s, phi, rho, g) {
                prop_assert!(f > 0.0);
                prop_assert!((f - (phi + g.dot(p - s))).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_ignore_uniform_spacing_scale(k in 0.01f64..100.0) {
            let rho = [0.3, 0.1, 0.7, 0.2];
            let kappa = [0.5, 1.5, 0.9, 0.3];
            let active = [true, true, false, true];
            let a = scores(&rho, &kappa, &active).unwrap().0;
            let b = scores(&rho.map(|r| r * k), &kappa, &active).unwrap().0;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
            }
        }
    }

    fn prop_assume_nonzero(g: Vec3) -> std::result::Result<(), proptest::test_runner::TestCaseError> {
        if g.norm() < 0.1 {
            return Err(proptest::test_runner::TestCaseError::reject("small gradient"));
        }
        Ok(())
    }

    #[test]
    fn near_sites_stay_near_targets() {
        let oracle = SdfOracle::sphere(0.5);
        let targets: Vec<Vec3> = init_grid_sites(6, 0.0, 0)
            .into_iter()
            .map(|p| p.normalized() * 0.5)
            .collect();
        let exact = near_sampling_init(&targets, 50, 0.0, &oracle, 4).unwrap();
        for (p, f) in &exact {
            assert!(targets.iter().any(|t| t.dist(*p) == 0.0));
            assert!(f.abs() < 1e-12);
        }
        let near = near_sampling_init(&targets, 100, 0.02, &oracle, 4).unwrap();
        for (p, _) in &near {
            assert!(targets.iter().any(|t| t.dist(*p) <= 0.02 + 1e-15));
        }
        assert!(near_sampling_init(&targets, 1000, 0.02, &oracle, 4).is_err());
    }
}
