//! Surface sampling and the evaluation metrics: Chamfer, F1, normal
//! consistency and Hausdorff distance between sampled surfaces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::neighbors::NearestNeighbors;
use crate::vec3::Vec3;

pub const METRIC_SCALE: f64 = 1e5;
pub const DEFAULT_TAU: f64 = 0.003;
pub const DEFAULT_EVAL_SAMPLES: usize = 100_000;

/// A surface sample with its unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub point: Vec3,
    pub normal: Vec3,
}

/// `n` area-weighted uniform samples, each carrying its triangle's normal.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.area(t);
        cdf.push(acc);
    }
    if mesh.is_empty() || !(acc > 0.0) {
        return Err(Error::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Vec3> = (0..mesh.triangles.len())
        .map(|t| mesh.triangle_cross(t).normalized())
        .collect();
    Ok((0..n)
        .map(|_| {
            let r = rng.gen_range(0.0..acc);
            let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let su = u.sqrt();
            Sample {
                point: a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v),
                normal: normals[t],
            }
        })
        .collect())
}

fn points(s: &[Sample]) -> Vec<Vec3> {
    s.iter().map(|x| x.point).collect()
}

/// Nearest neighbors in both directions: `ab[i]` is the match in `b` of
/// `a[i]` with its squared distance, and `ba` the reverse.
struct Matches {
    ab: Vec<(usize, f64)>,
    ba: Vec<(usize, f64)>,
}

impl Matches {
    fn new(a: &[Vec3], b: &[Vec3]) -> Self {
        let (ab, ba) = rayon::join(
            || NearestNeighbors::new(b).nearest_all(a),
            || NearestNeighbors::new(a).nearest_all(b),
        );
        Self { ab, ba }
    }

    fn chamfer(&self) -> f64 {
        0.5 * (mean_sq(&self.ab) + mean_sq(&self.ba)) * METRIC_SCALE
    }

    fn f1(&self, tau: f64) -> f64 {
        let within = |m: &[(usize, f64)]| m.iter().filter(|p| p.1.sqrt() <= tau).count() as f64 / m.len() as f64;
        let (precision, recall) = (within(&self.ab), within(&self.ba));
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    fn normal_consistency(&self, a: &[Sample], b: &[Sample]) -> f64 {
        let one = |from: &[Sample], to: &[Sample], m: &[(usize, f64)]| {
            from.iter().zip(m).map(|(s, &(j, _))| s.normal.dot(to[j].normal).abs()).sum::<f64>() / from.len() as f64
        };
        0.5 * (one(a, b, &self.ab) + one(b, a, &self.ba))
    }

    fn hausdorff(&self) -> f64 {
        let worst = |m: &[(usize, f64)]| m.iter().map(|p| p.1).fold(0.0, f64::max);
        worst(&self.ab).max(worst(&self.ba)).sqrt() * METRIC_SCALE
    }
}

fn mean_sq(m: &[(usize, f64)]) -> f64 {
    m.iter().map(|p| p.1).sum::<f64>() / m.len() as f64
}

/// Symmetric mean squared nearest-neighbor distance, scaled by 1e5.
pub fn chamfer_metric(a: &[Vec3], b: &[Vec3]) -> f64 {
    Matches::new(a, b).chamfer()
}

/// Harmonic mean of the fraction of `a` within `tau` of `b` and vice versa.
pub fn f1_score(a: &[Vec3], b: &[Vec3], tau: f64) -> f64 {
    Matches::new(a, b).f1(tau)
}

/// Mean over both directions of `|n_a . n_b|` with `b` the nearest sample.
pub fn normal_consistency(a: &[Sample], b: &[Sample]) -> f64 {
    Matches::new(&points(a), &points(b)).normal_consistency(a, b)
}

/// Largest nearest-neighbor distance in either direction, scaled by 1e5.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> f64 {
    Matches::new(a, b).hausdorff()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd_x1e5: f64,
    pub f1_at_tau: f64,
    pub nc: f64,
    pub hd_x1e5: f64,
    pub n_samples: usize,
    pub tau: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "cd_x1e5,f1,nc,hd_x1e5,n_samples,tau";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.cd_x1e5, self.f1_at_tau, self.nc, self.hd_x1e5, self.n_samples, self.tau
        )
    }
}

/// All four metrics between two sample sets.
pub fn compare_samples(a: &[Sample], b: &[Sample], tau: f64) -> MetricsReport {
    let m = Matches::new(&points(a), &points(b));
    MetricsReport {
        cd_x1e5: m.chamfer(),
        f1_at_tau: m.f1(tau),
        nc: m.normal_consistency(a, b),
        hd_x1e5: m.hausdorff(),
        n_samples: a.len().min(b.len()),
        tau,
    }
}

/// Sample both meshes with `n` points and compare.
pub fn compare_meshes(recon: &TriangleMesh, reference: &TriangleMesh, n: usize, tau: f64, seed: u64) -> Result<MetricsReport> {
    let a = sample_surface(recon, n, seed)?;
    let b = sample_surface(reference, n, seed.wrapping_add(1))?;
    Ok(compare_samples(&a, &b, tau))
}

/// Uniform samples of a sphere with exact normals.
pub fn sphere_samples(center: Vec3, radius: f64, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let d = Vec3::new(r * t.cos(), r * t.sin(), z);
            Sample {
                point: center + d * radius,
                normal: d,
            }
        })
        .collect()
}

/// Area-uniform samples of the torus around the z axis through `center`.
pub fn torus_samples(center: Vec3, major: f64, minor: f64, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        // the area element is proportional to the distance from the axis
        if rng.gen_range(0.0..major + minor) > major + minor * v.cos() {
            continue;
        }
        let normal = Vec3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
        let ring = Vec3::new(major * u.cos(), major * u.sin(), 0.0);
        out.push(Sample {
            point: center + ring + normal * minor,
            normal,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::icosphere;
    use proptest::{prop_assert, proptest};

    fn brute_min(p: Vec3, set: &[Vec3]) -> f64 {
        set.iter().map(|q| p.dist_sq(*q)).fold(f64::INFINITY, f64::min)
    }

    fn random(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn two_triangles() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Vec3::ZERO,
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(5.0, 0.0, 0.0),
                Vec3::new(8.0, 0.0, 0.0),
                Vec3::new(5.0, 0.0, 2.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
            provenance: vec![0, 1],
        }
    }

    #[test]
    fn samples_follow_area() {
        let m = two_triangles();
        let s = sample_surface(&m, 100_000, 3).unwrap();
        let first = s.iter().filter(|x| x.point.x < 2.0).count() as f64 / s.len() as f64;
        assert!((first - 0.25).abs() < 0.02 * 0.25 * 4.0, "{first}");
        for x in &s {
            if x.point.x < 2.0 {
                assert_eq!(x.point.z, 0.0);
                assert!(x.point.x >= 0.0 && x.point.y >= 0.0 && x.point.x + x.point.y / 2.0 <= 1.0 + 1e-12);
                assert_eq!(x.normal, Vec3::new(0.0, 0.0, 1.0));
            }
        }
        assert_eq!(s, sample_surface(&m, 100_000, 3).unwrap());
        assert!(matches!(sample_surface(&TriangleMesh::default(), 10, 0), Err(Error::EmptyMesh)));
    }

    #[test]
    fn chamfer_and_hausdorff_examples() {
        let a = random(30, 1);
        assert_eq!(chamfer_metric(&a, &a), 0.0);
        assert_eq!(hausdorff(&a, &a), 0.0);
        let p = [Vec3::ZERO];
        let q = [Vec3::new(0.01, 0.0, 0.0)];
        assert!((chamfer_metric(&p, &q) - 10.0).abs() < 1e-9);
        let mut b = a.clone();
        b.push(a[0] + Vec3::new(0.0, 0.0, 0.01));
        assert!((hausdorff(&a, &b) - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn metrics_match_brute_force() {
        let a = random(60, 2);
        let b = random(45, 3);
        let ab: Vec<f64> = a.iter().map(|p| brute_min(*p, &b)).collect();
        let ba: Vec<f64> = b.iter().map(|p| brute_min(*p, &a)).collect();
        let cd = 0.5 * (ab.iter().sum::<f64>() / 60.0 + ba.iter().sum::<f64>() / 45.0) * 1e5;
        assert!((chamfer_metric(&a, &b) - cd).abs() < 1e-9);
        let hd = ab.iter().chain(&ba).fold(0.0f64, |m, &d| m.max(d)).sqrt() * 1e5;
        assert!((hausdorff(&a, &b) - hd).abs() < 1e-9);
    }

    #[test]
    fn f1_examples() {
        let a = random(40, 4);
        assert_eq!(f1_score(&a, &a, 0.003), 1.0);
        let far: Vec<Vec3> = a.iter().map(|p| *p + Vec3::splat(10.0)).collect();
        assert_eq!(f1_score(&a, &far, 0.003), 0.0);
        // every point of `half` is in `a`; only half of `a` is near `half`
        let spread: Vec<Vec3> = (0..40).map(|k| Vec3::new(k as f64, 0.0, 0.0)).collect();
        let half = spread[..20].to_vec();
        assert!((f1_score(&half, &spread, 0.003) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normal_consistency_examples() {
        let m = icosphere(0.5, 2);
        let s = sample_surface(&m, 2000, 1).unwrap();
        assert!((normal_consistency(&s, &s) - 1.0).abs() < 1e-12);
        let flipped: Vec<Sample> = s.iter().map(|x| Sample { normal: -x.normal, ..*x }).collect();
        assert!((normal_consistency(&s, &flipped) - 1.0).abs() < 1e-12);
        let plane = |z: f64, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500)
                .map(|_| Sample {
                    point: Vec3::new(rng.gen(), rng.gen(), z),
                    normal: Vec3::new(0.0, 0.0, 1.0),
                })
                .collect::<Vec<_>>()
        };
        assert!((normal_consistency(&plane(0.0, 1), &plane(0.001, 2)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn icosphere_metrics_against_analytic_samples() {
        let m = icosphere(0.6, 5);
        let a = sample_surface(&m, 20_000, 1).unwrap();
        let b = sphere_samples(Vec3::ZERO, 0.6, 20_000, 2);
        let r = compare_samples(&a, &b, DEFAULT_TAU);
        // two independent exact samplings set the floor of the estimator
        let floor = compare_samples(&sphere_samples(Vec3::ZERO, 0.6, 20_000, 3), &b, DEFAULT_TAU);
        assert!(r.nc > 0.99);
        assert!(r.cd_x1e5 < 1.1 * floor.cd_x1e5, "{} vs {}", r.cd_x1e5, floor.cd_x1e5);
    }

    #[test]
    fn torus_samples_are_area_uniform() {
        let (big, small) = (0.5, 0.2);
        let s = torus_samples(Vec3::ZERO, big, small, 20_000, 4);
        for x in &s {
            let rho = (x.point.x * x.point.x + x.point.y * x.point.y).sqrt();
            assert!(((rho - big).hypot(x.point.z) - small).abs() < 1e-12);
            assert!((x.normal.norm() - 1.0).abs() < 1e-12);
        }
        // share of the area farther from the axis than the tube center
        let outer = s.iter().filter(|x| x.point.x.hypot(x.point.y) > big).count() as f64 / s.len() as f64;
        let expected = (std::f64::consts::PI * big + 2.0 * small) / (2.0 * std::f64::consts::PI * big);
        assert!((outer - expected).abs() < 0.015, "{outer} vs {expected}");
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_rigid(seed in 0u64..500, angle in 0.0f64..6.3, tx in -1.0f64..1.0) {
            let a = random(25, seed);
            let b = random(30, seed + 1000);
            prop_assert!((chamfer_metric(&a, &b) - chamfer_metric(&b, &a)).abs() < 1e-9);
            prop_assert!((hausdorff(&a, &b) - hausdorff(&b, &a)).abs() < 1e-9);
            prop_assert!((f1_score(&a, &b, 0.3) - f1_score(&b, &a, 0.3)).abs() < 1e-12);
            let cd = chamfer_metric(&a, &b);
            let hd = hausdorff(&a, &b);
            prop_assert!(cd <= hd * hd * 1e-5 + 1e-9);
            let (c, s) = (angle.cos(), angle.sin());
            let mv = |p: &Vec3| Vec3::new(c * p.x - s * p.y + tx, s * p.x + c * p.y, p.z - tx);
            let (ra, rb): (Vec<Vec3>, Vec<Vec3>) = (a.iter().map(mv).collect(), b.iter().map(mv).collect());
            prop_assert!((chamfer_metric(&ra, &rb) - cd).abs() < 1e-9 * cd.max(1.0));
            prop_assert!((hausdorff(&ra, &rb) - hd).abs() < 1e-9 * hd.max(1.0));
        }
    }
}
