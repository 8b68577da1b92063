//! End-to-end reconstruction: site initialization, optimization and mesh
//! extraction, shared by the command line and the tests.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::delaunay;
use crate::losses::Targets;
use crate::metrics::{sphere_samples, torus_samples, Sample};
use crate::mesh::{extract_dccvt, extract_mtet_baseline, Extraction, TriangleMesh};
use crate::optimizer::{optimize_with, IterationRecord, OptimConfig, OptimTrace};
use crate::sdf::{init_grid_sites, init_sdf, SdfOracle, SiteState, TetFieldCache};
use crate::upsampling::{near_sampling_init, DEFAULT_OFFSET_RADIUS};
use crate::vec3::Vec3;

/// Grid perturbation that keeps initial sites off exact co-spherical
/// configurations.
pub const DEFAULT_PERTURBATION: f64 = 0.005;

/// How the initial sites are placed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteLayout {
    /// Sites per axis of the regular grid spanning `[-1, 1]^3`.
    pub resolution: usize,
    pub perturbation: f64,
    /// Extra sites placed near a subsample of the targets.
    pub near_count: usize,
    pub offset_radius: f64,
}

impl Default for SiteLayout {
    fn default() -> Self {
        Self {
            resolution: 16,
            perturbation: DEFAULT_PERTURBATION,
            near_count: 0,
            offset_radius: DEFAULT_OFFSET_RADIUS,
        }
    }
}

impl SiteLayout {
    /// Near-site count that makes `fraction` of all sites near-sampled.
    pub fn near_count_for_fraction(resolution: usize, fraction: f64) -> Result<usize> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("near fraction {fraction} is outside [0, 1)")));
        }
        let grid = resolution.pow(3) as f64;
        Ok((grid * fraction / (1.0 - fraction)).round() as usize)
    }
}

/// Grid sites (plus near sites) with SDF values from `oracle`.
pub fn initial_state(targets: &[Vec3], oracle: &SdfOracle, layout: &SiteLayout, seed: u64) -> Result<SiteState> {
    if layout.resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let sites = init_grid_sites(layout.resolution, layout.perturbation, seed);
    let sdf = init_sdf(&sites, oracle);
    let mut state = SiteState::new(sites, sdf)?;
    if layout.near_count > 0 {
        let near = near_sampling_init(
            targets,
            layout.near_count,
            layout.offset_radius,
            oracle,
            seed ^ 0x6e65_6172,
        )?;
        state.extend(&near);
    }
    Ok(state)
}

/// Dual-facet mesh of `state`.
pub fn extract(state: &SiteState) -> Result<Extraction> {
    let tri = delaunay(&state.positions)?;
    let cache = TetFieldCache::build(state, &tri);
    extract_dccvt(state, &tri, &cache)
}

/// Marching-tetrahedra mesh of `state`.
pub fn extract_mtet(state: &SiteState) -> Result<TriangleMesh> {
    let tri = delaunay(&state.positions)?;
    extract_mtet_baseline(state, &tri)
}

/// Analytic target shape centered at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Fixture {
    Sphere { radius: f64 },
    Torus { major: f64, minor: f64 },
}

impl Fixture {
    pub const SPHERE: Fixture = Fixture::Sphere { radius: 0.6 };
    pub const TORUS: Fixture = Fixture::Torus { major: 0.5, minor: 0.2 };

    /// Area-uniform surface samples with exact normals.
    pub fn samples(&self, n: usize, seed: u64) -> Vec<Sample> {
        match *self {
            Fixture::Sphere { radius } => sphere_samples(Vec3::ZERO, radius, n, seed),
            Fixture::Torus { major, minor } => torus_samples(Vec3::ZERO, major, minor, n, seed),
        }
    }

    pub fn targets(&self, n: usize, seed: u64) -> Vec<Vec3> {
        self.samples(n, seed).into_iter().map(|s| s.point).collect()
    }

    pub fn oracle(&self) -> SdfOracle {
        match *self {
            Fixture::Sphere { radius } => SdfOracle::sphere(radius),
            Fixture::Torus { major, minor } => SdfOracle::torus(major, minor),
        }
    }
}

impl FromStr for Fixture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown fixture `{s}` (sphere[:R], torus[:R,r])"));
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let nums: Vec<f64> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
        };
        let fixture = match (name, nums.as_slice()) {
            ("sphere", []) => Self::SPHERE,
            ("sphere", [r]) => Fixture::Sphere { radius: *r },
            ("torus", []) => Self::TORUS,
            ("torus", [a, b]) if b < a => Fixture::Torus { major: *a, minor: *b },
            _ => return Err(bad()),
        };
        let ok = match fixture {
            Fixture::Sphere { radius } => radius > 0.0 && radius < 1.0,
            Fixture::Torus { major, minor } => minor > 0.0 && major + minor < 1.0,
        };
        if ok {
            Ok(fixture)
        } else {
            Err(Error::InvalidArgument(format!("fixture `{s}` does not fit in [-1, 1]^3")))
        }
    }
}

impl fmt::Display for Fixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fixture::Sphere { radius } => write!(f, "sphere:{radius}"),
            Fixture::Torus { major, minor } => write!(f, "torus:{major},{minor}"),
        }
    }
}

/// Randomized configuration for finite-difference checks: a strongly
/// perturbed grid with a jittered sphere SDF and 400 targets on a slightly
/// smaller sphere, so every loss term has a nonzero gradient.
pub fn gradient_fixture(resolution: usize, seed: u64) -> Result<(SiteState, Vec<Vec3>)> {
    let sites = init_grid_sites(resolution, 0.3, seed);
    let mut sdf = init_sdf(&sites, &SdfOracle::sphere(0.55));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for v in &mut sdf {
        *v += rng.gen_range(-0.05..0.05);
    }
    let targets = (0..400)
        .map(|_| {
            Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalized() * 0.5
        })
        .collect();
    Ok((SiteState::new(sites, sdf)?, targets))
}

/// Rows of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// CVT weight set to zero.
    NoCvt,
    /// Projected midpoints left out of the Chamfer samples.
    NoMidpoint,
    /// Full optimization, marching-tetrahedra extraction.
    Mtet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoCvt, Variant::NoMidpoint, Variant::Mtet];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCvt => "no-cvt",
            Variant::NoMidpoint => "no-midpoint",
            Variant::Mtet => "mtet",
        }
    }

    /// Optimizer settings of this variant; `None` when it reuses the full
    /// run and differs only in extraction.
    pub fn config(&self, base: &OptimConfig) -> Option<OptimConfig> {
        let mut c = *base;
        match self {
            Variant::Full => {}
            Variant::NoCvt => c.loss.weights.cvt = 0.0,
            Variant::NoMidpoint => c.loss.use_midpoints = false,
            Variant::Mtet => return None,
        }
        Some(c)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub initial: SiteState,
    pub state: SiteState,
    pub trace: OptimTrace,
    pub extraction: Extraction,
}

/// Optimize from `initial` and extract the final mesh.
pub fn run_from<F: FnMut(&IterationRecord, &SiteState)>(
    initial: SiteState,
    targets: &[Vec3],
    config: &OptimConfig,
    on_iteration: F,
) -> Result<Reconstruction> {
    let index = Targets::new(targets)?;
    let (state, trace) = optimize_with(initial.clone(), &index, config, on_iteration)?;
    let extraction = extract(&state)?;
    Ok(Reconstruction {
        initial,
        state,
        trace,
        extraction,
    })
}

/// Initialize, optimize and extract.
pub fn reconstruct(
    targets: &[Vec3],
    oracle: &SdfOracle,
    layout: &SiteLayout,
    config: &OptimConfig,
) -> Result<Reconstruction> {
    let initial = initial_state(targets, oracle, layout, config.seed)?;
    run_from(initial, targets, config, |_, _| {})
}
