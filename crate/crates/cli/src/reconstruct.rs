//! `reconstruct`: point cloud in, watertight mesh plus run artifacts out.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use dccvt::io::{parse_oracle, read_mesh, read_point_cloud, write_mesh};
use dccvt::losses::ChamferMode;
use dccvt::metrics::{compare_meshes, MetricsReport, DEFAULT_EVAL_SAMPLES, DEFAULT_TAU};
use dccvt::optimizer::{normalize_inputs, parse_key_values, Normalization, OptimConfig};
use dccvt::pipeline::{initial_state, run_from, SiteLayout};
use dccvt::projection::ProjectionMode;
use dccvt::sdf::SiteState;

use crate::manifest::{EvalSettings, FileDigest, Outputs, RunManifest};

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Input point cloud (.xyz, .txt, .ply or .obj).
    #[arg(required_unless_present = "from_manifest")]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Initial SDF: sphere[:R], torus:R,r, box:HX,HY,HZ or grid:PATH, with an
    /// optional +noise:AMP[,SEED] suffix.
    #[arg(long)]
    pub init: Option<String>,
    /// Grid sites per axis.
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Fraction of the initial sites placed near the input points.
    #[arg(long)]
    pub near_frac: Option<f64>,
    #[arg(long)]
    pub offset_radius: Option<f64>,
    #[arg(long)]
    pub perturbation: Option<f64>,
    /// Enable adaptive upsampling.
    #[arg(long)]
    pub upsample: bool,
    #[arg(long)]
    pub site_cap: Option<usize>,
    #[arg(long)]
    pub projection: Option<ProjectionMode>,
    #[arg(long)]
    pub chamfer: Option<ChamferMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_sdf: Option<f64>,
    /// Leave projected midpoints out of the Chamfer samples.
    #[arg(long)]
    pub no_midpoints: bool,
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the input coordinates as they are instead of fitting them into
    /// the unit cube.
    #[arg(long)]
    pub no_normalize: bool,
    /// Ground-truth mesh; enables metrics.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    pub eval_samples: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Mesh file format.
    #[arg(long, default_value = "obj", value_parser = ["obj", "ply"])]
    pub format: String,
    /// Print losses every N iterations (0 = quiet).
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Repeat the run recorded in a manifest.
    #[arg(long, conflicts_with_all = [
        "input", "init", "res", "iters", "near_frac", "offset_radius", "perturbation", "upsample",
        "site_cap", "projection", "chamfer", "lr", "lr_sdf", "no_midpoints", "config", "seed",
        "no_normalize", "gt",
    ])]
    pub from_manifest: Option<PathBuf>,
}

/// Settings resolved from defaults, the config file and the flags.
struct Resolved {
    optim: OptimConfig,
    layout: SiteLayout,
    near_frac: f64,
    init: String,
}

fn resolve(args: &ReconstructArgs) -> Result<Resolved> {
    let mut r = Resolved {
        optim: OptimConfig::default(),
        layout: SiteLayout::default(),
        near_frac: 0.0,
        init: "sphere".into(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (line, key, value) in parse_key_values(&text)? {
            let at = || format!("{}:{line}", path.display());
            let num = |v: &str| v.parse::<f64>().with_context(at);
            match key.as_str() {
                "init" => r.init = value,
                "resolution" => r.layout.resolution = value.parse().with_context(at)?,
                "perturbation" => r.layout.perturbation = num(&value)?,
                "offset_radius" => r.layout.offset_radius = num(&value)?,
                "near_frac" => r.near_frac = num(&value)?,
                _ => {
                    if !r.optim.set(&key, &value).with_context(at)? {
                        bail!("{}: unknown key `{key}`", at());
                    }
                }
            }
        }
    }
    let o = &mut r.optim;
    if let Some(v) = &args.init {
        r.init = v.clone();
    }
    if let Some(v) = args.res {
        r.layout.resolution = v;
    }
    if let Some(v) = args.perturbation {
        r.layout.perturbation = v;
    }
    if let Some(v) = args.offset_radius {
        r.layout.offset_radius = v;
    }
    if let Some(v) = args.near_frac {
        r.near_frac = v;
    }
    if let Some(v) = args.iters {
        o.iterations = v;
    }
    if let Some(v) = args.lr {
        o.lr = v;
    }
    if let Some(v) = args.lr_sdf {
        o.lr_sdf = Some(v);
    }
    if let Some(v) = args.seed {
        o.seed = v;
    }
    if let Some(v) = args.projection {
        o.loss.projection = v;
    }
    if let Some(v) = args.chamfer {
        o.loss.chamfer = v;
    }
    if args.no_midpoints {
        o.loss.use_midpoints = false;
    }
    if args.upsample {
        o.upsample.get_or_insert_with(Default::default);
    }
    if let Some(cap) = args.site_cap {
        let Some(s) = o.upsample.as_mut() else {
            bail!("--site-cap needs --upsample");
        };
        s.site_cap = cap;
    }
    r.layout.near_count = SiteLayout::near_count_for_fraction(r.layout.resolution, r.near_frac)?;
    o.validate()?;
    Ok(r)
}

fn grid_files(init: &str) -> Result<Vec<FileDigest>> {
    let base = init.split("+noise:").next().unwrap_or(init);
    match base.strip_prefix("grid:") {
        Some(path) => Ok(vec![FileDigest::of(Path::new(path))?]),
        None => Ok(Vec::new()),
    }
}

fn new_manifest(args: &ReconstructArgs) -> Result<RunManifest> {
    let r = resolve(args)?;
    let input = args.input.as_deref().context("missing input point cloud")?;
    let dir = args.out.clone().context("missing --out directory")?;
    let points = read_point_cloud(input)?;
    let normalization = if args.no_normalize {
        Normalization::IDENTITY
    } else {
        normalize_inputs(&points)?.1
    };
    let eval = match &args.gt {
        Some(gt) => Some(EvalSettings {
            reference: FileDigest::of(gt)?,
            samples: args.eval_samples,
            tau: args.tau,
        }),
        None => None,
    };
    Ok(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: r.optim.seed,
        input: FileDigest::of(input)?,
        init_files: grid_files(&r.init)?,
        init: r.init,
        normalize: !args.no_normalize,
        normalization,
        layout: r.layout,
        optim: r.optim,
        outputs: Outputs {
            dir,
            mesh: format!("mesh.{}", args.format),
            loss_csv: "loss.csv".into(),
            sites: "sites.csv".into(),
            metrics: eval.as_ref().map(|_| "metrics.csv".into()),
        },
        eval,
    })
}

/// Final sites with exactly round-tripping values.
fn write_sites(state: &SiteState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "id,x,y,z,sdf")?;
    for i in 0..state.len() {
        let p = state.positions[i];
        writeln!(w, "{},{},{},{},{}", state.ids[i], p.x, p.y, p.z, state.sdf[i])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &ReconstructArgs) -> Result<()> {
    let mut manifest = match &args.from_manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            m.verify_inputs()?;
            m
        }
        None => new_manifest(args)?,
    };
    if let Some(dir) = &args.out {
        manifest.outputs.dir = dir.clone();
    }
    fs::create_dir_all(&manifest.outputs.dir)
        .with_context(|| format!("creating {}", manifest.outputs.dir.display()))?;
    let manifest_path = manifest.write(&manifest.outputs.dir)?;
    eprintln!("manifest written to {}", manifest_path.display());

    let points = read_point_cloud(&manifest.input.path)?;
    let norm = manifest.normalization;
    let targets: Vec<_> = points.iter().map(|p| norm.apply(*p)).collect();
    let oracle = parse_oracle(&manifest.init, &norm, manifest.seed)?;
    let initial = initial_state(&targets, &oracle, &manifest.layout, manifest.seed)?;
    eprintln!(
        "{} targets, {} initial sites, {} iterations",
        targets.len(),
        initial.len(),
        manifest.optim.iterations
    );
    let log_every = args.log_every;
    let result = run_from(initial, &targets, &manifest.optim, |rec, _| {
        if log_every > 0 && (rec.iter % log_every == 0 || rec.iter + 1 == manifest.optim.iterations) {
            let t = rec.terms;
            eprintln!(
                "iter {:5}  total {:.4e}  cd {:.4e}  cvt {:.4e}  eik {:.4e}  mbmc {:.4e}  sites {}",
                rec.iter, t.total, t.cd, t.cvt, t.eik, t.mbmc, rec.n_sites
            );
        }
    })?;

    let out = |name: &str| manifest.output(name);
    let loss_path = out(&manifest.outputs.loss_csv);
    let f = File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    let mut w = BufWriter::new(f);
    result.trace.write_csv(&mut w)?;
    w.flush()?;
    write_sites(&result.state, &out(&manifest.outputs.sites))?;
    let mesh = &result.extraction.mesh;
    write_mesh(mesh, &out(&manifest.outputs.mesh), Some(&norm))?;
    eprintln!(
        "mesh: {} vertices, {} triangles{}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        if result.extraction.watertight() {
            String::new()
        } else {
            format!(", {} open fans", result.extraction.open_fans)
        }
    );

    if let (Some(eval), Some(name)) = (&manifest.eval, &manifest.outputs.metrics) {
        let mut reference = read_mesh(&eval.reference.path)?;
        reference.map_vertices(|p| norm.apply(p));
        let report = compare_meshes(mesh, &reference, eval.samples, eval.tau, manifest.seed)?;
        fs::write(out(name), format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()))?;
        println!("{}", MetricsReport::CSV_HEADER);
        println!("{}", report.csv_row());
    }
    Ok(())
}
