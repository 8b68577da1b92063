mod manifest;
mod reconstruct;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dccvt::gradients::verify_fd;
use dccvt::io::{parse_oracle, read_mesh, write_xyz};
use dccvt::losses::{LossConfig, LossWeights, Targets};
use dccvt::metrics::{compare_samples, sample_surface, MetricsReport, DEFAULT_EVAL_SAMPLES, DEFAULT_TAU};
use dccvt::optimizer::{Normalization, OptimConfig};
use dccvt::pipeline::{extract_mtet, gradient_fixture, initial_state, run_from, Fixture, SiteLayout, Variant};
use dccvt::projection::ProjectionMode;

/// Watertight surface reconstruction by optimizing a clipped Voronoi
/// tessellation carrying a signed distance field.
#[derive(Parser, Debug)]
#[command(name = "dccvt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample points uniformly by area from a mesh.
    Sample(SampleArgs),
    /// Reconstruct a mesh from a point cloud.
    Reconstruct(reconstruct::ReconstructArgs),
    /// Compare a reconstruction with a reference mesh.
    Eval(EvalArgs),
    /// Run the ablation variants on an analytic fixture.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    VerifyGrad(VerifyGradArgs),
}

#[derive(Args, Debug)]
struct SampleArgs {
    mesh: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(short, default_value_t = 9600)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    recon: PathBuf,
    reference: PathBuf,
    #[arg(short, default_value_t = DEFAULT_EVAL_SAMPLES)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also append the report as one JSON line to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// sphere[:R] or torus[:R,r].
    #[arg(long, default_value = "sphere")]
    fixture: Fixture,
    /// Initial SDF; the fixture's own SDF when omitted.
    #[arg(long)]
    init: Option<String>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 16)]
    res: usize,
    #[arg(long, default_value_t = 5000)]
    targets: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_SAMPLES)]
    eval_samples: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Per-seed results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyGradArgs {
    /// Number of random configurations.
    #[arg(long, default_value_t = 10)]
    configs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid sites per axis.
    #[arg(long, default_value_t = 4)]
    res: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 120)]
    probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Minimum accepted probes per check.
    #[arg(long, default_value_t = 50)]
    min_accepted: usize,
    #[arg(long, default_value = "robust")]
    projection: ProjectionMode,
}

fn sample(args: &SampleArgs) -> Result<()> {
    let mesh = read_mesh(&args.mesh)?;
    let samples = sample_surface(&mesh, args.n, args.seed)?;
    let points: Vec<_> = samples.iter().map(|s| s.point).collect();
    write_xyz(&points, &args.out)?;
    eprintln!("wrote {} points to {}", points.len(), args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let recon = read_mesh(&args.recon)?;
    let reference = read_mesh(&args.reference)?;
    let a = sample_surface(&recon, args.n, args.seed)?;
    let b = sample_surface(&reference, args.n, args.seed.wrapping_add(1))?;
    let report = compare_samples(&a, &b, args.tau);
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(path) = &args.json {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(&report)?)?;
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let layout = SiteLayout {
        resolution: args.res,
        ..SiteLayout::default()
    };
    let base = OptimConfig {
        iterations: args.iters,
        ..OptimConfig::default()
    };
    let mut rows: Vec<(Variant, u64, MetricsReport, usize)> = Vec::new();
    for seed in args.first_seed..args.first_seed + args.seeds {
        let targets = args.fixture.targets(args.targets, seed);
        let oracle = match &args.init {
            Some(spec) => parse_oracle(spec, &Normalization::IDENTITY, seed)?,
            None => args.fixture.oracle(),
        };
        let reference = args.fixture.samples(args.eval_samples, seed.wrapping_add(1));
        let initial = initial_state(&targets, &oracle, &layout, seed)?;
        let mut full_state = None;
        for variant in Variant::ALL {
            let (mesh, n_samples) = match variant.config(&OptimConfig { seed, ..base }) {
                Some(config) => {
                    let r = run_from(initial.clone(), &targets, &config, |_, _| {})?;
                    let n = r.trace.records.last().map_or(0, |rec| rec.n_samples);
                    let mesh = r.extraction.mesh;
                    if variant == Variant::Full {
                        full_state = Some((r.state, n));
                    }
                    (mesh, n)
                }
                None => {
                    let (state, n) = full_state.as_ref().context("mtet row needs the full run")?;
                    (extract_mtet(state)?, *n)
                }
            };
            let samples = sample_surface(&mesh, args.eval_samples, seed)?;
            let report = compare_samples(&samples, &reference, args.tau);
            eprintln!("seed {seed} {:12} {}", variant.name(), report.csv_row());
            rows.push((variant, seed, report, n_samples));
        }
    }

    if let Some(path) = &args.csv {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "variant,seed,{},chamfer_samples", MetricsReport::CSV_HEADER)?;
        for (v, seed, r, n) in &rows {
            writeln!(w, "{},{seed},{},{n}", v.name(), r.csv_row())?;
        }
        w.flush()?;
    }
    println!(
        "# {} fixture, {} seeds, {} iterations, medians",
        args.fixture, args.seeds, args.iters
    );
    println!("{:<12} {:>12} {:>8} {:>8} {:>12}", "variant", "CD(x1e5)", "F1", "NC", "HD(x1e5)");
    for variant in Variant::ALL {
        let of = |f: fn(&MetricsReport) -> f64| {
            median(rows.iter().filter(|r| r.0 == variant).map(|r| f(&r.2)).collect())
        };
        println!(
            "{:<12} {:>12.4} {:>8.4} {:>8.4} {:>12.2}",
            variant.name(),
            of(|r| r.cd_x1e5),
            of(|r| r.f1_at_tau),
            of(|r| r.nc),
            of(|r| r.hd_x1e5)
        );
    }
    Ok(())
}

/// Returns whether every check passed.
fn verify_grad(args: &VerifyGradArgs) -> Result<bool> {
    let terms = [
        ("cd", LossWeights::only_cd()),
        ("cvt", LossWeights::only_cvt()),
        ("eik", LossWeights::only_eik()),
        ("mbmc", LossWeights::only_mbmc()),
        ("total", LossWeights::default()),
    ];
    println!("config,term,accepted,rejected,max_rel_pos,max_rel_sdf,max_rel,status");
    let mut ok = true;
    for seed in args.seed..args.seed + args.configs {
        let (state, targets) = gradient_fixture(args.res, seed)?;
        let targets = Targets::new(&targets)?;
        for (name, weights) in terms {
            let config = LossConfig {
                weights,
                projection: args.projection,
                ..LossConfig::default()
            };
            let r = verify_fd(&state, &targets, &config, args.h, args.probes, seed)?;
            let pass = r.max_rel_error < args.tol && r.accepted.len() >= args.min_accepted;
            ok &= pass;
            println!(
                "{seed},{name},{},{},{:.3e},{:.3e},{:.3e},{}",
                r.accepted.len(),
                r.rejected,
                r.max_rel_error_pos,
                r.max_rel_error_sdf,
                r.max_rel_error,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DCCVT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("DCCVT_THREADS=`{v}` is not a thread count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::Sample(a) => sample(a)?,
        Command::Reconstruct(a) => reconstruct::run(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::VerifyGrad(a) => return verify_grad(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
