//! Adam over site positions and SDF values with per-iteration
//! retriangulation, plus input normalization and the key-value config format.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::delaunay;
use crate::gradients::gradient;
use crate::losses::{evaluate_with, Evaluation, LossConfig, LossTerms, Targets};
use crate::sdf::SiteState;
use crate::upsampling::{should_upsample, upsample, UpsampleEvent, UpsampleSchedule};
use crate::vec3::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate of the SDF values; `lr` when unset.
    pub lr_sdf: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub upsample: Option<UpsampleSchedule>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_sdf: None,
            beta1: 0.8,
            beta2: 0.99,
            adam_eps: 1e-8,
            iterations: 1000,
            seed: 0,
            loss: LossConfig::default(),
            upsample: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad value `{value}` for `{key}`"))),
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0) || !betas_ok || self.iterations == 0 || self.lr_sdf.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid optimizer config {self:?}")));
        }
        if let Some(s) = &self.upsample {
            s.validate()?;
        }
        Ok(())
    }

    pub fn lr_sdf(&self) -> f64 {
        self.lr_sdf.unwrap_or(self.lr)
    }

    /// Set one field by its config-file key. Returns `Ok(false)` for keys
    /// this struct does not know.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let up = || self.upsample.unwrap_or_default();
        match key {
            "lr" => self.lr = parse_num(key, value)?,
            "lr_sdf" => self.lr_sdf = Some(parse_num(key, value)?),
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "lambda_cd" => self.loss.weights.cd = parse_num(key, value)?,
            "lambda_cvt" => self.loss.weights.cvt = parse_num(key, value)?,
            "lambda_eik" => self.loss.weights.eik = parse_num(key, value)?,
            "lambda_h" => self.loss.weights.mbmc = parse_num(key, value)?,
            "projection" => self.loss.projection = value.parse()?,
            "chamfer" => self.loss.chamfer = value.parse()?,
            "midpoints" => self.loss.use_midpoints = parse_bool(key, value)?,
            "upsample" => {
                self.upsample = if parse_bool(key, value)? { Some(up()) } else { None };
            }
            "upsample_fraction" => {
                self.upsample = Some(UpsampleSchedule {
                    fraction_per_step: parse_num(key, value)?,
                    ..up()
                })
            }
            "upsample_max_steps" => {
                self.upsample = Some(UpsampleSchedule {
                    max_steps: parse_num(key, value)?,
                    ..up()
                })
            }
            "upsample_until" => {
                self.upsample = Some(UpsampleSchedule {
                    active_until: parse_num(key, value)?,
                    ..up()
                })
            }
            "site_cap" => {
                self.upsample = Some(UpsampleSchedule {
                    site_cap: parse_num(key, value)?,
                    ..up()
                })
            }
            "alpha_kappa" => {
                self.upsample = Some(UpsampleSchedule {
                    alpha_kappa: parse_num(key, value)?,
                    ..up()
                })
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `key = value` pairs of a config file with their line numbers. Blank
/// lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidArgument(format!("line {}: expected `key = value`", k + 1)));
        };
        out.push((k + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Bias-corrected Adam update of one scalar parameter.
#[inline]
#[allow(clippy::too_many_arguments)]
pub fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / (1.0 - beta1.powi(t as i32));
    let v_hat = *v / (1.0 - beta2.powi(t as i32));
    *p -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// First and second moments of one site's four parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SiteMoments {
    pub m: [f64; 4],
    pub v: [f64; 4],
    pub steps: u64,
}

/// Adam state keyed by site identity. Sites seen for the first time start
/// with zero moments and their own step count.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub moments: HashMap<u64, SiteMoments>,
}

impl Adam {
    pub fn step(&mut self, state: &mut SiteState, d_pos: &[Vec3], d_sdf: &[f64], config: &OptimConfig) {
        let lrs = [config.lr, config.lr, config.lr, config.lr_sdf()];
        for i in 0..state.len() {
            let mo = self.moments.entry(state.ids[i]).or_default();
            mo.steps += 1;
            let g = [d_pos[i].x, d_pos[i].y, d_pos[i].z, d_sdf[i]];
            let mut p = [state.positions[i].x, state.positions[i].y, state.positions[i].z, state.sdf[i]];
            for k in 0..4 {
                adam_update(
                    &mut p[k],
                    g[k],
                    &mut mo.m[k],
                    &mut mo.v[k],
                    mo.steps,
                    lrs[k],
                    config.beta1,
                    config.beta2,
                    config.adam_eps,
                );
            }
            state.positions[i] = Vec3::new(p[0], p[1], p[2]).clamp(-1.0, 1.0);
            state.sdf[i] = p[3];
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub terms: LossTerms,
    pub n_sites: usize,
    pub n_crossing_tets: usize,
    /// Points entering the Chamfer term.
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct PhaseTimes {
    pub triangulate: Duration,
    pub forward: Duration,
    pub backward: Duration,
    pub step: Duration,
    pub upsample: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct OptimTrace {
    pub records: Vec<IterationRecord>,
    pub events: Vec<UpsampleEvent>,
    pub times: PhaseTimes,
}

impl OptimTrace {
    pub const CSV_HEADER: &'static str = "iter,cd,cvt,eik,mbmc,total,n_sites,n_crossing_tets,n_samples";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            let t = r.terms;
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{:e},{},{},{}",
                r.iter, t.cd, t.cvt, t.eik, t.mbmc, t.total, r.n_sites, r.n_crossing_tets, r.n_samples
            )?;
        }
        Ok(())
    }
}

/// Triangulate and evaluate, tagging an empty reconstruction with the
/// iteration.
fn evaluate_at(
    state: &SiteState,
    targets: &Targets,
    loss: &LossConfig,
    iter: usize,
    times: &mut PhaseTimes,
) -> Result<Evaluation> {
    let t0 = Instant::now();
    let tri = delaunay(&state.positions)?;
    let t1 = Instant::now();
    times.triangulate += t1 - t0;
    let eval = evaluate_with(state, tri, targets, loss).map_err(|e| match e {
        Error::EmptyReconstruction { .. } => Error::EmptyReconstruction { iteration: Some(iter) },
        e => e,
    });
    times.forward += t1.elapsed();
    eval
}

/// Run the optimization loop from `initial`.
pub fn optimize(initial: SiteState, targets: &Targets, config: &OptimConfig) -> Result<(SiteState, OptimTrace)> {
    optimize_with(initial, targets, config, |_, _| {})
}

/// [`optimize`] with a callback after each completed iteration.
pub fn optimize_with<F: FnMut(&IterationRecord, &SiteState)>(
    initial: SiteState,
    targets: &Targets,
    config: &OptimConfig,
    mut on_iteration: F,
) -> Result<(SiteState, OptimTrace)> {
    config.validate()?;
    let mut state = initial;
    let mut adam = Adam::default();
    let mut trace = OptimTrace::default();
    let mut steps_done = 0;
    for iter in 0..config.iterations {
        let mut eval = evaluate_at(&state, targets, &config.loss, iter, &mut trace.times)?;
        if let Some(schedule) = &config.upsample {
            let (fire, k) = should_upsample(iter, config.iterations, schedule, steps_done, state.len());
            if fire {
                let t0 = Instant::now();
                let seed = config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(iter as u64 + 1));
                let event = upsample(&mut state, &eval, k, schedule.alpha_kappa, seed, iter)?;
                trace.times.upsample += t0.elapsed();
                trace.events.push(event);
                steps_done += 1;
                eval = evaluate_at(&state, targets, &config.loss, iter, &mut trace.times)?;
            }
        }
        let record = IterationRecord {
            iter,
            terms: eval.terms,
            n_sites: state.len(),
            n_crossing_tets: eval.crossing.crossing_tets.len(),
            n_samples: eval.samples.len(),
        };
        let t0 = Instant::now();
        let g = gradient(&eval, &state, targets);
        let t1 = Instant::now();
        trace.times.backward += t1 - t0;
        adam.step(&mut state, &g.d_pos, &g.d_sdf, config);
        trace.times.step += t1.elapsed();
        trace.records.push(record);
        on_iteration(&record, &state);
    }
    Ok((state, trace))
}

/// Uniform scale and translation into the normalized cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

/// Half-width of the normalized bounding box's longest side.
pub const NORMALIZATION_MARGIN: f64 = 0.9;

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: Vec3::ZERO,
        scale: 1.0,
    };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        p / self.scale + self.center
    }
}

/// Center the bounding box at the origin and scale its longest side to span
/// `[-0.9, 0.9]`.
pub fn normalize_inputs(points: &[Vec3]) -> Result<(Vec<Vec3>, Normalization)> {
    if points.is_empty() {
        return Err(Error::DegeneratePointCloud);
    }
    let (lo, hi) = points.iter().fold(
        (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.min_by_axis(*p), hi.max_by_axis(*p)),
    );
    let ext = hi - lo;
    let longest = ext.x.max(ext.y).max(ext.z);
    if !(longest > 0.0) || !longest.is_finite() {
        return Err(Error::DegeneratePointCloud);
    }
    let n = Normalization {
        center: (lo + hi) * 0.5,
        scale: 2.0 * NORMALIZATION_MARGIN / longest,
    };
    Ok((points.iter().map(|&p| n.apply(p)).collect(), n))
}
