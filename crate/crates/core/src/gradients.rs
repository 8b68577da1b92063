//! Reverse-mode gradients of the total loss with all discrete structure held
//! fixed, and a finite-difference checker for them.
//!
//! The graph-level chaining is written by hand. Local Jacobians of the small
//! nonlinear kernels (circumcenter, Newton projections) come from forward-mode
//! dual numbers evaluated on the same generic code as the forward pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::circumcenter_t;
use crate::losses::{evaluate, ChamferMode, Evaluation, LossConfig, SampleSource, Targets};
use crate::projection::{project_midpoint_t, project_site_t, project_vertex_barycentric_t, robust_backward};
use crate::sdf::{heaviside_parts, HeavisidePiece, SiteState};
use crate::vec3::{Dual, Vec3, V3};

/// Every discrete choice one evaluation depends on. Two evaluations with
/// equal combinatorics are samples of the same smooth function.
#[derive(Clone, Debug, PartialEq)]
pub struct Combinatorics {
    pub tets: Vec<[usize; 4]>,
    pub invalid: Vec<bool>,
    pub crossing_tets: Vec<usize>,
    pub crossing_edges: Vec<(usize, usize)>,
    pub target_to_sample: Vec<usize>,
    pub sample_to_target: Vec<usize>,
    /// Per crossing tet: robust branch taken.
    pub robust_branch: Vec<bool>,
    /// Per crossing tet: plane normal held fixed because of a small eigengap.
    pub isotropic: Vec<bool>,
    pub heaviside_pieces: Vec<HeavisidePiece>,
}

impl Evaluation {
    pub fn combinatorics(&self) -> Combinatorics {
        Combinatorics {
            tets: self.tri.tets.clone(),
            invalid: self.cache.invalid.clone(),
            crossing_tets: self.crossing.crossing_tets.clone(),
            crossing_edges: self.crossing.crossing_edges.clone(),
            target_to_sample: self.pairs.target_to_sample.clone(),
            sample_to_target: self.pairs.sample_to_target.clone(),
            robust_branch: self.planes.iter().map(|p| p.is_some()).collect(),
            isotropic: self.planes.iter().map(|p| p.is_some_and(|p| p.is_isotropic())).collect(),
            heaviside_pieces: self.heaviside_pieces.clone(),
        }
    }
}

/// Gradient of the total loss with respect to the site positions and SDF
/// values.
#[derive(Clone, Debug)]
pub struct GradientBuffers {
    pub d_pos: Vec<Vec3>,
    pub d_sdf: Vec<f64>,
    pub frozen: Combinatorics,
}

/// Evaluate and differentiate in one call.
pub fn backward(state: &SiteState, targets: &Targets, config: &LossConfig) -> Result<(Evaluation, GradientBuffers)> {
    let eval = evaluate(state, targets, config)?;
    let grads = gradient(&eval, state, targets);
    Ok((eval, grads))
}

/// Vector-Jacobian product of a dual-number kernel output.
#[inline]
fn vjp<const N: usize>(out: V3<Dual<N>>, bar: Vec3) -> [f64; N] {
    let mut r = [0.0; N];
    for k in 0..N {
        r[k] = out.x.d[k] * bar.x + out.y.d[k] * bar.y + out.z.d[k] * bar.z;
    }
    r
}

fn slice3(a: &[f64], k: usize) -> Vec3 {
    Vec3::new(a[k], a[k + 1], a[k + 2])
}

/// Reverse pass over a completed evaluation of `state`.
pub fn gradient(eval: &Evaluation, state: &SiteState, targets: &Targets) -> GradientBuffers {
    let w = eval.config.weights;
    let pos = &state.positions;
    let phi = &state.sdf;
    let tri = &eval.tri;
    let cache = &eval.cache;
    let n = state.len();
    let m = tri.len();

    let mut s_bar = vec![Vec3::ZERO; n];
    let mut phi_bar = vec![0.0; n];
    let mut gs_bar = vec![Vec3::ZERO; n];
    let mut proj_site_bar = vec![Vec3::ZERO; n];
    let mut v_bar = vec![Vec3::ZERO; m];
    let mut vol_bar = vec![0.0; m];
    let mut gt_bar = vec![Vec3::ZERO; m];
    let mut pv_bar = vec![Vec3::ZERO; eval.projected_vertices.len()];
    let mut pm_bar = vec![Vec3::ZERO; eval.projected_midpoints.len()];

    // Chamfer
    if w.cd != 0.0 {
        let mut x_bar = vec![Vec3::ZERO; eval.samples.len()];
        let t = targets.points();
        let forward_scale = match eval.config.chamfer {
            ChamferMode::Symmetric => 0.5,
            ChamferMode::OneSided => 1.0,
        } / t.len() as f64;
        for (ti, &k) in eval.pairs.target_to_sample.iter().enumerate() {
            x_bar[k] += (eval.samples[k] - t[ti]) * (2.0 * forward_scale * w.cd);
        }
        if eval.config.chamfer == ChamferMode::Symmetric {
            let scale = 0.5 / eval.samples.len() as f64;
            for (k, &ti) in eval.pairs.sample_to_target.iter().enumerate() {
                x_bar[k] += (eval.samples[k] - t[ti]) * (2.0 * scale * w.cd);
            }
        }
        for (k, src) in eval.sources.iter().enumerate() {
            match *src {
                SampleSource::Vertex(c) => pv_bar[c] += x_bar[k],
                SampleSource::Midpoint(e) => pm_bar[e] += x_bar[k],
            }
        }
    }

    // CVT: centroids average projected (crossing) or raw dual vertices
    if w.cvt != 0.0 {
        for i in 0..n {
            let r = pos[i] - eval.centroids[i];
            let len = r.norm();
            if len == 0.0 {
                continue;
            }
            let u = r * (w.cvt / (n as f64 * len));
            s_bar[i] += u;
            let incident: Vec<usize> = tri.site_to_tets[i]
                .iter()
                .copied()
                .filter(|&t| !cache.invalid[t])
                .collect();
            if incident.is_empty() {
                continue;
            }
            let share = u * (-1.0 / incident.len() as f64);
            for t in incident {
                match eval.crossing_slot[t] {
                    Some(c) => pv_bar[c] += share,
                    None => v_bar[t] += share,
                }
            }
        }
    }

    // projected midpoints
    for (e, &(i, j)) in eval.crossing.crossing_edges.iter().enumerate() {
        let bar = pm_bar[e];
        if bar == Vec3::ZERO {
            continue;
        }
        type D = Dual<14>;
        let out = project_midpoint_t(
            pos[i].seed::<14>(0),
            pos[j].seed::<14>(3),
            D::var(phi[i], 6),
            D::var(phi[j], 7),
            eval.site_grads[i].seed::<14>(8),
            eval.site_grads[j].seed::<14>(11),
        );
        let r = vjp(out, bar);
        s_bar[i] += slice3(&r, 0);
        s_bar[j] += slice3(&r, 3);
        phi_bar[i] += r[6];
        phi_bar[j] += r[7];
        gs_bar[i] += slice3(&r, 8);
        gs_bar[j] += slice3(&r, 11);
    }

    // projected dual vertices
    for (c, &t) in eval.crossing.crossing_tets.iter().enumerate() {
        let bar = pv_bar[c];
        if bar == Vec3::ZERO {
            continue;
        }
        let tet = tri.tets[t];
        let v = cache.circumcenters[t];
        match &eval.planes[c] {
            Some(plane) => {
                let pts = tet.map(|i| eval.projected_sites[i]);
                let (vb, pb) = robust_backward(v, pts, plane, bar);
                v_bar[t] += vb;
                for k in 0..4 {
                    proj_site_bar[tet[k]] += pb[k];
                }
            }
            None => {
                type D = Dual<31>;
                let out = project_vertex_barycentric_t(
                    v.seed::<31>(0),
                    [0, 1, 2, 3].map(|k| pos[tet[k]].seed::<31>(3 + 3 * k)),
                    [0, 1, 2, 3].map(|k| D::var(phi[tet[k]], 15 + k)),
                    [0, 1, 2, 3].map(|k| eval.site_grads[tet[k]].seed::<31>(19 + 3 * k)),
                );
                let r = vjp(out, bar);
                v_bar[t] += slice3(&r, 0);
                for k in 0..4 {
                    let i = tet[k];
                    s_bar[i] += slice3(&r, 3 + 3 * k);
                    phi_bar[i] += r[15 + k];
                    gs_bar[i] += slice3(&r, 19 + 3 * k);
                }
            }
        }
    }

    // projected sites
    for i in 0..n {
        let bar = proj_site_bar[i];
        if bar == Vec3::ZERO {
            continue;
        }
        let out = project_site_t(pos[i].seed::<7>(0), Dual::var(phi[i], 3), eval.site_grads[i].seed::<7>(4));
        let r = vjp(out, bar);
        s_bar[i] += slice3(&r, 0);
        phi_bar[i] += r[3];
        gs_bar[i] += slice3(&r, 4);
    }

    // Eikonal over every tet, with the per-site gradients
    if w.eik != 0.0 && m > 0 {
        let k = w.eik / (4.0 * m as f64);
        let dev: Vec<f64> = eval.site_grads.iter().map(|g| g.norm_sq() - 1.0).collect();
        for (t, tet) in tri.tets.iter().enumerate() {
            vol_bar[t] += k * tet.iter().map(|&i| dev[i] * dev[i]).sum::<f64>();
            for &i in tet {
                gs_bar[i] += eval.site_grads[i] * (k * cache.volumes[t] * 4.0 * dev[i]);
            }
        }
    }

    // MbMC through the Heaviside values and the edge-length band width
    if w.mbmc != 0.0 && m > 0 {
        let k = w.mbmc / m as f64;
        let mut h_bar = vec![0.0; n];
        for (t, tet) in tri.tets.iter().enumerate() {
            let Some(lsq) = &cache.lsq[t] else { continue };
            if cache.invalid[t] {
                continue;
            }
            let g = eval.mbmc_grads[t];
            let len = g.norm();
            vol_bar[t] += k * len;
            if len == 0.0 {
                continue;
            }
            let gb = g * (k * cache.volumes[t] / len);
            let h = tet.map(|i| eval.heaviside[i]);
            let (sb, hb) = lsq.backward(h, g, gb);
            for q in 0..4 {
                s_bar[tet[q]] += sb[q];
                h_bar[tet[q]] += hb[q];
            }
        }
        let mut eps_bar = 0.0;
        for i in 0..n {
            if h_bar[i] == 0.0 {
                continue;
            }
            let (_, dphi, deps) = heaviside_parts(phi[i], eval.eps_h);
            phi_bar[i] += h_bar[i] * dphi;
            eps_bar += h_bar[i] * deps;
        }
        if eps_bar != 0.0 && !eval.kept_edges.is_empty() {
            let share = eps_bar / eval.kept_edges.len() as f64;
            for &e in &eval.kept_edges {
                let (a, b) = tri.edges[e];
                let d = pos[a] - pos[b];
                let len = d.norm();
                if len > 0.0 {
                    let g = d * (share / len);
                    s_bar[a] += g;
                    s_bar[b] -= g;
                }
            }
        }
    }

    // per-site gradients are volume-weighted means of tet gradients
    for i in 0..n {
        let bar = gs_bar[i];
        if bar == Vec3::ZERO {
            continue;
        }
        let total: f64 = tri.site_to_tets[i]
            .iter()
            .filter(|&&t| !cache.invalid[t])
            .map(|&t| cache.volumes[t])
            .sum();
        if total <= 0.0 {
            continue;
        }
        for &t in &tri.site_to_tets[i] {
            if cache.invalid[t] {
                continue;
            }
            vol_bar[t] += bar.dot(cache.gradients[t] - eval.site_grads[i]) / total;
            gt_bar[t] += bar * (cache.volumes[t] / total);
        }
    }

    // per-tet kernels: least-squares gradient, volume, circumcenter
    let per_tet: Vec<([Vec3; 4], [f64; 4])> = (0..m)
        .into_par_iter()
        .map(|t| {
            let tet = tri.tets[t];
            let p = tet.map(|i| pos[i]);
            let mut sb = [Vec3::ZERO; 4];
            let mut fb = [0.0; 4];
            if let (Some(lsq), false) = (&cache.lsq[t], cache.invalid[t]) {
                if gt_bar[t] != Vec3::ZERO {
                    let (a, b) = lsq.backward(tet.map(|i| phi[i]), cache.gradients[t], gt_bar[t]);
                    sb = a;
                    fb = b;
                }
            }
            if vol_bar[t] != 0.0 {
                let (b, c, d) = (p[1] - p[0], p[2] - p[0], p[3] - p[0]);
                let triple = b.dot(c.cross(d));
                let k = vol_bar[t] * triple.signum() / 6.0;
                let db = c.cross(d) * k;
                let dc = d.cross(b) * k;
                let dd = b.cross(c) * k;
                sb[1] += db;
                sb[2] += dc;
                sb[3] += dd;
                sb[0] -= db + dc + dd;
            }
            if v_bar[t] != Vec3::ZERO && !cache.invalid[t] {
                let out = circumcenter_t(
                    p[0].seed::<12>(0),
                    p[1].seed::<12>(3),
                    p[2].seed::<12>(6),
                    p[3].seed::<12>(9),
                );
                let r = vjp(out, v_bar[t]);
                for k in 0..4 {
                    sb[k] += slice3(&r, 3 * k);
                }
            }
            (sb, fb)
        })
        .collect();
    for (t, (sb, fb)) in per_tet.into_iter().enumerate() {
        for k in 0..4 {
            let i = tri.tets[t][k];
            s_bar[i] += sb[k];
            phi_bar[i] += fb[k];
        }
    }

    GradientBuffers {
        d_pos: s_bar,
        d_sdf: phi_bar,
        frozen: eval.combinatorics(),
    }
}

/// One finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    /// Site index.
    pub site: usize,
    /// 0..3 for a position component, 3 for the SDF value.
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub accepted: Vec<Probe>,
    /// Probes discarded because a perturbation changed the combinatorics.
    pub rejected: usize,
    pub max_rel_error: f64,
    pub max_rel_error_pos: f64,
    pub max_rel_error_sdf: f64,
}

/// Relative error with magnitudes below this treated as this.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// Central finite differences on randomly chosen coordinates.
///
/// Each perturbed state is re-evaluated from scratch (including the
/// triangulation); a probe is rejected if either side's combinatorics differ
/// from the base evaluation. Most probes target coordinates with a nonzero
/// analytic derivative so that the check is not dominated by trivially-zero
/// entries.
pub fn verify_fd(
    state: &SiteState,
    targets: &Targets,
    config: &LossConfig,
    h: f64,
    n_probes: usize,
    seed: u64,
) -> Result<FdReport> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-7, 1e-4]")));
    }
    let (base, grads) = backward(state, targets, config)?;
    let frozen = base.combinatorics();
    let n = state.len();
    let analytic = |site: usize, comp: usize| {
        if comp < 3 {
            grads.d_pos[site][comp]
        } else {
            grads.d_sdf[site]
        }
    };
    let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..4).map(move |c| (i, c))).collect();
    let nonzero: Vec<(usize, usize)> = all.iter().copied().filter(|&(i, c)| analytic(i, c) != 0.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::with_capacity(n_probes);
    for k in 0..n_probes {
        let pool = if !nonzero.is_empty() && k % 5 != 4 { &nonzero } else { &all };
        picks.push(*pool.choose(&mut rng).unwrap());
    }

    let results: Vec<Option<Probe>> = picks
        .par_iter()
        .map(|&(site, comp)| {
            let side = |sign: f64| -> Option<f64> {
                let mut s = state.clone();
                if comp < 3 {
                    s.positions[site][comp] += sign * h;
                } else {
                    s.sdf[site] += sign * h;
                }
                let e = evaluate(&s, targets, config).ok()?;
                (e.combinatorics() == frozen).then_some(e.terms.total)
            };
            let up = side(1.0)?;
            let dn = side(-1.0)?;
            let numeric = (up - dn) / (2.0 * h);
            let a = analytic(site, comp);
            let scale = a.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
            Some(Probe {
                site,
                component: comp,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / scale,
            })
        })
        .collect();
    let rejected = results.iter().filter(|r| r.is_none()).count();
    let accepted: Vec<Probe> = results.into_iter().flatten().collect();
    if accepted.is_empty() {
        return Err(Error::AllProbesFlipped);
    }
    let max_of = |f: &dyn Fn(&Probe) -> bool| {
        accepted
            .iter()
            .filter(|p| f(p))
            .map(|p| p.rel_error)
            .fold(0.0, f64::max)
    };
    Ok(FdReport {
        max_rel_error: max_of(&|_| true),
        max_rel_error_pos: max_of(&|p| p.component < 3),
        max_rel_error_sdf: max_of(&|p| p.component == 3),
        accepted,
        rejected,
    })
}
