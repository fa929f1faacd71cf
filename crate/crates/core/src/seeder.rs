//! Iterative matched-subtraction ("peeling") hypothesis proposer.
//!
//! The muon expectation is subtracted from the target; the vertex is the
//! charge-weighted centroid around the hottest residual voxel. Candidates
//! are then peeled off one at a time: scan a fixed direction grid from the
//! vertex, score each ray by the residual charge in a one-voxel-radius
//! cylinder, bisect the kinetic energy whose single-particle template
//! matches that charge, subtract the template and repeat until the residual
//! drops below the stop threshold. Candidates come out in descending
//! kinetic-energy order. No randomness anywhere: peeling is a pure function
//! of the target image.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eventgen::DecompositionHypothesis;
use crate::fitter;
use crate::forward;
use crate::imaging::VoxelImage;
use crate::physics::{ParticleKinematics, ParticleType, PhysicsConstants};

/// Seeder knobs; defaults follow the stop-threshold and grid choices
/// documented on the type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeederConfig {
    /// Hard cap on emitted candidates.
    pub max_particles: usize,
    /// Stop peeling once the residual drops below this, p.e. The default
    /// sits well below the light yield of the smallest in-scope hadron
    /// (a 5 MeV proton leaves roughly 400 p.e.), so the loop only stops
    /// when no plausible particle remains.
    pub stop_threshold_pe: f64,
    /// Polar direction-scan bins.
    pub n_theta: usize,
    /// Azimuthal direction-scan bins.
    pub n_phi: usize,
    /// Scoring cylinder radius, mm (one voxel pitch).
    pub cylinder_radius: f64,
    /// Run per-candidate particle identification over proton/deuterium/
    /// tritium hypotheses (Scenario 2); otherwise every candidate is a
    /// proton.
    pub classify_types: bool,
}

impl Default for SeederConfig {
    fn default() -> Self {
        SeederConfig {
            max_particles: 6,
            stop_threshold_pe: 150.0,
            n_theta: 16,
            n_phi: 32,
            cylinder_radius: 10.0,
            classify_types: false,
        }
    }
}

/// One proposed particle with its identification probabilities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedCandidate {
    pub kin: ParticleKinematics,
    /// `(type, probability)`, summing to one.
    pub type_probs: Vec<(ParticleType, f64)>,
}

/// Seeder output: vertex, ordered candidates, and the unexplained charge.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub vertex: [f64; 3],
    /// The vertex fell back to the muon start (empty residual).
    pub vertex_low_confidence: bool,
    /// Candidates ordered by kinetic energy, descending.
    pub candidates: Vec<SeedCandidate>,
    /// Total residual after peeling, p.e.
    pub residual_pe: f64,
}

impl SeedResult {
    /// The hypothesis handed to the fitter: all candidates started at the
    /// seeded vertex.
    pub fn hypothesis(&self) -> DecompositionHypothesis {
        let mut hyp = DecompositionHypothesis {
            vertex: self.vertex,
            particles: self
                .candidates
                .iter()
                .map(|c| ParticleKinematics { start: self.vertex, ..c.kin.clone() })
                .collect(),
        };
        hyp.sort_by_ke_desc();
        hyp
    }
}

/// Half-extent of the central 3x3x3 voxel region, mm.
fn central_region_bound(grid_pitch: f64) -> f64 {
    1.5 * grid_pitch
}

/// Subtract the muon expectation from the target, clamped at zero.
fn muon_subtracted(
    target: &VoxelImage,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
) -> VoxelImage {
    let muon_img = forward::muon_expectation(muon, consts, &target.grid);
    let mut res = target.clone();
    for (r, m) in res.pe.iter_mut().zip(muon_img.pe.iter()) {
        *r = (*r - m).max(0.0);
    }
    res
}

/// Estimate the interaction vertex: hottest voxel of the muon-subtracted
/// residual, refined by the charge-weighted centroid of its 3x3x3
/// neighbourhood and clipped to the central 3x3x3 voxel region. An empty
/// residual falls back to the muon start point, flagged low-confidence.
pub fn estimate_vertex(
    target: &VoxelImage,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
) -> Result<([f64; 3], bool), Error> {
    if target.total() <= 0.0 {
        return Err(Error::domain("empty target image"));
    }
    let grid = &target.grid;
    let bound = central_region_bound(grid.pitch);
    let residual = muon_subtracted(target, muon, consts);

    if residual.total() <= 0.0 {
        let mut v = muon.start;
        for c in v.iter_mut() {
            *c = c.clamp(-bound, bound);
        }
        return Ok((v, true));
    }

    // The vertex sits in the central 3x3x3 voxels by construction, so the
    // seed search stays there; a long proton's Bragg stopping voxel further
    // out must not hijack the estimate.
    let mut best = [0usize; 3];
    let mut best_pe = -1.0;
    for ([i, j, k], pe) in residual.iter_nonzero() {
        let c = grid.center([i, j, k]);
        if c.iter().any(|x| x.abs() > bound + 1e-9) {
            continue;
        }
        if pe > best_pe {
            best_pe = pe;
            best = [i, j, k];
        }
    }
    if best_pe < 0.0 {
        // All residual charge sits outside the central region; fall back.
        let mut v = muon.start;
        for c in v.iter_mut() {
            *c = c.clamp(-bound, bound);
        }
        return Ok((v, true));
    }

    let mut wsum = 0.0;
    let mut centroid = [0.0; 3];
    let n = grid.n as i64;
    for di in -1..=1i64 {
        for dj in -1..=1i64 {
            for dk in -1..=1i64 {
                let (i, j, k) = (best[0] as i64 + di, best[1] as i64 + dj, best[2] as i64 + dk);
                if i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n {
                    continue;
                }
                let idx = [i as usize, j as usize, k as usize];
                let w = residual.get(idx);
                if w <= 0.0 {
                    continue;
                }
                let c = grid.center(idx);
                wsum += w;
                for a in 0..3 {
                    centroid[a] += w * c[a];
                }
            }
        }
    }
    let mut v = [0.0; 3];
    for a in 0..3 {
        v[a] = (centroid[a] / wsum).clamp(-bound, bound);
    }
    Ok((v, false))
}

/// Voxel flat-indices whose centres lie in the cylinder of the given radius
/// along the ray from `vertex` in direction `dir`. Half a pitch of slack
/// behind the vertex keeps the vertex voxel itself in every cylinder.
fn cylinder_members(
    grid: &crate::imaging::GridSpec,
    vertex: [f64; 3],
    dir: [f64; 3],
    radius: f64,
) -> Vec<usize> {
    let mut members = Vec::new();
    for i in 0..grid.n {
        for j in 0..grid.n {
            for k in 0..grid.n {
                let c = grid.center([i, j, k]);
                let rel = [c[0] - vertex[0], c[1] - vertex[1], c[2] - vertex[2]];
                let t = rel[0] * dir[0] + rel[1] * dir[1] + rel[2] * dir[2];
                if t < -0.5 * grid.pitch {
                    continue;
                }
                let d2 = rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2] - t * t;
                if d2 <= radius * radius {
                    members.push(grid.flat([i, j, k]));
                }
            }
        }
    }
    members
}

/// Expected image of a single hadron template.
fn template_image(
    ptype: ParticleType,
    ke: f64,
    theta: f64,
    phi: f64,
    vertex: [f64; 3],
    consts: &PhysicsConstants,
    grid: &crate::imaging::GridSpec,
) -> VoxelImage {
    let kin = ParticleKinematics { ptype, ke, theta, phi, start: vertex };
    forward::expectation_image(std::slice::from_ref(&kin), consts, grid)
}

enum BisectOutcome {
    /// Even the minimum-energy template outshines the residual.
    BelowMin,
    /// Converged within the bracket.
    Ok(f64),
    /// Residual exceeds the maximum-energy template; clamped at the top.
    ClampedHigh(f64),
}

const KE_BISECT_LO: f64 = 1.0;
// Above any in-scope hadron (generation tops out at 60 MeV); a cylinder
// charge beyond this template signals a wrong direction or vertex, not a
// more energetic particle.
const KE_BISECT_HI: f64 = 80.0;
const KE_BISECT_ITERS: usize = 24;

/// Candidates squeezed below this during polishing are residual crumbs,
/// not in-scope hadrons (generation floors: 5 MeV protons, 10 MeV ions).
const KE_PRUNE_MEV: f64 = 3.0;

/// Refinement sub-grid half-width (coarse cells) and subdivision.
const REFINE_SPAN: i64 = 2;
const REFINE_SUBDIV: f64 = 4.0;

/// Find the kinetic energy whose template total matches `target_pe`.
fn bisect_ke(
    ptype: ParticleType,
    theta: f64,
    phi: f64,
    vertex: [f64; 3],
    target_pe: f64,
    consts: &PhysicsConstants,
    grid: &crate::imaging::GridSpec,
) -> BisectOutcome {
    let total = |ke: f64| template_image(ptype, ke, theta, phi, vertex, consts, grid).total();
    if total(KE_BISECT_LO) > target_pe {
        return BisectOutcome::BelowMin;
    }
    if total(KE_BISECT_HI) < target_pe {
        return BisectOutcome::ClampedHigh(KE_BISECT_HI);
    }
    let (mut lo, mut hi) = (KE_BISECT_LO, KE_BISECT_HI);
    for _ in 0..KE_BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if total(mid) < target_pe {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    BisectOutcome::Ok(0.5 * (lo + hi))
}

/// Normalized identification probabilities from restricted likelihoods:
/// `p_t ∝ exp(-(l_t - min l)/2)`.
pub(crate) fn probs_from_losses(losses: &[(ParticleType, f64)]) -> Vec<(ParticleType, f64)> {
    let lmin = losses.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = losses.iter().map(|(_, l)| (-(l - lmin) / 2.0).exp()).collect();
    let z: f64 = weights.iter().sum();
    losses
        .iter()
        .zip(weights)
        .map(|((t, _), w)| (*t, w / z))
        .collect()
}

struct TypeFit {
    probs: Vec<(ParticleType, f64)>,
    best: Option<(ParticleType, f64)>,
}

/// Fit each hadron hypothesis to the candidate's cylinder and convert the
/// restricted likelihoods into identification probabilities.
fn classify_candidate(
    residual: &VoxelImage,
    members: &[usize],
    theta: f64,
    phi: f64,
    vertex: [f64; 3],
    cylinder_pe: f64,
    consts: &PhysicsConstants,
) -> TypeFit {
    let grid = &residual.grid;
    let mut losses = Vec::new();
    let mut fits: Vec<(ParticleType, Option<f64>)> = Vec::new();
    for t in ParticleType::HADRONS {
        let ke = match bisect_ke(t, theta, phi, vertex, cylinder_pe, consts, grid) {
            BisectOutcome::BelowMin => {
                fits.push((t, None));
                losses.push((t, f64::INFINITY));
                continue;
            }
            BisectOutcome::Ok(ke) | BisectOutcome::ClampedHigh(ke) => ke,
        };
        let tmpl = template_image(t, ke, theta, phi, vertex, consts, grid);
        let mut l = 0.0;
        for &f in members {
            l += fitter::neg2ll_term(residual.pe[f], tmpl.pe[f]);
        }
        losses.push((t, 2.0 * l));
        fits.push((t, Some(ke)));
    }
    let probs = probs_from_losses(&losses);
    let mut best: Option<(ParticleType, f64, f64)> = None;
    for ((t, l), (_, ke)) in losses.iter().zip(fits.iter()) {
        if let Some(ke) = ke {
            if best.map_or(true, |(_, _, bl)| *l < bl) {
                best = Some((*t, *ke, *l));
            }
        }
    }
    TypeFit { probs, best: best.map(|(t, ke, _)| (t, ke)) }
}

/// Classification probabilities for one already-located candidate
/// direction, given the residual image before its subtraction.
pub fn classify_type(
    residual: &VoxelImage,
    vertex: [f64; 3],
    theta: f64,
    phi: f64,
    consts: &PhysicsConstants,
    cfg: &SeederConfig,
) -> Vec<(ParticleType, f64)> {
    let dir = ParticleKinematics {
        ptype: ParticleType::Proton,
        ke: 1.0,
        theta,
        phi,
        start: vertex,
    }
    .direction();
    let members = cylinder_members(&residual.grid, vertex, dir, cfg.cylinder_radius);
    let cylinder_pe: f64 = members.iter().map(|&f| residual.pe[f]).sum();
    classify_candidate(residual, &members, theta, phi, vertex, cylinder_pe, consts).probs
}

fn direction_of(theta: f64, phi: f64) -> [f64; 3] {
    let (t, p) = (theta.to_radians(), phi.to_radians());
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

struct RefinedCandidate {
    theta: f64,
    phi: f64,
    ke: f64,
    mismatch: f64,
    /// The bisection ran out of bracket: this direction's cylinder charge
    /// exceeds any single-particle template.
    clamped: bool,
    members: Vec<usize>,
    cylinder_pe: f64,
}

/// Bisect the proton template along one direction and score the
/// within-cylinder mismatch that its subtraction would leave behind.
fn probe_direction(
    residual: &VoxelImage,
    vertex: [f64; 3],
    theta: f64,
    phi: f64,
    radius: f64,
    consts: &PhysicsConstants,
) -> Option<RefinedCandidate> {
    let grid = &residual.grid;
    let members = cylinder_members(grid, vertex, direction_of(theta, phi), radius);
    let cylinder_pe: f64 = members.iter().map(|&f| residual.pe[f]).sum();
    let (ke, clamped) = match bisect_ke(ParticleType::Proton, theta, phi, vertex, cylinder_pe, consts, grid)
    {
        BisectOutcome::BelowMin => return None,
        BisectOutcome::Ok(ke) => (ke, false),
        BisectOutcome::ClampedHigh(ke) => (ke, true),
    };
    let tmpl = template_image(ParticleType::Proton, ke, theta, phi, vertex, consts, grid);
    let mismatch: f64 = members.iter().map(|&f| (residual.pe[f] - tmpl.pe[f]).abs()).sum();
    Some(RefinedCandidate { theta, phi, ke, mismatch, clamped, members, cylinder_pe })
}

/// Best direction over the coarse scan grid, by cylinder charge.
fn coarse_direction(residual: &VoxelImage, vertex: [f64; 3], cfg: &SeederConfig) -> Option<(f64, f64)> {
    let grid = &residual.grid;
    let d_theta = 180.0 / cfg.n_theta as f64;
    let d_phi = 360.0 / cfg.n_phi as f64;
    let mut best_score = 0.0;
    let mut best = None;
    for it in 0..cfg.n_theta {
        let theta = (it as f64 + 0.5) * d_theta;
        for ip in 0..cfg.n_phi {
            let phi = ip as f64 * d_phi;
            let members =
                cylinder_members(grid, vertex, direction_of(theta, phi), cfg.cylinder_radius);
            let score: f64 = members.iter().map(|&f| residual.pe[f]).sum();
            if score > best_score {
                best_score = score;
                best = Some((theta, phi));
            }
        }
    }
    best
}

/// Best direction near `(theta_c, phi_c)` by template-subtraction mismatch;
/// directions whose bisection stays bracketed beat clamped ones.
fn refine_direction(
    residual: &VoxelImage,
    vertex: [f64; 3],
    theta_c: f64,
    phi_c: f64,
    cfg: &SeederConfig,
    consts: &PhysicsConstants,
) -> Option<RefinedCandidate> {
    let d_theta = 180.0 / cfg.n_theta as f64;
    let d_phi = 360.0 / cfg.n_phi as f64;
    let mut best: Option<RefinedCandidate> = None;
    for i in -REFINE_SPAN..=REFINE_SPAN {
        let theta = (theta_c + i as f64 * d_theta / REFINE_SUBDIV).clamp(0.1, 179.9);
        for j in -REFINE_SPAN..=REFINE_SPAN {
            let phi = (phi_c + j as f64 * d_phi / REFINE_SUBDIV).rem_euclid(360.0);
            if let Some(cand) =
                probe_direction(residual, vertex, theta, phi, cfg.cylinder_radius, consts)
            {
                let better = match &best {
                    None => true,
                    Some(b) => (cand.clamped, cand.mismatch) < (b.clamped, b.mismatch),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }
    best
}

/// Peel particle candidates off the target in descending kinetic-energy
/// order, starting from the centroid vertex estimate. Deterministic for a
/// given target.
pub fn peel(
    target: &VoxelImage,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &SeederConfig,
) -> Result<SeedResult, Error> {
    let (vertex, low_conf) = estimate_vertex(target, muon, consts)?;
    peel_at(target, muon, consts, cfg, vertex, low_conf)
}

/// Peel with the vertex pinned externally.
pub fn peel_at(
    target: &VoxelImage,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &SeederConfig,
    vertex: [f64; 3],
    low_conf: bool,
) -> Result<SeedResult, Error> {
    let grid = &target.grid;
    let mut residual = muon_subtracted(target, muon, consts);
    let mut candidates: Vec<SeedCandidate> = Vec::new();

    while candidates.len() < cfg.max_particles && residual.total() >= cfg.stop_threshold_pe {
        // (a) coarse direction scan: best cylinder charge over the fixed grid
        let Some((theta_c, phi_c)) = coarse_direction(&residual, vertex, cfg) else {
            break;
        };

        // (b) local refinement around the winner: the cylinder charge is
        // insensitive at sub-cell scale, so pick the direction whose
        // bisected template subtracts most cleanly.
        let Some(win) = refine_direction(&residual, vertex, theta_c, phi_c, cfg, consts) else {
            break; // residual below the single-particle minimum everywhere
        };

        // (c) final kinetic energy (and type, when identifying) at the
        // refined direction
        let (ptype, ke, type_probs) = if cfg.classify_types {
            let fit = classify_candidate(
                &residual,
                &win.members,
                win.theta,
                win.phi,
                vertex,
                win.cylinder_pe,
                consts,
            );
            match fit.best {
                Some((t, ke)) => (t, ke, fit.probs),
                None => break,
            }
        } else {
            (ParticleType::Proton, win.ke, vec![(ParticleType::Proton, 1.0)])
        };

        // (d) subtract the template, clamping at zero
        let tmpl = template_image(ptype, ke, win.theta, win.phi, vertex, consts, grid);
        for (r, t) in residual.pe.iter_mut().zip(tmpl.pe.iter()) {
            *r = (*r - t).max(0.0);
        }

        candidates.push(SeedCandidate {
            kin: ParticleKinematics { ptype, ke, theta: win.theta, phi: win.phi, start: vertex },
            type_probs,
        });
    }

    candidates.sort_by(|a, b| b.kin.ke.total_cmp(&a.kin.ke));
    Ok(SeedResult {
        vertex,
        vertex_low_confidence: low_conf,
        candidates,
        residual_pe: residual.total(),
    })
}

/// Iterations per particle of the per-cycle polishing descent.
const REFIT_M_FACTOR: usize = 25;

/// Residual of the target after subtracting the hypothesis-plus-muon
/// expectation, clamped at zero.
fn hypothesis_residual(
    target: &VoxelImage,
    hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
) -> VoxelImage {
    let img = forward::generate(hyp, muon, consts, &target.grid, &forward::GenMode::Expectation)
        .expect("hypothesis kinematics stay positive during seeding");
    let mut res = target.clone();
    for (r, m) in res.pe.iter_mut().zip(img.pe.iter()) {
        *r = (*r - m).max(0.0);
    }
    res
}

/// Current goodness of a hypothesis against the target.
fn hypothesis_loss(
    target: &VoxelImage,
    hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
) -> f64 {
    let img = forward::generate(hyp, muon, consts, &target.grid, &forward::GenMode::Expectation)
        .expect("hypothesis kinematics stay positive during seeding");
    crate::fitter::neg2_log_likelihood(target, &img).expect("same grid")
}

/// A dropped candidate must cost at least this much `-2 ln L` to be kept:
/// well below the few-hundred score of the smallest in-scope hadron, well
/// above the residual crumbs left by imperfect subtraction.
const KEEP_DELTA_NEG2LL: f64 = 60.0;

/// Major-cycle seeding from one vertex start: locate a candidate on the
/// residual, polish the whole hypothesis (vertex included) with a short
/// expectation-template descent, prune crumbs, repeat; a second sweep
/// rebuilds all candidates from scratch at the converged vertex, where the
/// energy bisection no longer saturates.
fn seed_from(
    target: &VoxelImage,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &SeederConfig,
    refit_cfg: &crate::fitter::FitConfig,
    vertex0: [f64; 3],
) -> Result<DecompositionHypothesis, Error> {
    let bound = central_region_bound(target.grid.pitch);
    let mut hyp = DecompositionHypothesis { vertex: vertex0, particles: Vec::new() };
    for sweep in 0..2 {
        if sweep == 1 {
            hyp.particles.clear();
        }
        let mut residual = hypothesis_residual(target, &hyp, muon, consts);
        let mut cycles = 0;
        while hyp.particles.len() < cfg.max_particles
            && residual.total() >= cfg.stop_threshold_pe
            && cycles < cfg.max_particles + 3
        {
            cycles += 1;
            let Some((theta_c, phi_c)) = coarse_direction(&residual, hyp.vertex, cfg) else {
                break;
            };
            let Some(win) = refine_direction(&residual, hyp.vertex, theta_c, phi_c, cfg, consts)
            else {
                break;
            };
            hyp.particles.push(ParticleKinematics {
                ptype: ParticleType::Proton,
                ke: win.ke,
                theta: win.theta,
                phi: win.phi,
                start: hyp.vertex,
            });
            hyp = crate::fitter::refine_hypothesis(target, &hyp, muon, consts, refit_cfg)?;
            for c in hyp.vertex.iter_mut() {
                *c = c.clamp(-bound, bound);
            }
            hyp.particles.retain(|p| p.ke >= KE_PRUNE_MEV);
            for p in hyp.particles.iter_mut() {
                p.start = hyp.vertex;
            }
            residual = hypothesis_residual(target, &hyp, muon, consts);
        }
    }
    Ok(hyp)
}

/// Centres of the hottest central-region voxels of the muon-subtracted
/// residual, hottest first.
fn central_peaks(residual: &VoxelImage, k: usize) -> Vec<[f64; 3]> {
    let grid = &residual.grid;
    let bound = central_region_bound(grid.pitch);
    let mut peaks: Vec<([f64; 3], f64)> = Vec::new();
    for (idx, pe) in residual.iter_nonzero() {
        let c = grid.center(idx);
        if c.iter().all(|x| x.abs() <= bound + 1e-9) {
            peaks.push((c, pe));
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(k);
    peaks.into_iter().map(|(c, _)| c).collect()
}

/// Full seeding pass: run the major-cycle loop from a handful of vertex
/// starts, keep the hypothesis with the best likelihood, then drop any
/// candidate whose removal barely costs likelihood (residual crumbs
/// masquerade as soft particles; a real hadron is hundreds of units of
/// `-2 ln L` strong). Scenario-2 identification runs at the end on each
/// survivor's isolated residual.
pub fn seed_event(
    target: &VoxelImage,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &SeederConfig,
    fit_cfg: &crate::fitter::FitConfig,
) -> Result<SeedResult, Error> {
    let (vertex0, low_conf) = estimate_vertex(target, muon, consts)?;
    let refit_cfg = crate::fitter::FitConfig {
        n: 1,
        m_factor: REFIT_M_FACTOR,
        expectation_template: true,
        ..fit_cfg.clone()
    };

    // Vertex starts: the centroid estimate plus the hottest central voxels.
    let mut starts = vec![vertex0];
    let muon_res = muon_subtracted(target, muon, consts);
    for peak in central_peaks(&muon_res, 3) {
        if starts.iter().all(|s| {
            let d2: f64 = s.iter().zip(peak.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 > 1.0
        }) {
            starts.push(peak);
        }
    }

    let mut best: Option<(f64, DecompositionHypothesis)> = None;
    for start in starts {
        let hyp = seed_from(target, muon, consts, cfg, &refit_cfg, start)?;
        let loss = hypothesis_loss(target, &hyp, muon, consts);
        if best.as_ref().map_or(true, |(bl, _)| loss < *bl) {
            best = Some((loss, hyp));
        }
    }
    let (mut loss, mut hyp) = best.expect("at least one vertex start");

    // Backward elimination as a likelihood-ratio test: drop a candidate,
    // let the survivors re-polish, and keep the drop only if it costs
    // less than a real hadron's worth of likelihood.
    loop {
        let mut drop: Option<(f64, DecompositionHypothesis)> = None;
        for j in 0..hyp.particles.len() {
            let reduced = DecompositionHypothesis {
                vertex: hyp.vertex,
                particles: hyp
                    .particles
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .map(|(_, p)| p.clone())
                    .collect(),
            };
            let reduced = if reduced.particles.is_empty() {
                reduced
            } else {
                crate::fitter::refine_hypothesis(target, &reduced, muon, consts, &refit_cfg)?
            };
            let l = hypothesis_loss(target, &reduced, muon, consts);
            if l - loss < KEEP_DELTA_NEG2LL && drop.as_ref().map_or(true, |(dl, _)| l < *dl) {
                drop = Some((l, reduced));
            }
        }
        match drop {
            Some((l, reduced)) => {
                hyp = reduced;
                loss = l;
                if hyp.particles.is_empty() {
                    break;
                }
            }
            None => break,
        }
    }

    let mut candidates: Vec<SeedCandidate> = Vec::new();
    for (i, kin) in hyp.particles.iter().enumerate() {
        let (kin, type_probs) = if cfg.classify_types {
            // Identify against the residual with every other candidate
            // (and the muon) subtracted.
            let others = DecompositionHypothesis {
                vertex: hyp.vertex,
                particles: hyp
                    .particles
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, p)| p.clone())
                    .collect(),
            };
            let iso = hypothesis_residual(target, &others, muon, consts);
            let members = cylinder_members(
                &target.grid,
                hyp.vertex,
                direction_of(kin.theta, kin.phi),
                cfg.cylinder_radius,
            );
            let cylinder_pe: f64 = members.iter().map(|&f| iso.pe[f]).sum();
            let fit = classify_candidate(
                &iso,
                &members,
                kin.theta,
                kin.phi,
                hyp.vertex,
                cylinder_pe,
                consts,
            );
            match fit.best {
                Some((t, ke)) if t != kin.ptype => (
                    ParticleKinematics { ptype: t, ke, ..kin.clone() },
                    fit.probs,
                ),
                _ => (kin.clone(), fit.probs),
            }
        } else {
            (kin.clone(), vec![(ParticleType::Proton, 1.0)])
        };
        candidates.push(SeedCandidate { kin, type_probs });
    }

    // Retyping changes the template shape; one more short polish settles
    // the kinematics with the final types.
    if cfg.classify_types
        && candidates
            .iter()
            .any(|c| c.kin.ptype != ParticleType::Proton)
    {
        let retyped = DecompositionHypothesis {
            vertex: hyp.vertex,
            particles: candidates.iter().map(|c| c.kin.clone()).collect(),
        };
        let polished = crate::fitter::refine_hypothesis(target, &retyped, muon, consts, &refit_cfg)?;
        for (cand, p) in candidates.iter_mut().zip(polished.particles.iter()) {
            cand.kin = p.clone();
        }
        hyp.vertex = polished.vertex;
        hyp.particles = polished.particles;
    }

    let residual = hypothesis_residual(
        target,
        &DecompositionHypothesis {
            vertex: hyp.vertex,
            particles: candidates.iter().map(|c| c.kin.clone()).collect(),
        },
        muon,
        consts,
    );
    candidates.sort_by(|a, b| b.kin.ke.total_cmp(&a.kin.ke));
    Ok(SeedResult {
        vertex: hyp.vertex,
        vertex_low_confidence: low_conf,
        candidates,
        residual_pe: residual.total(),
    })
}
