//! Gradient-descent refinement and likelihood inference.
//!
//! Two descent variants refine a seeded hypothesis against a target image:
//!
//! * [`fit_best_image`] runs `n` independent descents, each with its own
//!   fixed noise seed, minimizing the mean squared error; the best
//!   (loss, parameters) pair across all runs and iterations wins.
//! * [`fit_likelihood`] runs a single descent on the Poisson likelihood
//!   ratio, comparing the target against a template averaged over `n` fresh
//!   draws per iteration (or against the analytic expectation template).
//!
//! Both use Adam with per-category learning rates (vertex / kinetic energy /
//! direction). Internally the descent works in an unconstrained chart:
//! kinetic energies through a softplus floor, directions through a local
//! tangent plane anchored at the seed direction, so the azimuth wrap never
//! produces a discontinuity. [`profile_parameter`] fixes one parameter at a
//! time and re-minimizes the rest, yielding Δℓ = 1 confidence intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eventgen::DecompositionHypothesis;
use crate::forward::{self, GenMode, LossKind};
use crate::imaging::VoxelImage;
use crate::physics::{ParticleKinematics, ParticleType, PhysicsConstants};
use crate::rng::{self, salt};

/// Expectation clamp inside the Poisson likelihood ratio, p.e.
pub const EXPECT_CLAMP_PE: f64 = 1e-9;

/// Lower bound on fitted kinetic energies, MeV (softplus floor).
pub const KE_FLOOR_MEV: f64 = 0.5;

/// The descent works on vertex coordinates in voxel-pitch units, putting
/// the three parameter categories on comparable scales for the stated
/// per-category learning rates.
pub const VERTEX_UNIT_MM: f64 = 10.0;

/// One voxel's contribution to `-ln L` (halved `-2 ln L` term):
/// `obs*ln(obs/exp) + exp - obs`, with the `obs = 0` term taken as `exp`
/// and the expectation clamped below at [`EXPECT_CLAMP_PE`] when `obs > 0`.
pub(crate) fn neg2ll_term(obs: f64, exp: f64) -> f64 {
    if obs > 0.0 {
        let e = exp.max(EXPECT_CLAMP_PE);
        obs * (obs / e).ln() + e - obs
    } else {
        exp
    }
}

/// Derivative of the full (doubled) voxel term with respect to the
/// expectation; zero on the clamped branch.
pub(crate) fn dneg2ll_dexp(obs: f64, exp: f64) -> f64 {
    if obs > 0.0 {
        if exp <= EXPECT_CLAMP_PE {
            0.0
        } else {
            2.0 * (1.0 - obs / exp)
        }
    } else {
        2.0
    }
}

/// `-2 ln L` of the observed image given the expected one: twice the sum of
/// Poisson likelihood-ratio terms over voxels. Zero iff the images agree.
pub fn neg2_log_likelihood(obs: &VoxelImage, exp: &VoxelImage) -> Result<f64, Error> {
    if obs.grid != exp.grid {
        return Err(Error::GridMismatch(format!(
            "obs grid {:?} vs exp grid {:?}",
            obs.grid, exp.grid
        )));
    }
    let mut acc = 0.0;
    for (&o, &e) in obs.pe.iter().zip(exp.pe.iter()) {
        acc += neg2ll_term(o, e);
    }
    Ok(2.0 * acc)
}

/// Adam optimizer state (first/second moments plus the step counter).
#[derive(Clone, Debug)]
pub struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        AdamState { t: 0, m: vec![0.0; dim], v: vec![0.0; dim], beta1, beta2, eps }
    }

    /// One bias-corrected Adam update with per-parameter learning rates.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Free function form of the Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lrs: &[f64]) {
    state.step(params, grads, lrs);
}

/// Optimizer settings for both descent variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Independent runs (best-image) or draws per iteration (likelihood).
    pub n: usize,
    /// Iterations per reconstructed particle.
    pub m_factor: usize,
    pub lr_vertex: f64,
    pub lr_ke: f64,
    pub lr_dir: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Base noise seed; all per-run and per-iteration seeds derive from it.
    pub seed: u64,
    /// Use the analytic n -> infinity template in the likelihood descent.
    pub expectation_template: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n: 200,
            m_factor: 50,
            lr_vertex: 0.005,
            lr_ke: 0.05,
            lr_dir: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            expectation_template: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n == 0 || self.m_factor == 0 {
            return Err(Error::domain("n and m_factor must be >= 1"));
        }
        if self.lr_vertex <= 0.0 || self.lr_ke <= 0.0 || self.lr_dir <= 0.0 {
            return Err(Error::domain("learning rates must be > 0"));
        }
        Ok(())
    }
}

/// Best-fit parameters with bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    /// Fitted hypothesis, particles re-sorted by kinetic energy descending.
    pub hypothesis: DecompositionHypothesis,
    pub best_loss: f64,
    /// Best-so-far loss per iteration (non-increasing).
    pub loss_history: Vec<f64>,
    /// Best loss of each independent run (best-image variant only).
    pub per_run_losses: Option<Vec<f64>>,
    /// Confidence intervals filled in by profiling, `(param name, bounds)`.
    pub ci: Option<Vec<(String, CiBounds)>>,
}

/// One continuous parameter of the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamId {
    VertexX,
    VertexY,
    VertexZ,
    /// Kinetic energy of particle `i` (0-based, ke-descending order).
    Ke(usize),
    Theta(usize),
    Phi(usize),
}

impl ParamId {
    /// Parse `vx`/`vy`/`vz`/`ke1`/`theta2`/`phi3` (1-based particle rank).
    pub fn parse(s: &str) -> Result<ParamId, Error> {
        match s {
            "vx" => return Ok(ParamId::VertexX),
            "vy" => return Ok(ParamId::VertexY),
            "vz" => return Ok(ParamId::VertexZ),
            _ => {}
        }
        for (prefix, mk) in [
            ("ke", ParamId::Ke as fn(usize) -> ParamId),
            ("theta", ParamId::Theta as fn(usize) -> ParamId),
            ("phi", ParamId::Phi as fn(usize) -> ParamId),
        ] {
            if let Some(rank) = s.strip_prefix(prefix) {
                if let Ok(r) = rank.parse::<usize>() {
                    if r >= 1 {
                        return Ok(mk(r - 1));
                    }
                }
            }
        }
        Err(Error::domain(format!("unknown parameter selector: {s}")))
    }

    pub fn name(&self) -> String {
        match self {
            ParamId::VertexX => "vx".into(),
            ParamId::VertexY => "vy".into(),
            ParamId::VertexZ => "vz".into(),
            ParamId::Ke(i) => format!("ke{}", i + 1),
            ParamId::Theta(i) => format!("theta{}", i + 1),
            ParamId::Phi(i) => format!("phi{}", i + 1),
        }
    }

    /// Current value of this parameter in a hypothesis.
    pub fn value_in(&self, hyp: &DecompositionHypothesis) -> Result<f64, Error> {
        let part = |i: usize| {
            hyp.particles
                .get(i)
                .ok_or_else(|| Error::domain(format!("hypothesis has no particle {}", i + 1)))
        };
        Ok(match self {
            ParamId::VertexX => hyp.vertex[0],
            ParamId::VertexY => hyp.vertex[1],
            ParamId::VertexZ => hyp.vertex[2],
            ParamId::Ke(i) => part(*i)?.ke,
            ParamId::Theta(i) => part(*i)?.theta,
            ParamId::Phi(i) => part(*i)?.phi,
        })
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn softplus_inv(v: f64) -> f64 {
    let v = v.max(1e-9);
    if v > 30.0 {
        v
    } else {
        v + (-(-v).exp_m1()).ln()
    }
}

fn sigmoid(u: f64) -> f64 {
    0.5 * (1.0 + (0.5 * u).tanh())
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn unit_from_angles(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

fn angles_from_unit(n: [f64; 3]) -> (f64, f64) {
    let theta = n[2].clamp(-1.0, 1.0).acos().to_degrees();
    let mut phi = n[1].atan2(n[0]).to_degrees();
    if phi < 0.0 {
        phi += 360.0;
    }
    (theta, phi)
}

/// Orthonormal tangent frame anchored at the seed direction.
#[derive(Clone, Debug)]
struct DirFrame {
    n0: [f64; 3],
    e1: [f64; 3],
    e2: [f64; 3],
}

impl DirFrame {
    fn new(theta_deg: f64, phi_deg: f64) -> DirFrame {
        let n0 = unit_from_angles(theta_deg, phi_deg);
        let helper = if n0[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let c = cross(n0, helper);
        let e1 = scale(c, 1.0 / norm(c));
        let e2 = cross(n0, e1);
        DirFrame { n0, e1, e2 }
    }

    /// Direction for tangent offsets `(a, b)` in degree-equivalent units.
    fn direction(&self, a: f64, b: f64) -> [f64; 3] {
        let ar = a.to_radians();
        let br = b.to_radians();
        let v = [
            self.n0[0] + ar * self.e1[0] + br * self.e2[0],
            self.n0[1] + ar * self.e1[1] + br * self.e2[1],
            self.n0[2] + ar * self.e1[2] + br * self.e2[2],
        ];
        scale(v, 1.0 / norm(v))
    }

    /// Pull the gradient w.r.t. (theta, phi) in degrees back to (a, b).
    fn pull(&self, a: f64, b: f64, g_theta_deg: f64, g_phi_deg: f64) -> (f64, f64) {
        let ar = a.to_radians();
        let br = b.to_radians();
        let v = [
            self.n0[0] + ar * self.e1[0] + br * self.e2[0],
            self.n0[1] + ar * self.e1[1] + br * self.e2[1],
            self.n0[2] + ar * self.e1[2] + br * self.e2[2],
        ];
        let vn = norm(v);
        let n = scale(v, 1.0 / vn);
        let rad = std::f64::consts::PI / 180.0;
        let dn = |e: [f64; 3]| {
            let ne = dot(n, e);
            scale([e[0] - n[0] * ne, e[1] - n[1] * ne, e[2] - n[2] * ne], rad / vn)
        };
        let dn_da = dn(self.e1);
        let dn_db = dn(self.e2);

        let s2 = (1.0 - n[2] * n[2]).max(0.0);
        let s = s2.sqrt();
        let rho2 = n[0] * n[0] + n[1] * n[1];
        let deg = 180.0 / std::f64::consts::PI;
        // d(theta_deg)/dn and d(phi_deg)/dn, guarded at the poles where the
        // spherical chart is singular (the loss itself is smooth there).
        let chain = |dnv: [f64; 3]| {
            let mut g = 0.0;
            if s > 1e-9 {
                g += g_theta_deg * deg * (-dnv[2] / s);
            }
            if rho2 > 1e-18 {
                g += g_phi_deg * deg * ((n[0] * dnv[1] - n[1] * dnv[0]) / rho2);
            }
            g
        };
        (chain(dn_da), chain(dn_db))
    }
}

#[derive(Clone, Debug)]
enum PartCoords {
    /// u_ke, a, b
    Full { frame: DirFrame },
    /// a, b
    FixedKe { ke: f64, frame: DirFrame },
    /// u_ke, phi (degrees)
    FixedTheta { theta: f64 },
    /// u_ke, theta (degrees)
    FixedPhi { phi: f64 },
}

impl PartCoords {
    fn dim(&self) -> usize {
        match self {
            PartCoords::Full { .. } => 3,
            _ => 2,
        }
    }
}

/// Unconstrained coordinate chart around a seed hypothesis, optionally with
/// one natural parameter frozen (for profiling).
#[derive(Clone, Debug)]
pub(crate) struct Chart {
    vertex_fixed: [Option<f64>; 3],
    parts: Vec<(ParticleType, PartCoords)>,
}

impl Chart {
    pub fn free(hyp: &DecompositionHypothesis) -> Chart {
        Chart {
            vertex_fixed: [None; 3],
            parts: hyp
                .particles
                .iter()
                .map(|p| (p.ptype, PartCoords::Full { frame: DirFrame::new(p.theta, p.phi) }))
                .collect(),
        }
    }

    pub fn with_fixed(hyp: &DecompositionHypothesis, param: ParamId, value: f64) -> Result<Chart, Error> {
        let mut chart = Chart::free(hyp);
        let need = |i: usize| -> Result<(), Error> {
            if i >= chart.parts.len() {
                Err(Error::domain(format!("hypothesis has no particle {}", i + 1)))
            } else {
                Ok(())
            }
        };
        match param {
            ParamId::VertexX => chart.vertex_fixed[0] = Some(value),
            ParamId::VertexY => chart.vertex_fixed[1] = Some(value),
            ParamId::VertexZ => chart.vertex_fixed[2] = Some(value),
            ParamId::Ke(i) => {
                need(i)?;
                let frame = DirFrame::new(hyp.particles[i].theta, hyp.particles[i].phi);
                chart.parts[i].1 = PartCoords::FixedKe { ke: value, frame };
            }
            ParamId::Theta(i) => {
                need(i)?;
                chart.parts[i].1 = PartCoords::FixedTheta { theta: value };
            }
            ParamId::Phi(i) => {
                need(i)?;
                chart.parts[i].1 = PartCoords::FixedPhi { phi: value };
            }
        }
        Ok(chart)
    }

    pub fn dim(&self) -> usize {
        let nv = self.vertex_fixed.iter().filter(|f| f.is_none()).count();
        nv + self.parts.iter().map(|(_, c)| c.dim()).sum::<usize>()
    }

    /// Initial coordinates from the seed hypothesis.
    pub fn init(&self, hyp: &DecompositionHypothesis) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for a in 0..3 {
            if self.vertex_fixed[a].is_none() {
                x.push(hyp.vertex[a] / VERTEX_UNIT_MM);
            }
        }
        for (i, (_, coords)) in self.parts.iter().enumerate() {
            let p = &hyp.particles[i];
            match coords {
                PartCoords::Full { .. } => {
                    x.push(softplus_inv(p.ke - KE_FLOOR_MEV));
                    x.push(0.0);
                    x.push(0.0);
                }
                PartCoords::FixedKe { .. } => {
                    x.push(0.0);
                    x.push(0.0);
                }
                PartCoords::FixedTheta { .. } => {
                    x.push(softplus_inv(p.ke - KE_FLOOR_MEV));
                    x.push(p.phi);
                }
                PartCoords::FixedPhi { .. } => {
                    x.push(softplus_inv(p.ke - KE_FLOOR_MEV));
                    x.push(p.theta);
                }
            }
        }
        x
    }

    /// Per-coordinate learning rates.
    pub fn lrs(&self, cfg: &FitConfig) -> Vec<f64> {
        let mut lrs = Vec::with_capacity(self.dim());
        for a in 0..3 {
            if self.vertex_fixed[a].is_none() {
                lrs.push(cfg.lr_vertex);
            }
        }
        for (_, coords) in &self.parts {
            match coords {
                PartCoords::Full { .. } => {
                    lrs.push(cfg.lr_ke);
                    lrs.push(cfg.lr_dir);
                    lrs.push(cfg.lr_dir);
                }
                PartCoords::FixedKe { .. } => {
                    lrs.push(cfg.lr_dir);
                    lrs.push(cfg.lr_dir);
                }
                PartCoords::FixedTheta { .. } | PartCoords::FixedPhi { .. } => {
                    lrs.push(cfg.lr_ke);
                    lrs.push(cfg.lr_dir);
                }
            }
        }
        lrs
    }

    /// Natural hypothesis at chart coordinates `x`.
    pub fn hypothesis(&self, x: &[f64]) -> DecompositionHypothesis {
        let mut it = x.iter().copied();
        let mut vertex = [0.0; 3];
        for a in 0..3 {
            vertex[a] = match self.vertex_fixed[a] {
                Some(v) => v,
                None => it.next().expect("coordinate underflow") * VERTEX_UNIT_MM,
            };
        }
        let mut particles = Vec::with_capacity(self.parts.len());
        for (ptype, coords) in &self.parts {
            let (ke, theta, phi) = match coords {
                PartCoords::Full { frame } => {
                    let u = it.next().unwrap();
                    let a = it.next().unwrap();
                    let b = it.next().unwrap();
                    let (t, p) = angles_from_unit(frame.direction(a, b));
                    (KE_FLOOR_MEV + softplus(u), t, p)
                }
                PartCoords::FixedKe { ke, frame } => {
                    let a = it.next().unwrap();
                    let b = it.next().unwrap();
                    let (t, p) = angles_from_unit(frame.direction(a, b));
                    (*ke, t, p)
                }
                PartCoords::FixedTheta { theta } => {
                    let u = it.next().unwrap();
                    let phi = it.next().unwrap();
                    (KE_FLOOR_MEV + softplus(u), *theta, phi)
                }
                PartCoords::FixedPhi { phi } => {
                    let u = it.next().unwrap();
                    let theta = it.next().unwrap();
                    (KE_FLOOR_MEV + softplus(u), theta, *phi)
                }
            };
            particles.push(ParticleKinematics { ptype: *ptype, ke, theta, phi, start: vertex });
        }
        DecompositionHypothesis { vertex, particles }
    }

    /// Chain the gradient w.r.t. the natural parameter vector
    /// `[vx, vy, vz, (ke, theta, phi) per particle]` back to chart coords.
    pub fn pull_gradient(&self, x: &[f64], natural: &[f64]) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.dim());
        let mut it = x.iter().copied();
        for a in 0..3 {
            if self.vertex_fixed[a].is_none() {
                let _ = it.next();
                g.push(natural[a] * VERTEX_UNIT_MM);
            }
        }
        for (i, (_, coords)) in self.parts.iter().enumerate() {
            let base = 3 + 3 * i;
            let (g_ke, g_theta, g_phi) = (natural[base], natural[base + 1], natural[base + 2]);
            match coords {
                PartCoords::Full { frame } => {
                    let u = it.next().unwrap();
                    let a = it.next().unwrap();
                    let b = it.next().unwrap();
                    let (ga, gb) = frame.pull(a, b, g_theta, g_phi);
                    g.push(g_ke * sigmoid(u));
                    g.push(ga);
                    g.push(gb);
                }
                PartCoords::FixedKe { frame, .. } => {
                    let a = it.next().unwrap();
                    let b = it.next().unwrap();
                    let (ga, gb) = frame.pull(a, b, g_theta, g_phi);
                    g.push(ga);
                    g.push(gb);
                }
                PartCoords::FixedTheta { .. } => {
                    let u = it.next().unwrap();
                    let _ = it.next();
                    g.push(g_ke * sigmoid(u));
                    g.push(g_phi);
                }
                PartCoords::FixedPhi { .. } => {
                    let u = it.next().unwrap();
                    let _ = it.next();
                    g.push(g_ke * sigmoid(u));
                    g.push(g_theta);
                }
            }
        }
        g
    }
}

struct Trace {
    losses: Vec<f64>,
    best_loss: f64,
    best_x: Vec<f64>,
}

/// Adam descent over a chart; `eval` returns loss and natural-parameter
/// gradient for the hypothesis of iteration `j`. The best pre-update
/// parameters across iterations are kept (iteration 0 covers the seed).
fn descend<F>(
    chart: &Chart,
    seed_hyp: &DecompositionHypothesis,
    cfg: &FitConfig,
    iters: usize,
    mut eval: F,
) -> Result<Trace, Error>
where
    F: FnMut(usize, &DecompositionHypothesis) -> Result<(f64, Vec<f64>), Error>,
{
    let mut x = chart.init(seed_hyp);
    let lrs = chart.lrs(cfg);
    let mut adam = AdamState::new(x.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut losses = Vec::with_capacity(iters);
    let mut best_loss = f64::INFINITY;
    let mut best_x = x.clone();
    for j in 0..iters {
        let hyp = chart.hypothesis(&x);
        let (loss, natural) = eval(j, &hyp)?;
        losses.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_x = x.clone();
        }
        let g = chart.pull_gradient(&x, &natural);
        adam.step(&mut x, &g, &lrs);
    }
    Ok(Trace { losses, best_loss, best_x })
}

/// Wrap angles into their reporting ranges and sort by ke descending.
fn finalize(mut hyp: DecompositionHypothesis) -> DecompositionHypothesis {
    for p in hyp.particles.iter_mut() {
        let n = unit_from_angles(p.theta, p.phi);
        let (t, f) = angles_from_unit(n);
        p.theta = t;
        p.phi = f;
    }
    hyp.sort_by_ke_desc();
    hyp
}

fn cummin(values: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .iter()
        .map(|&v| {
            if v < best {
                best = v;
            }
            best
        })
        .collect()
}

/// Best-fit-image descent: `n` independent runs with fixed per-run noise
/// seeds, minimizing the mean squared error; the global best wins.
pub fn fit_best_image(
    target: &VoxelImage,
    seed_hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &FitConfig,
) -> Result<FitResult, Error> {
    cfg.validate()?;
    let chart = Chart::free(seed_hyp);
    let iters = cfg.m_factor * seed_hyp.particles.len().max(1);

    let runs: Vec<Trace> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let z = rng::fold_key(&[salt::FIT_ALG1, cfg.seed, i as u64]);
            let mode = GenMode::Sample { z };
            descend(&chart, seed_hyp, cfg, iters, |_, hyp| {
                forward::loss_and_gradient(hyp, muon, consts, target, LossKind::Mse, &mode)
            })
        })
        .collect::<Result<_, _>>()?;

    let per_run: Vec<f64> = runs.iter().map(|r| r.best_loss).collect();
    let mut best_idx = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.best_loss < runs[best_idx].best_loss {
            best_idx = i;
        }
    }
    let mut history = vec![f64::INFINITY; iters];
    for r in &runs {
        let cm = cummin(&r.losses);
        for (h, c) in history.iter_mut().zip(cm) {
            if c < *h {
                *h = c;
            }
        }
    }
    Ok(FitResult {
        hypothesis: finalize(chart.hypothesis(&runs[best_idx].best_x)),
        best_loss: runs[best_idx].best_loss,
        loss_history: history,
        per_run_losses: Some(per_run),
        ci: None,
    })
}

fn alg2_mode(cfg: &FitConfig, iteration: usize) -> GenMode {
    if cfg.expectation_template {
        GenMode::Expectation
    } else {
        let seeds = (0..cfg.n)
            .map(|i| rng::fold_key(&[salt::FIT_ALG2, cfg.seed, iteration as u64, i as u64]))
            .collect();
        GenMode::AveragedSamples { seeds }
    }
}

/// Likelihood-inference descent: one run minimizing `-2 ln L` against a
/// template averaged over `n` fresh draws per iteration (or the analytic
/// expectation template when configured).
pub fn fit_likelihood(
    target: &VoxelImage,
    seed_hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &FitConfig,
) -> Result<FitResult, Error> {
    cfg.validate()?;
    let chart = Chart::free(seed_hyp);
    let iters = cfg.m_factor * seed_hyp.particles.len().max(1);
    let trace = descend(&chart, seed_hyp, cfg, iters, |j, hyp| {
        forward::loss_and_gradient(hyp, muon, consts, target, LossKind::Neg2Ll, &alg2_mode(cfg, j))
    })?;
    Ok(FitResult {
        hypothesis: finalize(chart.hypothesis(&trace.best_x)),
        best_loss: trace.best_loss,
        loss_history: cummin(&trace.losses),
        per_run_losses: None,
        ci: None,
    })
}

/// Likelihood descent that keeps the seed's particle order (the seeder
/// tracks candidates by index while it is still adding them).
pub(crate) fn refine_hypothesis(
    target: &VoxelImage,
    seed_hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &FitConfig,
) -> Result<DecompositionHypothesis, Error> {
    cfg.validate()?;
    let chart = Chart::free(seed_hyp);
    let iters = cfg.m_factor * seed_hyp.particles.len().max(1);
    let trace = descend(&chart, seed_hyp, cfg, iters, |j, hyp| {
        forward::loss_and_gradient(hyp, muon, consts, target, LossKind::Neg2Ll, &alg2_mode(cfg, j))
    })?;
    let mut hyp = chart.hypothesis(&trace.best_x);
    for p in hyp.particles.iter_mut() {
        let n = unit_from_angles(p.theta, p.phi);
        let (t, f) = angles_from_unit(n);
        p.theta = t;
        p.phi = f;
    }
    Ok(hyp)
}

/// A Δℓ = 1 interval from a profile curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiBounds {
    pub lo: f64,
    pub hi: f64,
    /// The curve never crossed the threshold below/above the grid.
    pub lo_open: bool,
    pub hi_open: bool,
}

/// Profiled likelihood of one parameter over a value grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub param: String,
    pub values: Vec<f64>,
    pub losses: Vec<f64>,
    pub loss_min: f64,
    pub ci: CiBounds,
}

/// Interval `{v : loss(v) - min <= delta}` with linearly interpolated
/// endpoints; flags mark endpoints that ran off the grid.
pub fn ci_from_curve(values: &[f64], losses: &[f64], delta: f64) -> (f64, CiBounds) {
    assert_eq!(values.len(), losses.len());
    assert!(values.len() >= 2, "profile grid needs at least two points");
    let mut k = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[k] {
            k = i;
        }
    }
    let lmin = losses[k];
    let thr = lmin + delta;

    let mut lo = values[0];
    let mut lo_open = true;
    for i in (0..k).rev() {
        if losses[i] > thr {
            let t = (losses[i] - thr) / (losses[i] - losses[i + 1]);
            lo = values[i] + t * (values[i + 1] - values[i]);
            lo_open = false;
            break;
        }
    }
    let mut hi = values[values.len() - 1];
    let mut hi_open = true;
    for i in k + 1..values.len() {
        if losses[i] > thr {
            let t = (losses[i] - thr) / (losses[i] - losses[i - 1]);
            hi = values[i] + t * (values[i - 1] - values[i]);
            hi_open = false;
            break;
        }
    }
    (lmin, CiBounds { lo, hi, lo_open, hi_open })
}

/// Profile one parameter: fix it at each grid value, re-minimize the
/// likelihood over all other parameters warm-started from `star`, and
/// extract the Δℓ = 1 interval.
pub fn profile_parameter(
    target: &VoxelImage,
    star: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    cfg: &FitConfig,
    param: ParamId,
    values: &[f64],
) -> Result<ProfileCurve, Error> {
    cfg.validate()?;
    if values.len() < 2 {
        return Err(Error::domain("profile grid needs at least two values"));
    }
    let iters = cfg.m_factor * star.particles.len().max(1);
    let losses: Vec<f64> = values
        .par_iter()
        .map(|&v| -> Result<f64, Error> {
            let chart = Chart::with_fixed(star, param, v)?;
            let trace = descend(&chart, star, cfg, iters, |j, hyp| {
                forward::loss_and_gradient(
                    hyp,
                    muon,
                    consts,
                    target,
                    LossKind::Neg2Ll,
                    &alg2_mode(cfg, j),
                )
            })?;
            Ok(trace.best_loss)
        })
        .collect::<Result<_, _>>()?;

    let (loss_min, ci) = ci_from_curve(values, &losses, 1.0);
    Ok(ProfileCurve {
        param: param.name(),
        values: values.to_vec(),
        losses,
        loss_min,
        ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgen::{generate_event, EventGenConfig, Scenario};
    use crate::imaging::GridSpec;

    fn img(grid: &GridSpec, vals: &[f64]) -> VoxelImage {
        let mut im = VoxelImage::zeros(grid.clone());
        im.pe[..vals.len()].copy_from_slice(vals);
        im
    }

    #[test]
    fn likelihood_examples() {
        let g = GridSpec::new(1, 10.0).unwrap();
        let obs = img(&g, &[2.0]);
        let exp = img(&g, &[1.0]);
        let l = neg2_log_likelihood(&obs, &exp).unwrap();
        assert!((l - 0.77259).abs() < 1e-5, "got {l}");

        let zero = neg2_log_likelihood(&obs, &obs).unwrap();
        assert_eq!(zero, 0.0);

        let l0 = neg2_log_likelihood(&img(&g, &[0.0]), &img(&g, &[3.0])).unwrap();
        assert!((l0 - 6.0).abs() < 1e-12);

        let g2 = GridSpec::new(3, 10.0).unwrap();
        assert!(neg2_log_likelihood(&obs, &VoxelImage::zeros(g2)).is_err());
    }

    #[test]
    fn likelihood_is_nonnegative_and_identifies_equality() {
        let g = GridSpec::new(3, 10.0).unwrap();
        let mut rng = crate::rng::stream(&[999]);
        use rand::Rng;
        for _ in 0..200 {
            let a: Vec<f64> = (0..27).map(|_| rng.random_range(0.0..50.0)).collect();
            let b: Vec<f64> = (0..27).map(|_| rng.random_range(0.0..50.0)).collect();
            let l = neg2_log_likelihood(&img(&g, &a), &img(&g, &b)).unwrap();
            assert!(l >= 0.0);
            let same = neg2_log_likelihood(&img(&g, &a), &img(&g, &a)).unwrap();
            assert_eq!(same, 0.0);
        }
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let mut s = AdamState::new(1, 0.9, 0.999, 1e-8);
        let mut p = [1.0];
        s.step(&mut p, &[1.0], &[0.05]);
        assert!((p[0] - (1.0 - 0.05 / (1.0 + 1e-8))).abs() < 1e-12, "first step {}", p[0]);

        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        let mut p = [3.0, -4.0];
        for _ in 0..10 {
            s.step(&mut p, &[0.0, 0.0], &[0.1, 0.1]);
        }
        assert_eq!(p, [3.0, -4.0]);
    }

    #[test]
    fn adam_steps_scale_with_lr() {
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        let mut p = [0.0, 0.0];
        s.step(&mut p, &[2.0, 2.0], &[0.005, 0.2]);
        let ratio = p[1] / p[0];
        assert!((ratio - 40.0).abs() < 1e-9, "step ratio {ratio}");
    }

    #[test]
    fn param_id_roundtrip() {
        for (s, p) in [
            ("vx", ParamId::VertexX),
            ("ke1", ParamId::Ke(0)),
            ("theta3", ParamId::Theta(2)),
            ("phi2", ParamId::Phi(1)),
        ] {
            assert_eq!(ParamId::parse(s).unwrap(), p);
            assert_eq!(p.name(), s);
        }
        assert!(ParamId::parse("ke0").is_err());
        assert!(ParamId::parse("junk").is_err());
    }

    #[test]
    fn chart_roundtrips_hypothesis() {
        let hyp = DecompositionHypothesis {
            vertex: [1.0, -2.0, 3.0],
            particles: vec![ParticleKinematics {
                ptype: ParticleType::Proton,
                ke: 37.0,
                theta: 74.0,
                phi: 312.0,
                start: [1.0, -2.0, 3.0],
            }],
        };
        let chart = Chart::free(&hyp);
        let x = chart.init(&hyp);
        let back = chart.hypothesis(&x);
        assert!((back.vertex[0] - 1.0).abs() < 1e-12);
        let p = &back.particles[0];
        assert!((p.ke - 37.0).abs() < 1e-9);
        assert!((p.theta - 74.0).abs() < 1e-9);
        assert!((p.phi - 312.0).abs() < 1e-9);
    }

    #[test]
    fn chart_gradient_matches_finite_differences() {
        // Pull-back of an analytic function of the natural parameters.
        let hyp = DecompositionHypothesis {
            vertex: [0.5, 0.0, -1.0],
            particles: vec![ParticleKinematics {
                ptype: ParticleType::Proton,
                ke: 20.0,
                theta: 60.0,
                phi: 45.0,
                start: [0.5, 0.0, -1.0],
            }],
        };
        // loss = sum of squares of all natural params (smooth test function)
        let f = |h: &DecompositionHypothesis| {
            let p = &h.particles[0];
            h.vertex.iter().map(|v| v * v).sum::<f64>()
                + 0.01 * p.ke * p.ke
                + 0.001 * p.theta * p.theta
                + 0.0001 * p.phi * p.phi
        };
        let grad_nat = |h: &DecompositionHypothesis| {
            let p = &h.particles[0];
            vec![
                2.0 * h.vertex[0],
                2.0 * h.vertex[1],
                2.0 * h.vertex[2],
                0.02 * p.ke,
                0.002 * p.theta,
                0.0002 * p.phi,
            ]
        };
        let chart = Chart::free(&hyp);
        let x = chart.init(&hyp);
        let h0 = chart.hypothesis(&x);
        let g = chart.pull_gradient(&x, &grad_nat(&h0));
        let h_step = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h_step;
            xm[i] -= h_step;
            let fd = (f(&chart.hypothesis(&xp)) - f(&chart.hypothesis(&xm)))
                / (2.0 * h_step);
            let denom = g[i].abs().max(fd.abs()).max(1e-9);
            assert!(
                (g[i] - fd).abs() / denom < 1e-5,
                "coord {i}: pulled {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn ci_from_quadratic_curve() {
        let (a, sigma) = (5.0, 0.7);
        let values: Vec<f64> = (-30..=30).map(|i| a + i as f64 * 0.1 * sigma).collect();
        let losses: Vec<f64> = values.iter().map(|v| ((v - a) / sigma).powi(2)).collect();
        let (lmin, ci) = ci_from_curve(&values, &losses, 1.0);
        assert!(lmin.abs() < 1e-12);
        assert!(!ci.lo_open && !ci.hi_open);
        assert!((ci.lo - (a - sigma)).abs() < 0.01 * sigma, "lo {}", ci.lo);
        assert!((ci.hi - (a + sigma)).abs() < 0.01 * sigma, "hi {}", ci.hi);
    }

    #[test]
    fn ci_flags_open_ends() {
        let values = vec![0.0, 1.0, 2.0];
        let losses = vec![0.0, 0.2, 0.5]; // never crosses 1.0
        let (_, ci) = ci_from_curve(&values, &losses, 1.0);
        assert!(ci.lo_open && ci.hi_open);
        assert_eq!(ci.lo, 0.0);
        assert_eq!(ci.hi, 2.0);
    }

    fn closure_event(seed: u64, idx: u64) -> crate::eventgen::EventRecord {
        let consts = PhysicsConstants::default();
        let grid = GridSpec::event_grid();
        generate_event(Scenario::One, &consts, &grid, seed, idx, &EventGenConfig::default()).unwrap()
    }

    fn perturbed(hyp: &DecompositionHypothesis) -> DecompositionHypothesis {
        let mut h = hyp.clone();
        h.vertex[0] += 0.8;
        for (i, p) in h.particles.iter_mut().enumerate() {
            p.ke *= 1.0 + 0.07 * (i as f64 + 1.0);
            p.theta += 4.0;
            p.phi -= 6.0;
        }
        h
    }

    #[test]
    fn likelihood_fit_reaches_noiseless_optimum() {
        let consts = PhysicsConstants::default();
        let ev = closure_event(77, 0);
        let seed_hyp = perturbed(&ev.truth);
        let cfg = FitConfig {
            n: 1,
            m_factor: 120,
            expectation_template: true,
            seed: 1,
            ..FitConfig::default()
        };
        // Perfect-model minimum: the truth scores exactly zero.
        let (l_true, _) = forward::loss_and_gradient(
            &ev.truth,
            &ev.muon,
            &consts,
            &ev.target,
            LossKind::Neg2Ll,
            &GenMode::Expectation,
        )
        .unwrap();
        assert!(l_true.abs() < 1e-9, "loss at truth {l_true}");

        let (l_seed, _) = forward::loss_and_gradient(
            &seed_hyp,
            &ev.muon,
            &consts,
            &ev.target,
            LossKind::Neg2Ll,
            &GenMode::Expectation,
        )
        .unwrap();
        let fit = fit_likelihood(&ev.target, &seed_hyp, &ev.muon, &consts, &cfg).unwrap();
        assert!(fit.best_loss <= l_seed, "fit {} vs seed {}", fit.best_loss, l_seed);
        assert!(fit.best_loss < 0.05 * l_seed, "descent barely improved: {} vs {}", fit.best_loss, l_seed);
        // Best-so-far bookkeeping.
        for w in fit.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert_eq!(fit.best_loss, *fit.loss_history.last().unwrap());
    }

    #[test]
    fn best_image_fit_bookkeeping() {
        let consts = PhysicsConstants::default();
        let ev = closure_event(78, 1);
        let seed_hyp = perturbed(&ev.truth);
        let cfg = FitConfig { n: 4, m_factor: 2, seed: 3, ..FitConfig::default() };
        let fit = fit_best_image(&ev.target, &seed_hyp, &ev.muon, &consts, &cfg).unwrap();
        let per_run = fit.per_run_losses.as_ref().unwrap();
        assert_eq!(per_run.len(), 4);
        let iters = 2 * ev.truth.particles.len().max(1);
        assert_eq!(fit.loss_history.len(), iters);
        let min_run = per_run.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(fit.best_loss, min_run);
        for w in fit.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
