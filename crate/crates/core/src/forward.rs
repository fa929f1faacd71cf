//! Differentiable forward model: kinematics to expected or sampled images.
//!
//! `generate` maps a hypothesis (vertex plus hadrons, with the known muon)
//! to a detector image. Internally every particle runs through the padded
//! grid: tracks are voxelized softly on the event grid grown by one voxel
//! ring, crosstalk is applied there, and the centre is cropped back out, so
//! boundary in-leakage matches the event composition exactly.
//!
//! Sampled images add a reparameterized Gaussian fluctuation to the summed
//! expectation, `pe -> max(0, pe + sqrt(pe) * g)`, with `g` a standard-normal
//! draw keyed by `(z, voxel)`. At fixed `z` the fluctuation is a
//! deterministic, differentiable function of the parameters.
//!
//! `loss_and_gradient` returns a scalar loss and its exact gradient with
//! respect to the flat parameter vector `[vx, vy, vz, (ke, theta, phi) per
//! particle]` (mm, MeV, degrees). Each particle's image is propagated once
//! with six-tangent dual numbers (vertex plus its own kinematics); the loss
//! and noise layers are differentiated analytically on top.

use crate::dual::Dual;
use crate::error::Error;
use crate::eventgen::DecompositionHypothesis;
use crate::fitter;
use crate::imaging::{self, GridSpec, VoxelImage};
use crate::physics::{self, ParticleKinematics, PhysicsConstants};
use crate::rng;

/// Tangent slots of one particle pass: vertex x/y/z, ke, theta, phi.
const N_TAN: usize = 6;
type D6 = Dual<N_TAN>;

/// Image generation mode.
#[derive(Clone, Debug)]
pub enum GenMode {
    /// Noise-free expectation image.
    Expectation,
    /// Expectation plus the keyed fluctuation for noise seed `z`.
    Sample { z: u64 },
    /// Voxel-wise mean of the sampled images for the given seeds; the
    /// averaged template of the likelihood-inference descent.
    AveragedSamples { seeds: Vec<u64> },
}

/// Scalar objective compared against the target image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error over voxels.
    Mse,
    /// Poisson likelihood ratio, `-2 ln L`.
    Neg2Ll,
}

fn validate_kes(hyp: &DecompositionHypothesis, muon: &ParticleKinematics) -> Result<(), Error> {
    if muon.ke <= 0.0 {
        return Err(Error::domain(format!("muon ke must be > 0, got {}", muon.ke)));
    }
    for (i, p) in hyp.particles.iter().enumerate() {
        if p.ke <= 0.0 {
            return Err(Error::domain(format!("particle {i} ke must be > 0, got {}", p.ke)));
        }
    }
    Ok(())
}

/// One particle's image at its own start point: trace, soft-voxelize and
/// apply crosstalk on the padded grid, calibrate, crop back to `grid`.
fn single_particle_image(
    kin: &ParticleKinematics,
    consts: &PhysicsConstants,
    grid: &GridSpec,
) -> Vec<f64> {
    let padded = grid.padded();
    let mut buf = vec![0.0f64; padded.n_voxels()];
    let segs = physics::trace::<f64>(
        kin.ptype,
        kin.ke,
        kin.theta.to_radians(),
        kin.phi.to_radians(),
        kin.start,
        consts,
        padded.half_extent(),
    );
    for s in &segs {
        imaging::deposit_soft(&mut buf, &padded, &s.mid, s.light);
    }
    let buf = imaging::crosstalk_pass(&buf, &padded, consts.crosstalk_frac);
    let mut out = vec![0.0; grid.n_voxels()];
    for i in 0..grid.n {
        for j in 0..grid.n {
            for k in 0..grid.n {
                out[grid.flat([i, j, k])] = buf[padded.flat([i + 1, j + 1, k + 1])] * consts.calib;
            }
        }
    }
    out
}

/// Expected image of a list of particles at their own start points. The
/// per-particle images are accumulated in list order, which keeps the
/// composition bit-identical with the gradient path's per-particle passes.
pub(crate) fn expectation_image(
    parts: &[ParticleKinematics],
    consts: &PhysicsConstants,
    grid: &GridSpec,
) -> VoxelImage {
    let mut out = VoxelImage::zeros(grid.clone());
    for kin in parts {
        let img = single_particle_image(kin, consts, grid);
        for (acc, v) in out.pe.iter_mut().zip(img) {
            *acc += v;
        }
    }
    out
}

/// One particle's image with tangents. Slots 0-2 are seeded on the start
/// point; slots 3-5 on (ke, theta, phi) when `own_kinematics` is set.
fn particle_image_dual(
    kin: &ParticleKinematics,
    start: [D6; 3],
    own_kinematics: bool,
    consts: &PhysicsConstants,
    grid: &GridSpec,
) -> Vec<D6> {
    let deg = std::f64::consts::PI / 180.0;
    let (ke, theta, phi) = if own_kinematics {
        (D6::var(kin.ke, 3), D6::var(kin.theta, 4), D6::var(kin.phi, 5))
    } else {
        (D6::constant(kin.ke), D6::constant(kin.theta), D6::constant(kin.phi))
    };
    let padded = grid.padded();
    let mut buf = vec![D6::constant(0.0); padded.n_voxels()];
    let segs = physics::trace(kin.ptype, ke, theta * deg, phi * deg, start, consts, padded.half_extent());
    for s in &segs {
        imaging::deposit_soft(&mut buf, &padded, &s.mid, s.light);
    }
    let buf = imaging::crosstalk_pass(&buf, &padded, consts.crosstalk_frac);
    let mut out = vec![D6::constant(0.0); grid.n_voxels()];
    for i in 0..grid.n {
        for j in 0..grid.n {
            for k in 0..grid.n {
                out[grid.flat([i, j, k])] = buf[padded.flat([i + 1, j + 1, k + 1])] * consts.calib;
            }
        }
    }
    out
}

/// Sampled value and its derivative with respect to the expectation:
/// `y = pe + sqrt(pe) g`, clamped at zero with subgradient zero; the
/// square root takes subgradient zero at `pe = 0`.
fn sample_value_factor(pe: f64, g: f64) -> (f64, f64) {
    if pe <= 0.0 {
        return (0.0, 0.0);
    }
    let s = pe.sqrt();
    let y = pe + s * g;
    if y <= 0.0 {
        (0.0, 0.0)
    } else {
        (y, 1.0 + g / (2.0 * s))
    }
}

/// Transform an expectation image per the generation mode. Returns the
/// output image and `d(out)/d(expectation)` per voxel.
fn apply_mode(pe: &[f64], mode: &GenMode) -> (Vec<f64>, Vec<f64>) {
    let nv = pe.len();
    match mode {
        GenMode::Expectation => (pe.to_vec(), vec![1.0; nv]),
        GenMode::Sample { z } => {
            let mut out = vec![0.0; nv];
            let mut fac = vec![0.0; nv];
            for i in 0..nv {
                let g = if pe[i] > 0.0 { rng::normal_at(*z, i as u64) } else { 0.0 };
                let (v, f) = sample_value_factor(pe[i], g);
                out[i] = v;
                fac[i] = f;
            }
            (out, fac)
        }
        GenMode::AveragedSamples { seeds } => {
            let mut out = vec![0.0; nv];
            let mut fac = vec![0.0; nv];
            let inv = 1.0 / seeds.len().max(1) as f64;
            for &z in seeds {
                for i in 0..nv {
                    let g = if pe[i] > 0.0 { rng::normal_at(z, i as u64) } else { 0.0 };
                    let (v, f) = sample_value_factor(pe[i], g);
                    out[i] += v;
                    fac[i] += f;
                }
            }
            for i in 0..nv {
                out[i] *= inv;
                fac[i] *= inv;
            }
            (out, fac)
        }
    }
}

/// Generate the image of a hypothesis plus the known muon. All start points,
/// including the muon's, are overridden by the hypothesis vertex.
pub fn generate(
    hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    grid: &GridSpec,
    mode: &GenMode,
) -> Result<VoxelImage, Error> {
    validate_kes(hyp, muon)?;
    let mut parts = Vec::with_capacity(hyp.particles.len() + 1);
    let mut muon_at_vertex = muon.clone();
    muon_at_vertex.start = hyp.vertex;
    parts.push(muon_at_vertex);
    for p in &hyp.particles {
        let mut p = p.clone();
        p.start = hyp.vertex;
        parts.push(p);
    }
    let exp = expectation_image(&parts, consts, grid);
    let (pe, _) = apply_mode(&exp.pe, mode);
    Ok(VoxelImage { grid: exp.grid, pe })
}

/// Loss value and derivative with respect to each expected voxel.
fn loss_and_outer_grad(kind: LossKind, out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = out.len() as f64;
    match kind {
        LossKind::Mse => {
            let mut acc = 0.0;
            let mut w = vec![0.0; out.len()];
            for i in 0..out.len() {
                let d = out[i] - target[i];
                acc += d * d;
                w[i] = 2.0 * d / n;
            }
            (acc / n, w)
        }
        LossKind::Neg2Ll => {
            let mut acc = 0.0;
            let mut w = vec![0.0; out.len()];
            for i in 0..out.len() {
                acc += fitter::neg2ll_term(target[i], out[i]);
                w[i] = fitter::dneg2ll_dexp(target[i], out[i]);
            }
            (2.0 * acc, w)
        }
    }
}

/// Scalar loss against `target` and its gradient with respect to the flat
/// parameter vector `[vx, vy, vz, (ke, theta, phi) per particle]`.
pub fn loss_and_gradient(
    hyp: &DecompositionHypothesis,
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    target: &VoxelImage,
    loss: LossKind,
    mode: &GenMode,
) -> Result<(f64, Vec<f64>), Error> {
    validate_kes(hyp, muon)?;
    let grid = &target.grid;
    let nv = grid.n_voxels();
    let np = hyp.particles.len();

    let vertex_vars = [
        D6::var(hyp.vertex[0], 0),
        D6::var(hyp.vertex[1], 1),
        D6::var(hyp.vertex[2], 2),
    ];

    let mut passes: Vec<Vec<D6>> = Vec::with_capacity(np + 1);
    passes.push(particle_image_dual(muon, vertex_vars, false, consts, grid));
    for p in &hyp.particles {
        passes.push(particle_image_dual(p, vertex_vars, true, consts, grid));
    }

    let mut pe = vec![0.0; nv];
    for img in &passes {
        for (acc, d) in pe.iter_mut().zip(img.iter()) {
            *acc += d.v;
        }
    }

    let (out, factor) = apply_mode(&pe, mode);
    let (value, w) = loss_and_outer_grad(loss, &out, &target.pe);

    let mut grad = vec![0.0; 3 + 3 * np];
    for (pass, img) in passes.iter().enumerate() {
        for i in 0..nv {
            let c = w[i] * factor[i];
            if c == 0.0 {
                continue;
            }
            let d = &img[i].d;
            grad[0] += c * d[0];
            grad[1] += c * d[1];
            grad[2] += c * d[2];
            if pass > 0 {
                let base = 3 * pass;
                grad[base] += c * d[3];
                grad[base + 1] += c * d[4];
                grad[base + 2] += c * d[5];
            }
        }
    }
    Ok((value, grad))
}

/// Expected image of the muon alone at its own recorded start point.
pub fn muon_expectation(
    muon: &ParticleKinematics,
    consts: &PhysicsConstants,
    grid: &GridSpec,
) -> VoxelImage {
    expectation_image(std::slice::from_ref(muon), consts, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::ParticleType;

    fn setup() -> (PhysicsConstants, GridSpec) {
        (PhysicsConstants::default(), GridSpec::event_grid())
    }

    fn muon() -> ParticleKinematics {
        ParticleKinematics {
            ptype: ParticleType::Muon,
            ke: 600.0,
            theta: 30.0,
            phi: 120.0,
            start: [1.0, -2.0, 0.5],
        }
    }

    fn hyp(parts: Vec<(f64, f64, f64)>) -> DecompositionHypothesis {
        DecompositionHypothesis {
            vertex: [1.0, -2.0, 0.5],
            particles: parts
                .into_iter()
                .map(|(ke, theta, phi)| ParticleKinematics {
                    ptype: ParticleType::Proton,
                    ke,
                    theta,
                    phi,
                    start: [1.0, -2.0, 0.5],
                })
                .collect(),
        }
    }

    #[test]
    fn empty_hypothesis_is_muon_only() {
        let (c, g) = setup();
        let m = muon();
        let img = generate(&hyp(vec![]), &m, &c, &g, &GenMode::Expectation).unwrap();
        let muon_only = muon_expectation(&m, &c, &g);
        assert_eq!(img.pe, muon_only.pe);
        assert!(img.total() > 0.0);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let (c, g) = setup();
        let h = hyp(vec![(30.0, 80.0, 10.0), (12.0, 100.0, 200.0)]);
        let a = generate(&h, &muon(), &c, &g, &GenMode::Sample { z: 99 }).unwrap();
        let b = generate(&h, &muon(), &c, &g, &GenMode::Sample { z: 99 }).unwrap();
        assert_eq!(a.pe, b.pe);
        let other = generate(&h, &muon(), &c, &g, &GenMode::Sample { z: 100 }).unwrap();
        assert_ne!(a.pe, other.pe);
    }

    #[test]
    fn rejects_nonpositive_ke() {
        let (c, g) = setup();
        let h = hyp(vec![(0.0, 80.0, 10.0)]);
        assert!(generate(&h, &muon(), &c, &g, &GenMode::Expectation).is_err());
    }

    #[test]
    fn sample_mean_converges_to_expectation() {
        let (c, g) = setup();
        let h = hyp(vec![(35.0, 75.0, 20.0)]);
        let m = muon();
        let exp = generate(&h, &m, &c, &g, &GenMode::Expectation).unwrap();
        let n = 500;
        let mut acc = vec![0.0; g.n_voxels()];
        for z in 0..n {
            let img = generate(&h, &m, &c, &g, &GenMode::Sample { z }).unwrap();
            for (a, v) in acc.iter_mut().zip(img.pe) {
                *a += v;
            }
        }
        for i in 0..acc.len() {
            let mean = acc[i] / n as f64;
            let pe = exp.pe[i];
            // Per-voxel sigma is sqrt(pe). The zero clamp biases the mean
            // upward by at most sqrt(pe)*phi(0) ~ 0.4*sqrt(pe), which only
            // matters for low-occupancy voxels (negligible for pe >~ 9).
            let stat = 3.0 * pe.sqrt() / (n as f64).sqrt();
            let clamp_bias = if pe < 9.0 { 0.4 * pe.sqrt() } else { 0.01 * pe.sqrt() };
            assert!(
                mean - pe <= stat + clamp_bias && pe - mean <= stat + 1e-9,
                "voxel {i}: mean {mean} vs pe {pe}"
            );
        }
    }

    #[test]
    fn averaged_mode_is_voxelwise_mean_of_draws() {
        let (c, g) = setup();
        let h = hyp(vec![(25.0, 60.0, 300.0)]);
        let m = muon();
        let seeds = vec![5u64, 6, 7];
        let avg = generate(&h, &m, &c, &g, &GenMode::AveragedSamples { seeds: seeds.clone() }).unwrap();
        let mut acc = vec![0.0; g.n_voxels()];
        for &z in &seeds {
            let img = generate(&h, &m, &c, &g, &GenMode::Sample { z }).unwrap();
            for (a, v) in acc.iter_mut().zip(img.pe) {
                *a += v;
            }
        }
        for (a, b) in acc.iter().map(|v| v / 3.0).zip(avg.pe.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_zero_at_truth_with_zero_gradient() {
        let (c, g) = setup();
        let h = hyp(vec![(30.0, 80.0, 10.0), (12.0, 100.0, 200.0)]);
        let m = muon();
        let target = generate(&h, &m, &c, &g, &GenMode::Expectation).unwrap();
        let (l, grad) =
            loss_and_gradient(&h, &m, &c, &target, LossKind::Mse, &GenMode::Expectation).unwrap();
        assert_eq!(l, 0.0);
        for (i, gi) in grad.iter().enumerate() {
            assert!(gi.abs() < 1e-12, "component {i} = {gi}");
        }
        let (l2, grad2) =
            loss_and_gradient(&h, &m, &c, &target, LossKind::Neg2Ll, &GenMode::Expectation).unwrap();
        assert!(l2.abs() < 1e-9, "neg2ll at truth {l2}");
        for gi in &grad2 {
            assert!(gi.abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_spot_check() {
        let (c, g) = setup();
        let h = hyp(vec![(30.0, 80.0, 10.0)]);
        let m = muon();
        let shifted = hyp(vec![(33.0, 75.0, 16.0)]);
        let target = generate(&shifted, &m, &c, &g, &GenMode::Expectation).unwrap();

        for (loss, mode) in [
            (LossKind::Mse, GenMode::Expectation),
            (LossKind::Neg2Ll, GenMode::Expectation),
            (LossKind::Mse, GenMode::Sample { z: 4 }),
        ] {
            let (_, grad) = loss_and_gradient(&h, &m, &c, &target, loss, &mode).unwrap();
            let eval = |hh: &DecompositionHypothesis| {
                let img = generate(hh, &m, &c, &g, &mode).unwrap();
                match loss {
                    LossKind::Mse => {
                        img.pe
                            .iter()
                            .zip(target.pe.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            / img.pe.len() as f64
                    }
                    LossKind::Neg2Ll => fitter::neg2_log_likelihood(&target, &img).unwrap(),
                }
            };
            // Finite differences on ke and vertex x.
            for (slot, h_step) in [(3usize, 1e-5), (0usize, 1e-5)] {
                let mut plus = h.clone();
                let mut minus = h.clone();
                match slot {
                    0 => {
                        plus.vertex[0] += h_step;
                        minus.vertex[0] -= h_step;
                    }
                    3 => {
                        plus.particles[0].ke += h_step;
                        minus.particles[0].ke -= h_step;
                    }
                    _ => unreachable!(),
                }
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h_step);
                let a = grad[slot];
                let denom = a.abs().max(fd.abs()).max(1e-9);
                assert!(
                    (a - fd).abs() / denom < 1e-3,
                    "{loss:?}/{mode:?} slot {slot}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn phi_gradient_vanishes_for_point_deposit() {
        // A near-zero-range proton at the vertex is rotationally symmetric at
        // the image level, so the azimuth carries almost no information.
        let (c, g) = setup();
        let mut h = hyp(vec![(0.6, 90.0, 45.0)]);
        h.vertex = [0.0, 0.0, 0.0];
        h.particles[0].start = h.vertex;
        let m = ParticleKinematics { start: h.vertex, ..muon() };
        let target = {
            let mut t = generate(&h, &m, &c, &g, &GenMode::Expectation).unwrap();
            // Perturb the target so the gradient is not trivially zero.
            for v in t.pe.iter_mut() {
                *v *= 1.05;
            }
            t
        };
        let (_, grad) =
            loss_and_gradient(&h, &m, &c, &target, LossKind::Mse, &GenMode::Expectation).unwrap();
        let g_phi = grad[5].abs();
        let g_ke = grad[3].abs();
        assert!(g_phi < 1e-3 * g_ke.max(1.0), "phi {g_phi} vs ke {g_ke}");
    }
}
