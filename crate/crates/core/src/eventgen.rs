//! Composition of multi-particle vertex-activity events.
//!
//! An event is one muon plus one to six hadrons sharing a start position
//! inside a 0.2 mm sub-voxel of the central voxel. Per-particle images are
//! summed, the whole event is shifted by a uniform ±1 voxel in every
//! direction, and the outer shell is cropped away, leaving a 7x7x7 target.
//! The composition runs through the forward model's expectation pipeline, so
//! a noiseless event is exactly reproducible from its truth hypothesis.
//!
//! `(master_seed, event_index)` fully determines an event; generation is
//! embarrassingly parallel over the event index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::forward;
use crate::imaging::{GridSpec, VoxelImage};
use crate::physics::{ParticleKinematics, ParticleType, PhysicsConstants};
use crate::rng::{self, salt};

/// Kinetic-energy generation ranges, MeV.
pub const MUON_KE_RANGE: (f64, f64) = (300.0, 1000.0);
pub const PROTON_KE_RANGE: (f64, f64) = (5.0, 60.0);
pub const ION_KE_RANGE: (f64, f64) = (10.0, 60.0);

/// Edge of the virtual start-position grouping cells, mm.
pub const SUBVOXEL_MM: f64 = 0.2;

/// Event composition scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// One muon plus 1-5 protons.
    One,
    /// One muon, 0-4 protons, 0-1 deuterium, 0-1 tritium; at least one hadron.
    Two,
}

/// Vertex position plus the ordered hadron list (muon excluded). The full
/// continuous parameter vector of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionHypothesis {
    /// Interaction vertex, mm.
    pub vertex: [f64; 3],
    /// Hadrons ordered by kinetic energy, descending.
    pub particles: Vec<ParticleKinematics>,
}

impl DecompositionHypothesis {
    pub fn sort_by_ke_desc(&mut self) {
        self.particles.sort_by(|a, b| b.ke.total_cmp(&a.ke));
    }

    /// Sum of hadron kinetic energies, MeV.
    pub fn total_ke(&self) -> f64 {
        self.particles.iter().map(|p| p.ke).sum()
    }
}

/// A composed event: the 7x7x7 target, the known muon, the truth hypothesis
/// and the provenance that regenerates it.
#[derive(Clone, Debug)]
pub struct EventRecord {
    pub target: VoxelImage,
    pub muon: ParticleKinematics,
    pub truth: DecompositionHypothesis,
    /// `(master_seed, event_index)`.
    pub seeds: (u64, u64),
    /// Whole-event shift, voxels.
    pub shift: [i32; 3],
}

/// Knobs for dataset composition.
#[derive(Clone, Copy, Debug)]
pub struct EventGenConfig {
    /// Poisson-smear the target photoelectrons.
    pub noise: bool,
    /// Draw each particle's start independently within the shared sub-voxel
    /// instead of co-locating all starts at one point.
    pub scatter_starts: bool,
}

impl Default for EventGenConfig {
    fn default() -> Self {
        EventGenConfig { noise: false, scatter_starts: false }
    }
}

fn isotropic_angles(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let v: [f64; 3] = UnitSphere.sample(rng);
    let theta = v[2].clamp(-1.0, 1.0).acos().to_degrees();
    let mut phi = v[1].atan2(v[0]).to_degrees();
    if phi < 0.0 {
        phi += 360.0;
    }
    (theta, phi)
}

/// Lower corner of a uniformly chosen sub-voxel of the central voxel.
fn sample_subvoxel(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let cells_per_axis = (10.0 / SUBVOXEL_MM) as u32; // 50
    let mut lo = [0.0; 3];
    for l in lo.iter_mut() {
        let c = rng.random_range(0..cells_per_axis);
        *l = -5.0 + c as f64 * SUBVOXEL_MM;
    }
    lo
}

fn point_in_cell(lo: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut p = [0.0; 3];
    for (a, v) in p.iter_mut().enumerate() {
        *v = lo[a] + rng.random_range(0.0..SUBVOXEL_MM);
    }
    p
}

struct StartSampler {
    cell_lo: [f64; 3],
    shared: [f64; 3],
    scatter: bool,
}

impl StartSampler {
    fn new(rng: &mut ChaCha8Rng, scatter: bool) -> Self {
        let cell_lo = sample_subvoxel(rng);
        let shared = point_in_cell(cell_lo, rng);
        StartSampler { cell_lo, shared, scatter }
    }

    fn next(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        if self.scatter {
            point_in_cell(self.cell_lo, rng)
        } else {
            self.shared
        }
    }
}

fn sample_particle(
    ptype: ParticleType,
    ke_range: (f64, f64),
    start: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> ParticleKinematics {
    let ke = rng.random_range(ke_range.0..ke_range.1);
    let (theta, phi) = isotropic_angles(rng);
    ParticleKinematics { ptype, ke, theta, phi, start }
}

fn sample_with_starts(
    scenario: Scenario,
    rng: &mut ChaCha8Rng,
    scatter: bool,
) -> (Vec<ParticleKinematics>, ParticleKinematics) {
    let starts = StartSampler::new(rng, scatter);
    let muon_start = starts.next(rng);
    let muon = sample_particle(ParticleType::Muon, MUON_KE_RANGE, muon_start, rng);

    let mut hadrons = Vec::new();
    match scenario {
        Scenario::One => {
            let n_p = rng.random_range(1..=5u32);
            for _ in 0..n_p {
                let s = starts.next(rng);
                hadrons.push(sample_particle(ParticleType::Proton, PROTON_KE_RANGE, s, rng));
            }
        }
        Scenario::Two => {
            // Reject the all-zero hadron draw.
            let (n_p, n_d, n_t) = loop {
                let p = rng.random_range(0..=4u32);
                let d = rng.random_range(0..=1u32);
                let t = rng.random_range(0..=1u32);
                if p + d + t > 0 {
                    break (p, d, t);
                }
            };
            for _ in 0..n_p {
                let s = starts.next(rng);
                hadrons.push(sample_particle(ParticleType::Proton, PROTON_KE_RANGE, s, rng));
            }
            for _ in 0..n_d {
                let s = starts.next(rng);
                hadrons.push(sample_particle(ParticleType::Deuterium, ION_KE_RANGE, s, rng));
            }
            for _ in 0..n_t {
                let s = starts.next(rng);
                hadrons.push(sample_particle(ParticleType::Tritium, ION_KE_RANGE, s, rng));
            }
        }
    }
    (hadrons, muon)
}

/// Draw one event's particle content: the hadron list plus the muon, all
/// starting within one 0.2 mm sub-voxel of the central voxel.
pub fn sample_scenario(
    scenario: Scenario,
    rng: &mut ChaCha8Rng,
) -> (Vec<ParticleKinematics>, ParticleKinematics) {
    sample_with_starts(scenario, rng, true)
}

/// Compose an event from sampled particles: sum the per-particle images,
/// shift the whole event by a uniform ±1 voxel per axis, and record truth in
/// the shifted (cropped-frame) coordinates. The muon's start is the truth
/// vertex.
pub fn compose_event(
    hadrons: Vec<ParticleKinematics>,
    muon: ParticleKinematics,
    consts: &PhysicsConstants,
    grid: &GridSpec,
    rng: &mut ChaCha8Rng,
    seeds: (u64, u64),
    cfg: &EventGenConfig,
) -> Result<EventRecord, Error> {
    if hadrons.is_empty() {
        return Err(Error::domain("an event needs at least one hadron"));
    }
    if hadrons.len() > 6 {
        return Err(Error::domain("at most six hadrons per event"));
    }

    let mut shift = [0i32; 3];
    for s in shift.iter_mut() {
        *s = rng.random_range(-1..=1);
    }
    let dv = [
        shift[0] as f64 * grid.pitch,
        shift[1] as f64 * grid.pitch,
        shift[2] as f64 * grid.pitch,
    ];

    let shift_kin = |mut k: ParticleKinematics| {
        for a in 0..3 {
            k.start[a] += dv[a];
        }
        k
    };
    let muon = shift_kin(muon);
    let mut hadrons: Vec<ParticleKinematics> = hadrons.into_iter().map(shift_kin).collect();
    // Image composition follows the ke-descending truth order so the target
    // is bit-identical with the forward model evaluated at the truth.
    hadrons.sort_by(|a, b| b.ke.total_cmp(&a.ke));

    let mut all = Vec::with_capacity(hadrons.len() + 1);
    all.push(muon.clone());
    all.extend(hadrons.iter().cloned());
    let expectation = forward::expectation_image(&all, consts, grid);

    let target = if cfg.noise {
        let noise_key = rng::fold_key(&[salt::TARGET_NOISE, seeds.0, seeds.1]);
        let mut img = VoxelImage::zeros(expectation.grid.clone());
        for (i, &pe) in expectation.pe.iter().enumerate() {
            img.pe[i] = rng::poisson_at(noise_key, i as u64, pe);
        }
        img
    } else {
        expectation
    };

    let mut truth = DecompositionHypothesis { vertex: muon.start, particles: hadrons };
    truth.sort_by_ke_desc();

    Ok(EventRecord { target, muon, truth, seeds, shift })
}

/// Generate event `event_index` of a dataset: deterministic in
/// `(master_seed, event_index)` alone.
pub fn generate_event(
    scenario: Scenario,
    consts: &PhysicsConstants,
    grid: &GridSpec,
    master_seed: u64,
    event_index: u64,
    cfg: &EventGenConfig,
) -> Result<EventRecord, Error> {
    let mut rng = rng::stream(&[salt::EVENT, master_seed, event_index]);
    let (hadrons, muon) = sample_with_starts(scenario, &mut rng, cfg.scatter_starts);
    compose_event(hadrons, muon, consts, grid, &mut rng, (master_seed, event_index), cfg)
}

/// Like [`generate_event`] but with a fixed proton multiplicity.
pub fn generate_event_fixed_protons(
    n_protons: usize,
    consts: &PhysicsConstants,
    grid: &GridSpec,
    master_seed: u64,
    event_index: u64,
    cfg: &EventGenConfig,
) -> Result<EventRecord, Error> {
    if n_protons == 0 || n_protons > 6 {
        return Err(Error::domain("fixed proton multiplicity must be 1..=6"));
    }
    let mut rng = rng::stream(&[salt::EVENT, master_seed, event_index]);
    let starts = StartSampler::new(&mut rng, cfg.scatter_starts);
    let muon_start = starts.next(&mut rng);
    let muon = sample_particle(ParticleType::Muon, MUON_KE_RANGE, muon_start, &mut rng);
    let mut hadrons = Vec::with_capacity(n_protons);
    for _ in 0..n_protons {
        let s = starts.next(&mut rng);
        hadrons.push(sample_particle(ParticleType::Proton, PROTON_KE_RANGE, s, &mut rng));
    }
    compose_event(hadrons, muon, consts, grid, &mut rng, (master_seed, event_index), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{generate, GenMode};

    fn setup() -> (PhysicsConstants, GridSpec) {
        (PhysicsConstants::default(), GridSpec::event_grid())
    }

    #[test]
    fn scenario1_multiplicity_is_uniform() {
        let mut counts = [0usize; 6];
        let n = 100_000;
        for i in 0..n {
            let mut rng = rng::stream(&[salt::EVENT, 42, i]);
            let (hadrons, _) = sample_scenario(Scenario::One, &mut rng);
            counts[hadrons.len()] += 1;
        }
        assert_eq!(counts[0], 0);
        // Binomial 5-sigma band around n/5 per bin.
        let p = 0.2;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for m in 1..=5 {
            let dev = (counts[m] as f64 - n as f64 * p).abs();
            assert!(dev < 5.0 * sigma, "multiplicity {m}: count {} off by {dev}", counts[m]);
        }
    }

    #[test]
    fn scenario2_never_returns_zero_hadrons() {
        for i in 0..10_000 {
            let mut rng = rng::stream(&[salt::EVENT, 7, i]);
            let (hadrons, _) = sample_scenario(Scenario::Two, &mut rng);
            assert!(!hadrons.is_empty());
            assert!(hadrons.len() <= 6);
        }
    }

    #[test]
    fn starts_share_a_subvoxel() {
        for i in 0..500 {
            let mut rng = rng::stream(&[salt::EVENT, 3, i]);
            let (hadrons, muon) = sample_scenario(Scenario::Two, &mut rng);
            for h in &hadrons {
                for a in 0..3 {
                    assert!((h.start[a] - muon.start[a]).abs() < SUBVOXEL_MM);
                    assert!(h.start[a].abs() < 5.0, "start outside the central voxel");
                }
                assert!(h.ke >= 5.0 && h.ke <= 60.0);
            }
            assert!(muon.ke >= 300.0 && muon.ke <= 1000.0);
        }
    }

    #[test]
    fn events_are_reproducible() {
        let (c, g) = setup();
        let cfg = EventGenConfig::default();
        let a = generate_event(Scenario::One, &c, &g, 11, 5, &cfg).unwrap();
        let b = generate_event(Scenario::One, &c, &g, 11, 5, &cfg).unwrap();
        assert_eq!(a.target.pe, b.target.pe);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.shift, b.shift);
        let c2 = generate_event(Scenario::One, &c, &g, 11, 6, &cfg).unwrap();
        assert_ne!(a.target.pe, c2.target.pe);
    }

    #[test]
    fn truth_is_sorted_and_central() {
        let (c, g) = setup();
        let cfg = EventGenConfig::default();
        for i in 0..100 {
            let ev = generate_event(Scenario::Two, &c, &g, 19, i, &cfg).unwrap();
            for w in ev.truth.particles.windows(2) {
                assert!(w[0].ke >= w[1].ke, "truth not ke-descending");
            }
            for a in 0..3 {
                assert!(ev.truth.vertex[a].abs() <= 15.0, "vertex outside central 3x3x3");
            }
        }
    }

    #[test]
    fn noiseless_event_matches_forward_model_exactly() {
        // Closure property: the composed target equals the forward model's
        // expectation image at the truth parameters.
        let (c, g) = setup();
        let cfg = EventGenConfig::default();
        for i in 0..20 {
            let ev = generate_event(Scenario::One, &c, &g, 23, i, &cfg).unwrap();
            let img = generate(&ev.truth, &ev.muon, &c, &g, &GenMode::Expectation).unwrap();
            assert_eq!(ev.target.pe, img.pe, "event {i} is not an exact closure target");
        }
    }

    #[test]
    fn event_image_is_additive_over_particles() {
        let (c, g) = setup();
        let cfg = EventGenConfig::default();
        let ev = generate_event(Scenario::One, &c, &g, 31, 2, &cfg).unwrap();
        let mut acc = vec![0.0; g.n_voxels()];
        let singles: Vec<Vec<f64>> = std::iter::once(&ev.muon)
            .chain(ev.truth.particles.iter())
            .map(|p| forward::expectation_image(std::slice::from_ref(p), &c, &g).pe)
            .collect();
        for img in singles {
            for (a, v) in acc.iter_mut().zip(img) {
                *a += v;
            }
        }
        for (a, b) in acc.iter().zip(ev.target.pe.iter()) {
            assert!((a - b).abs() < 1e-9, "additivity violated: {a} vs {b}");
        }
    }

    #[test]
    fn poisson_targets_are_integer_valued_and_keyed() {
        let (c, g) = setup();
        let cfg = EventGenConfig { noise: true, scatter_starts: false };
        let ev = generate_event(Scenario::One, &c, &g, 47, 0, &cfg).unwrap();
        assert!(ev.target.pe.iter().all(|v| v.fract() == 0.0 && *v >= 0.0));
        let again = generate_event(Scenario::One, &c, &g, 47, 0, &cfg).unwrap();
        assert_eq!(ev.target.pe, again.target.pe);
    }

    #[test]
    fn shift_equivariance_on_contained_event() {
        // A lateral unit shift of the vertex moves the image by one voxel.
        let (c, g) = setup();
        let muon = ParticleKinematics {
            ptype: ParticleType::Muon,
            ke: 600.0,
            theta: 0.0,
            phi: 0.0,
            start: [0.3, -0.4, 0.2],
        };
        let proton = ParticleKinematics {
            ptype: ParticleType::Proton,
            ke: 30.0,
            theta: 90.0,
            phi: 45.0,
            start: muon.start,
        };
        let base = forward::expectation_image(&[muon.clone(), proton.clone()], &c, &g);

        let shift_by = |k: &ParticleKinematics, d: [f64; 3]| {
            let mut k = k.clone();
            for a in 0..3 {
                k.start[a] += d[a];
            }
            k
        };
        let d = [10.0, 0.0, 0.0];
        let moved = forward::expectation_image(
            &[shift_by(&muon, d), shift_by(&proton, d)],
            &c,
            &g,
        );
        for i in 0..g.n - 1 {
            for j in 0..g.n {
                for k in 0..g.n {
                    let a = base.get([i, j, k]);
                    let b = moved.get([i + 1, j, k]);
                    assert!(
                        (a - b).abs() <= 1e-9 * (1.0 + a.abs()),
                        "shift equivariance broke at [{i},{j},{k}]: {a} vs {b}"
                    );
                }
            }
        }
    }
}
