//! Parametric charged-particle transport.
//!
//! Tracks are straight lines stepped at a fixed integration length. Hadron
//! ranges follow a Bragg–Kleeman power law `R = alpha * KE^p` (ions rescaled
//! by `A/z^2` at `KE/A` per nucleon); muons are treated as minimum-ionizing
//! with constant stopping power. Per-step energy loss comes from the
//! residual-range relation, so the deposited energy telescopes exactly to the
//! initial kinetic energy for fully contained tracks. Scintillation light is
//! quenched per step as `dL = dE / (1 + kB * dE/dx)`.

use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::Error;

/// Half-extent of the simulated detector cube, mm (9 x 9 x 9 voxels at
/// 10 mm pitch, centred on the origin). Light beyond it is discarded.
pub const VOLUME_HALF_EXTENT_MM: f64 = 45.0;

/// Fixed model constants; see [`PhysicsConstants::default`] for values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    /// Birks quenching coefficient, mm/MeV.
    pub birks_kb: f64,
    /// Calibration factor, p.e./MeV.
    pub calib: f64,
    /// Crosstalk leakage fraction per face, dimensionless.
    pub crosstalk_frac: f64,
    /// Bragg-Kleeman range prefactor, mm·MeV^(-bragg_p).
    pub bragg_alpha: f64,
    /// Bragg-Kleeman range exponent.
    pub bragg_p: f64,
    /// Muon stopping power, MeV/mm (minimum-ionizing in plastic).
    pub muon_dedx: f64,
    /// Track integration step, mm.
    pub step_len: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        PhysicsConstants {
            birks_kb: 0.126,
            calib: 100.0,
            crosstalk_frac: 0.03,
            bragg_alpha: 0.019,
            bragg_p: 1.8,
            muon_dedx: 0.2,
            step_len: 0.05,
        }
    }
}

impl PhysicsConstants {
    pub fn validate(&self) -> Result<(), Error> {
        if self.birks_kb <= 0.0 {
            return Err(Error::domain("birks_kb must be > 0"));
        }
        if self.calib <= 0.0 {
            return Err(Error::domain("calib must be > 0"));
        }
        if !(0.0..1.0 / 6.0).contains(&self.crosstalk_frac) {
            return Err(Error::domain("crosstalk_frac must be in [0, 1/6)"));
        }
        if self.bragg_alpha <= 0.0 {
            return Err(Error::domain("bragg_alpha must be > 0"));
        }
        if self.bragg_p <= 1.0 {
            return Err(Error::domain("bragg_p must be > 1"));
        }
        if self.muon_dedx <= 0.0 {
            return Err(Error::domain("muon_dedx must be > 0"));
        }
        if self.step_len <= 0.0 {
            return Err(Error::domain("step_len must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParticleType {
    Muon,
    Proton,
    Deuterium,
    Tritium,
}

impl ParticleType {
    pub const HADRONS: [ParticleType; 3] =
        [ParticleType::Proton, ParticleType::Deuterium, ParticleType::Tritium];

    /// Mass number and charge for the ion range rescaling.
    fn mass_charge(self) -> (f64, f64) {
        match self {
            ParticleType::Muon => (0.0, 1.0), // unused; muons are not power-law
            ParticleType::Proton => (1.0, 1.0),
            ParticleType::Deuterium => (2.0, 1.0),
            ParticleType::Tritium => (3.0, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParticleType::Muon => "muon",
            ParticleType::Proton => "proton",
            ParticleType::Deuterium => "deuterium",
            ParticleType::Tritium => "tritium",
        }
    }
}

impl std::str::FromStr for ParticleType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "muon" => Ok(ParticleType::Muon),
            "proton" => Ok(ParticleType::Proton),
            "deuterium" => Ok(ParticleType::Deuterium),
            "tritium" => Ok(ParticleType::Tritium),
            other => Err(Error::domain(format!("unknown particle type: {other}"))),
        }
    }
}

/// One particle's kinematics in the detector frame (volume centre at the
/// origin). `theta` is the polar angle from the z-axis in degrees, `phi` the
/// azimuth in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleKinematics {
    pub ptype: ParticleType,
    /// Kinetic energy, MeV.
    pub ke: f64,
    /// Polar angle from the z-axis, degrees in [0, 180].
    pub theta: f64,
    /// Azimuth, degrees in [0, 360).
    pub phi: f64,
    /// Start point, mm.
    pub start: [f64; 3],
}

impl ParticleKinematics {
    /// Unit direction vector from the spherical angles.
    pub fn direction(&self) -> [f64; 3] {
        direction_from_angles(self.theta.to_radians(), self.phi.to_radians())
    }
}

pub(crate) fn direction_from_angles<S: Real>(theta_rad: S, phi_rad: S) -> [S; 3] {
    let st = theta_rad.sin();
    [st * phi_rad.cos(), st * phi_rad.sin(), theta_rad.cos()]
}

/// One integration step of a simulated track.
#[derive(Clone, Copy, Debug)]
pub struct TrackSegment {
    /// Step midpoint, mm.
    pub midpoint: [f64; 3],
    /// Step length, mm.
    pub length: f64,
    /// Energy deposited over the step, MeV.
    pub de: f64,
    /// Quenched light yield, MeV-equivalent.
    pub light: f64,
}

/// Ordered energy deposits along a straight track.
#[derive(Clone, Debug, Default)]
pub struct TrackDeposit {
    pub segments: Vec<TrackSegment>,
}

impl TrackDeposit {
    pub fn total_de(&self) -> f64 {
        self.segments.iter().map(|s| s.de).sum()
    }
    pub fn total_light(&self) -> f64 {
        self.segments.iter().map(|s| s.light).sum()
    }
    /// Path length covered by the segments, mm.
    pub fn path_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }
}

/// Range–energy law per particle type: either a Bragg-Kleeman power law
/// `R = alpha_eff * KE^p` or a constant-dE/dx linear relation.
#[derive(Clone, Copy, Debug)]
pub(crate) enum RangeLaw {
    PowerLaw { alpha_eff: f64, p: f64 },
    Linear { dedx: f64 },
}

impl RangeLaw {
    pub(crate) fn for_type(ptype: ParticleType, consts: &PhysicsConstants) -> RangeLaw {
        match ptype {
            ParticleType::Muon => RangeLaw::Linear { dedx: consts.muon_dedx },
            _ => {
                let (a, z) = ptype.mass_charge();
                // R_ion(KE) = (A/z^2) R_p(KE/A) = alpha * A^(1-p)/z^2 * KE^p
                let alpha_eff = consts.bragg_alpha * a.powf(1.0 - consts.bragg_p) / (z * z);
                RangeLaw::PowerLaw { alpha_eff, p: consts.bragg_p }
            }
        }
    }

    pub(crate) fn range<S: Real>(self, ke: S) -> S {
        match self {
            RangeLaw::PowerLaw { alpha_eff, p } => ke.powf_clamped(p) * alpha_eff,
            RangeLaw::Linear { dedx } => ke / dedx,
        }
    }

    /// Kinetic energy of a particle with residual range `r`.
    pub(crate) fn energy_at_residual<S: Real>(self, r: S) -> S {
        match self {
            RangeLaw::PowerLaw { alpha_eff, p } => (r / alpha_eff).powf_clamped(1.0 / p),
            RangeLaw::Linear { dedx } => r * dedx,
        }
    }
}

/// Continuous-slowing-down range for a particle of the given type and
/// kinetic energy, mm.
pub fn range_from_ke(ptype: ParticleType, ke: f64, consts: &PhysicsConstants) -> Result<f64, Error> {
    if ke <= 0.0 {
        return Err(Error::domain(format!("ke must be > 0, got {ke}")));
    }
    Ok(RangeLaw::for_type(ptype, consts).range(ke))
}

/// Stopping power at residual range `r` (distance to the stopping point), in
/// MeV/mm. Diverges as `r -> 0` for power-law types (Bragg peak).
pub fn dedx_at_residual_range(
    ptype: ParticleType,
    r: f64,
    consts: &PhysicsConstants,
) -> Result<f64, Error> {
    if r <= 0.0 {
        return Err(Error::domain(format!("residual range must be > 0, got {r}")));
    }
    let law = RangeLaw::for_type(ptype, consts);
    Ok(match law {
        RangeLaw::PowerLaw { p, .. } => law.energy_at_residual(r) / (p * r),
        RangeLaw::Linear { dedx } => dedx,
    })
}

/// Birks-quenched light yield for a deposit `de` over a step `dx`:
/// `light = de / (1 + kB * de/dx)`.
pub fn birks_quench(de: f64, dx: f64, consts: &PhysicsConstants) -> Result<f64, Error> {
    if dx <= 0.0 {
        return Err(Error::domain(format!("dx must be > 0, got {dx}")));
    }
    if de < 0.0 {
        return Err(Error::domain(format!("de must be >= 0, got {de}")));
    }
    Ok(de / (1.0 + consts.birks_kb * de / dx))
}

/// Internal generic segment used by the differentiable pipeline.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Segment<S> {
    pub mid: [S; 3],
    pub len: S,
    pub de: S,
    pub light: S,
}

/// Distance along `dir` from `start` to the surface of the cube
/// `[-half, half]^3`; infinite if no forward intersection exists.
fn exit_distance<S: Real>(start: &[S; 3], dir: &[S; 3], half: f64) -> S {
    let mut best: Option<S> = None;
    for axis in 0..3 {
        let dv = dir[axis].value();
        if dv.abs() < 1e-12 {
            continue;
        }
        let bound = if dv > 0.0 { half } else { -half };
        let t = (-start[axis] + bound) / dir[axis];
        if t.value() > 0.0 {
            best = Some(match best {
                Some(b) => b.min_value(t),
                None => t,
            });
        }
    }
    best.unwrap_or_else(|| S::from_f64(f64::INFINITY))
}

/// Step a straight track of the given type from `start` along the direction
/// `(theta, phi)` (radians), depositing energy from the residual-range law
/// and quenching each step. The track is truncated at the cube boundary.
pub(crate) fn trace<S: Real>(
    ptype: ParticleType,
    ke: S,
    theta_rad: S,
    phi_rad: S,
    start: [S; 3],
    consts: &PhysicsConstants,
    half_extent: f64,
) -> Vec<Segment<S>> {
    let law = RangeLaw::for_type(ptype, consts);
    let dir = direction_from_angles(theta_rad, phi_rad);
    let range = law.range(ke);
    let total = range.min_value(exit_distance(&start, &dir, half_extent));
    let total_v = total.value();
    if !(total_v > 0.0) || !total_v.is_finite() {
        return Vec::new();
    }

    let h = consts.step_len;
    let n_full = (total_v / h).floor() as usize;
    let partial = total_v - n_full as f64 * h > 1e-9;
    let n_steps = n_full + usize::from(partial);
    let kb = consts.birks_kb;

    let mut segments = Vec::with_capacity(n_steps);
    let mut t0 = S::from_f64(0.0);
    let mut e0 = ke;
    for j in 0..n_steps {
        let t1 = if j < n_full { S::from_f64((j + 1) as f64 * h) } else { total };
        let len = t1 - t0;
        let e1 = law.energy_at_residual(range - t1);
        let de = e0 - e1;
        let light = de / (de / len * kb + 1.0);
        let tm = (t0 + t1) * 0.5;
        let mid = [start[0] + dir[0] * tm, start[1] + dir[1] * tm, start[2] + dir[2] * tm];
        segments.push(Segment { mid, len, de, light });
        t0 = t1;
        e0 = e1;
    }
    segments
}

/// Simulate a particle track, returning the ordered per-step deposits.
/// Light beyond the 9x9x9 simulation volume is discarded.
pub fn simulate_track(kin: &ParticleKinematics, consts: &PhysicsConstants) -> Result<TrackDeposit, Error> {
    if kin.ke <= 0.0 {
        return Err(Error::domain(format!("ke must be > 0, got {}", kin.ke)));
    }
    let segments = trace::<f64>(
        kin.ptype,
        kin.ke,
        kin.theta.to_radians(),
        kin.phi.to_radians(),
        kin.start,
        consts,
        VOLUME_HALF_EXTENT_MM,
    );
    Ok(TrackDeposit {
        segments: segments
            .into_iter()
            .map(|s| TrackSegment { midpoint: s.mid, length: s.len, de: s.de, light: s.light })
            .collect(),
    })
}
