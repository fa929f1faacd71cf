//! The standard visible-energy baseline and the evaluation suite.
//!
//! `standard_vise` is the conventional single-proton unfolding
//! `VisE = E_cali / (1 - C_B * E_cali / dX)` with `E_cali` the calibrated
//! deposit and `dX` the approximate length of the longest proton.
//! `match_and_score` pairs truth and reconstructed particles by
//! kinetic-energy rank; unmatched entries become false negatives/positives
//! with the conventional default values (KE = 0, theta = 90 deg,
//! phi = 180 deg). `summarize` aggregates scored events into confusion
//! matrices, residual statistics, vertex quartiles and the visible-energy
//! comparison table.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::eventgen::DecompositionHypothesis;
use crate::physics::{range_from_ke, ParticleType, PhysicsConstants};

/// Default values substituted for the missing side of an unmatched pair.
pub const DEFAULT_KE: f64 = 0.0;
pub const DEFAULT_THETA: f64 = 90.0;
pub const DEFAULT_PHI: f64 = 180.0;

/// Inputs of the standard method.
#[derive(Clone, Copy, Debug)]
pub struct BaselineInputs {
    /// Total deposited signal, p.e.
    pub e_loss_pe: f64,
    /// Approximate length of the longest proton, mm.
    pub delta_x: f64,
    /// Calibration factor, p.e./MeV.
    pub c_cali: f64,
    /// Birks coefficient, mm/MeV.
    pub c_b: f64,
}

impl BaselineInputs {
    pub fn new(e_loss_pe: f64, delta_x: f64, consts: &PhysicsConstants) -> BaselineInputs {
        BaselineInputs { e_loss_pe, delta_x, c_cali: consts.calib, c_b: consts.birks_kb }
    }
}

/// Single-proton visible energy, MeV:
/// `VisE = E_cali / (1 - C_B * E_cali / dX)` with `E_cali = E_loss / c_cali`.
pub fn standard_vise(b: &BaselineInputs) -> Result<f64, Error> {
    if b.e_loss_pe < 0.0 || b.delta_x <= 0.0 {
        return Err(Error::domain("e_loss must be >= 0 and delta_x > 0"));
    }
    let e_cali = b.e_loss_pe / b.c_cali;
    let denom = 1.0 - b.c_b * e_cali / b.delta_x;
    if denom <= 0.0 {
        return Err(Error::Unphysical(format!(
            "correction denominator {denom:.4} <= 0 (e_cali {e_cali:.2} MeV over {} mm)",
            b.delta_x
        )));
    }
    Ok(e_cali / denom)
}

/// Length of the longest proton track in a hypothesis, mm.
pub fn longest_proton_mm(hyp: &DecompositionHypothesis, consts: &PhysicsConstants) -> Option<f64> {
    hyp.particles
        .iter()
        .filter(|p| p.ptype == ParticleType::Proton)
        .filter_map(|p| range_from_ke(ParticleType::Proton, p.ke, consts).ok())
        .max_by(f64::total_cmp)
}

/// Image-derived stand-in for the longest-proton length: the largest
/// distance from the vertex to an above-threshold voxel centre.
pub fn track_extent_from_image(
    img: &crate::imaging::VoxelImage,
    vertex: [f64; 3],
    threshold_pe: f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (idx, pe) in img.iter_nonzero() {
        if pe < threshold_pe {
            continue;
        }
        let c = img.grid.center(idx);
        let d = ((c[0] - vertex[0]).powi(2) + (c[1] - vertex[1]).powi(2) + (c[2] - vertex[2]).powi(2))
            .sqrt();
        best = Some(best.map_or(d, |b: f64| b.max(d)));
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    Matched,
    /// Reconstructed particle with no truth partner.
    FalsePositive,
    /// Truth particle with no reconstructed partner.
    FalseNegative,
}

/// One rank-paired truth/reco comparison (defaults filled in on the
/// missing side).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ParticlePair {
    pub kind: PairKind,
    pub ke_true: f64,
    pub ke_reco: f64,
    pub theta_true: f64,
    pub theta_reco: f64,
    pub phi_true: f64,
    pub phi_reco: f64,
}

impl ParticlePair {
    pub fn ke_residual(&self) -> f64 {
        self.ke_reco - self.ke_true
    }
    pub fn theta_residual(&self) -> f64 {
        self.theta_reco - self.theta_true
    }
    /// Azimuth residual wrapped to (-180, 180].
    pub fn phi_residual(&self) -> f64 {
        let mut d = self.phi_reco - self.phi_true;
        while d > 180.0 {
            d -= 360.0;
        }
        while d <= -180.0 {
            d += 360.0;
        }
        d
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub pairs: Vec<ParticlePair>,
    pub n_false_positive: usize,
    pub n_false_negative: usize,
}

/// Pair ke-descending truth and reco lists by rank. Both inputs must be
/// sorted by kinetic energy, descending.
pub fn match_and_score(
    truth: &DecompositionHypothesis,
    reco: &DecompositionHypothesis,
) -> MatchOutcome {
    let nt = truth.particles.len();
    let nr = reco.particles.len();
    let mut pairs = Vec::with_capacity(nt.max(nr));
    for i in 0..nt.max(nr) {
        let t = truth.particles.get(i);
        let r = reco.particles.get(i);
        let pair = match (t, r) {
            (Some(t), Some(r)) => ParticlePair {
                kind: PairKind::Matched,
                ke_true: t.ke,
                ke_reco: r.ke,
                theta_true: t.theta,
                theta_reco: r.theta,
                phi_true: t.phi,
                phi_reco: r.phi,
            },
            (Some(t), None) => ParticlePair {
                kind: PairKind::FalseNegative,
                ke_true: t.ke,
                ke_reco: DEFAULT_KE,
                theta_true: t.theta,
                theta_reco: DEFAULT_THETA,
                phi_true: t.phi,
                phi_reco: DEFAULT_PHI,
            },
            (None, Some(r)) => ParticlePair {
                kind: PairKind::FalsePositive,
                ke_true: DEFAULT_KE,
                ke_reco: r.ke,
                theta_true: DEFAULT_THETA,
                theta_reco: r.theta,
                phi_true: DEFAULT_PHI,
                phi_reco: r.phi,
            },
            (None, None) => unreachable!(),
        };
        pairs.push(pair);
    }
    MatchOutcome {
        pairs,
        n_false_positive: nr.saturating_sub(nt),
        n_false_negative: nt.saturating_sub(nr),
    }
}

/// Everything the evaluator needs from one event.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredEvent {
    pub event_index: u64,
    pub true_multiplicity: usize,
    pub reco_multiplicity: usize,
    pub outcome: MatchOutcome,
    pub vertex_distance_mm: f64,
    /// Sum of truth hadron kinetic energies, MeV.
    pub vise_true: f64,
    /// Sum of fitted hadron kinetic energies, MeV.
    pub vise_fit: f64,
    /// Standard-method visible energy; absent when the formula left its
    /// physical regime.
    pub vise_std: Option<f64>,
    /// True muon kinetic energy, MeV (entire-event energy scale).
    pub muon_ke: f64,
    /// Length of the longest true proton, mm.
    pub longest_proton_mm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub rms: f64,
}

impl SummaryStats {
    pub fn from_values(values: &[f64]) -> SummaryStats {
        if values.is_empty() {
            return SummaryStats::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        SummaryStats { n: values.len(), mean, rms }
    }
}

/// One row of the visible-energy comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViseRow {
    pub true_protons: usize,
    pub events: usize,
    /// Fraction of events with the multiplicity reconstructed exactly, %.
    pub reco_protons_pct: f64,
    /// Events excluded from the standard-method columns (unphysical regime).
    pub std_excluded: usize,
    pub rmse_std_mev: f64,
    pub rmse_fit_mev: f64,
    /// RMS of (VisE_true - VisE_reco)/VisE_true over the VA region, %.
    pub res_va_std_pct: f64,
    pub res_va_fit_pct: f64,
    /// Same with the muon energy added to both sides (entire event), %.
    pub res_event_std_pct: f64,
    pub res_event_fit_pct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AngleLengthBin {
    pub len_lo_mm: f64,
    pub len_hi_mm: f64,
    pub n: usize,
    pub theta_rms_deg: f64,
    pub phi_rms_deg: f64,
}

/// Aggregated evaluation over a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_events: usize,
    /// `confusion[true][reco]`, multiplicities 0..=6.
    pub confusion: Vec<Vec<usize>>,
    /// Columns normalized to one (recall).
    pub recall: Vec<Vec<f64>>,
    /// Rows normalized to one (precision).
    pub precision: Vec<Vec<f64>>,
    pub multiplicity_accuracy: f64,
    pub within_one_accuracy: f64,
    pub n_false_positive: usize,
    pub n_false_negative: usize,
    /// KE residual (reco - true, MeV) per true multiplicity, defaults
    /// included.
    pub ke_residual_by_mult: Vec<SummaryStats>,
    /// Relative KE residual on matched pairs only.
    pub ke_resolution_matched: SummaryStats,
    /// Relative KE residual on matched pairs with true KE >= 20 MeV.
    pub ke_resolution_ge20: SummaryStats,
    pub angle_by_length: Vec<AngleLengthBin>,
    /// Vertex-distance quartiles `[q1, median, q3]` per true multiplicity.
    pub vertex_quartiles_by_mult: Vec<[f64; 3]>,
    pub vise_rows: Vec<ViseRow>,
}

pub const MAX_MULTIPLICITY: usize = 6;

fn quartiles(sorted: &[f64]) -> [f64; 3] {
    if sorted.is_empty() {
        return [f64::NAN; 3];
    }
    let q = |f: f64| {
        let pos = f * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let t = pos - lo as f64;
        sorted[lo] * (1.0 - t) + sorted[hi] * t
    };
    [q(0.25), q(0.5), q(0.75)]
}

/// Aggregate scored events into the report.
pub fn summarize(events: &[ScoredEvent], consts: &PhysicsConstants) -> Result<MetricsReport, Error> {
    if events.is_empty() {
        return Err(Error::domain("summarize needs at least one event"));
    }
    let m = MAX_MULTIPLICITY + 1;
    let mut confusion = vec![vec![0usize; m]; m];
    let mut exact = 0usize;
    let mut within_one = 0usize;
    let mut n_fp = 0usize;
    let mut n_fn = 0usize;
    let mut ke_res: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut rel_matched = Vec::new();
    let mut rel_ge20 = Vec::new();
    let mut vdist: Vec<Vec<f64>> = vec![Vec::new(); m];

    let length_edges = [0.0, 2.0, 5.0, 10.0, 20.0, 45.0];
    let mut angle_bins: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); length_edges.len() - 1];

    for ev in events {
        let t = ev.true_multiplicity.min(MAX_MULTIPLICITY);
        let r = ev.reco_multiplicity.min(MAX_MULTIPLICITY);
        confusion[t][r] += 1;
        if ev.true_multiplicity == ev.reco_multiplicity {
            exact += 1;
        }
        if ev.true_multiplicity.abs_diff(ev.reco_multiplicity) <= 1 {
            within_one += 1;
        }
        n_fp += ev.outcome.n_false_positive;
        n_fn += ev.outcome.n_false_negative;
        vdist[t].push(ev.vertex_distance_mm);
        for p in &ev.outcome.pairs {
            ke_res[t].push(p.ke_residual());
            if p.kind == PairKind::Matched {
                if p.ke_true > 0.0 {
                    rel_matched.push(p.ke_residual() / p.ke_true);
                    if p.ke_true >= 20.0 {
                        rel_ge20.push(p.ke_residual() / p.ke_true);
                    }
                }
                let len = range_from_ke(ParticleType::Proton, p.ke_true.max(1e-6), consts)
                    .unwrap_or(0.0);
                for (bi, w) in length_edges.windows(2).enumerate() {
                    if len >= w[0] && len < w[1] {
                        angle_bins[bi].0.push(p.theta_residual());
                        angle_bins[bi].1.push(p.phi_residual());
                        break;
                    }
                }
            }
        }
    }

    let n_events = events.len();
    let mut recall = vec![vec![0.0; m]; m];
    let mut precision = vec![vec![0.0; m]; m];
    for i in 0..m {
        let col_sum: usize = (0..m).map(|t| confusion[t][i]).sum();
        let row_sum: usize = confusion[i].iter().sum();
        for t in 0..m {
            if col_sum > 0 {
                recall[t][i] = confusion[t][i] as f64 / col_sum as f64;
            }
            if row_sum > 0 {
                precision[i][t] = confusion[i][t] as f64 / row_sum as f64;
            }
        }
    }

    let mut vise_rows = Vec::new();
    for mult in 1..=MAX_MULTIPLICITY {
        let evs: Vec<&ScoredEvent> = events.iter().filter(|e| e.true_multiplicity == mult).collect();
        if evs.is_empty() {
            continue;
        }
        let events_n = evs.len();
        let exact_n = evs.iter().filter(|e| e.reco_multiplicity == e.true_multiplicity).count();
        let std_events: Vec<&&ScoredEvent> = evs.iter().filter(|e| e.vise_std.is_some()).collect();
        let rmse = |vals: &[f64]| {
            if vals.is_empty() {
                f64::NAN
            } else {
                (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt()
            }
        };
        let std_err: Vec<f64> = std_events.iter().map(|e| e.vise_true - e.vise_std.unwrap()).collect();
        let fit_err: Vec<f64> = evs.iter().map(|e| e.vise_true - e.vise_fit).collect();
        let res = |t: f64, r: f64| (t - r) / t * 100.0;
        let std_res: Vec<f64> = std_events
            .iter()
            .filter(|e| e.vise_true > 0.0)
            .map(|e| res(e.vise_true, e.vise_std.unwrap()))
            .collect();
        let fit_res: Vec<f64> = evs
            .iter()
            .filter(|e| e.vise_true > 0.0)
            .map(|e| res(e.vise_true, e.vise_fit))
            .collect();
        let std_res_ev: Vec<f64> = std_events
            .iter()
            .map(|e| res(e.vise_true + e.muon_ke, e.vise_std.unwrap() + e.muon_ke))
            .collect();
        let fit_res_ev: Vec<f64> = evs
            .iter()
            .map(|e| res(e.vise_true + e.muon_ke, e.vise_fit + e.muon_ke))
            .collect();
        vise_rows.push(ViseRow {
            true_protons: mult,
            events: events_n,
            reco_protons_pct: exact_n as f64 / events_n as f64 * 100.0,
            std_excluded: events_n - std_events.len(),
            rmse_std_mev: rmse(&std_err),
            rmse_fit_mev: rmse(&fit_err),
            res_va_std_pct: SummaryStats::from_values(&std_res).rms,
            res_va_fit_pct: SummaryStats::from_values(&fit_res).rms,
            res_event_std_pct: SummaryStats::from_values(&std_res_ev).rms,
            res_event_fit_pct: SummaryStats::from_values(&fit_res_ev).rms,
        });
    }

    let angle_by_length = length_edges
        .windows(2)
        .zip(angle_bins)
        .map(|(w, (th, ph))| AngleLengthBin {
            len_lo_mm: w[0],
            len_hi_mm: w[1],
            n: th.len(),
            theta_rms_deg: SummaryStats::from_values(&th).rms,
            phi_rms_deg: SummaryStats::from_values(&ph).rms,
        })
        .collect();

    let vertex_quartiles_by_mult = vdist
        .iter_mut()
        .map(|d| {
            d.sort_by(f64::total_cmp);
            quartiles(d)
        })
        .collect();

    Ok(MetricsReport {
        n_events,
        confusion,
        recall,
        precision,
        multiplicity_accuracy: exact as f64 / n_events as f64,
        within_one_accuracy: within_one as f64 / n_events as f64,
        n_false_positive: n_fp,
        n_false_negative: n_fn,
        ke_residual_by_mult: ke_res.iter().map(|v| SummaryStats::from_values(v)).collect(),
        ke_resolution_matched: SummaryStats::from_values(&rel_matched),
        ke_resolution_ge20: SummaryStats::from_values(&rel_ge20),
        angle_by_length,
        vertex_quartiles_by_mult,
        vise_rows,
    })
}
