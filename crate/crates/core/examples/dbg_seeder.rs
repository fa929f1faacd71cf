use vafit::eventgen::{generate_event, generate_event_fixed_protons, EventGenConfig, Scenario};
use vafit::imaging::GridSpec;
use vafit::physics::PhysicsConstants;
use vafit::fitter::FitConfig;
use vafit::seeder::{estimate_vertex, peel, seed_event, SeederConfig};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn main() {
    let c = PhysicsConstants::default();
    let g = GridSpec::event_grid();
    let cfg = EventGenConfig::default();

    println!("=== vertex estimate by multiplicity / leading ke ===");
    let mut all = Vec::new();
    for i in 0..200 {
        let ev = generate_event(Scenario::One, &c, &g, 101, i, &cfg).unwrap();
        let (v, low) = estimate_vertex(&ev.target, &ev.muon, &c).unwrap();
        let d = dist(v, ev.truth.vertex);
        all.push((d, ev.truth.particles.len(), ev.truth.particles[0].ke, low));
    }
    let mut ds: Vec<f64> = all.iter().map(|a| a.0).collect();
    ds.sort_by(f64::total_cmp);
    println!("median {:.2} q90 {:.2}", ds[ds.len() / 2], ds[ds.len() * 9 / 10]);
    for m in 1..=5 {
        let sel: Vec<f64> = all.iter().filter(|a| a.1 == m).map(|a| a.0).collect();
        let mut s = sel.clone();
        s.sort_by(f64::total_cmp);
        if !s.is_empty() {
            println!("  mult {}: n={} median {:.2}", m, s.len(), s[s.len() / 2]);
        }
    }
    println!("worst 10:");
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    for a in all.iter().take(10) {
        println!("  d={:.2} mult={} leading_ke={:.1} low_conf={}", a.0, a.1, a.2, a.3);
    }

    println!("=== refined seed vertex over 100 scenario-1 events ===");
    let scfg = SeederConfig::default();
    let fcfg = FitConfig { seed: 1, ..FitConfig::default() };
    let mut sd = Vec::new();
    for i in 0..100 {
        let ev = generate_event(Scenario::One, &c, &g, 101, i, &cfg).unwrap();
        let seed = seed_event(&ev.target, &ev.muon, &c, &scfg, &fcfg).unwrap();
        sd.push((dist(seed.vertex, ev.truth.vertex), ev.truth.particles.len(), seed.candidates.len()));
    }
    let mut ds2: Vec<f64> = sd.iter().map(|a| a.0).collect();
    ds2.sort_by(f64::total_cmp);
    println!("seed vertex: median {:.2} q90 {:.2}", ds2[ds2.len() / 2], ds2[ds2.len() * 9 / 10]);
    let within1 = sd.iter().filter(|a| a.1.abs_diff(a.2) <= 1).count();
    let exact = sd.iter().filter(|a| a.1 == a.2).count();
    println!("multiplicity: exact {}/100 within±1 {}/100", exact, within1);
    let mut hist = std::collections::BTreeMap::new();
    for a in &sd {
        *hist.entry(a.2 as i64 - a.1 as i64).or_insert(0usize) += 1;
    }
    println!("reco-true multiplicity histogram: {:?}", hist);
    for a in sd.iter().filter(|a| a.1.abs_diff(a.2) >= 2) {
        println!("  bad: true={} seed={} vderr={:.2}", a.1, a.2, a.0);
    }

    println!("=== single proton peel ===");
    for i in [0,1,2,3,19,23,27].into_iter() {
        let ev = generate_event_fixed_protons(1, &c, &g, 202, i, &cfg).unwrap();
        let seed = seed_event(&ev.target, &ev.muon, &c, &scfg, &fcfg).unwrap();
        let t = &ev.truth.particles[0];
        let (vd, _) = estimate_vertex(&ev.target, &ev.muon, &c).unwrap();
        print!(
            "ev {i}: true ke={:.1} th={:.0} ph={:.0} vd_raw={:.2} vd_seed={:.2} | {} cands resid={:.0}: ",
            t.ke,
            t.theta,
            t.phi,
            dist(vd, ev.truth.vertex),
            dist(seed.vertex, ev.truth.vertex),
            seed.candidates.len(),
            seed.residual_pe
        );
        for cand in &seed.candidates {
            print!("(ke={:.1} th={:.0} ph={:.0}) ", cand.kin.ke, cand.kin.theta, cand.kin.phi);
        }
        println!();
    }
}
// inspected via: single event 202/19
