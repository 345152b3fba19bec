//! End-to-end checks of simulator, windowing, offset estimation and solver.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdoa_core::eval::locate_all;
use tdoa_core::sim::{office_schedule, office_targets, office_testbed, simulate, NoiseModel, SimScenario, TargetSpec};
use tdoa_core::sync::detect_outlier_offsets;
use tdoa_core::trilateration::{bad_pair_counts, compute_tdoa, objective, permute_tdoas, TdoaPair};
use tdoa_core::{
    locate, select_per_anchor, window_observations, AnchorId, LocationFix, NodeId, ObservationWindow, Point,
    SolverParams, TargetId, TestbedConfig, Variant,
};

const WINDOW: f64 = 18.0;

fn office(targets: Vec<TargetSpec>, noise: NoiseModel, seed: u64, duration: f64) -> SimScenario {
    SimScenario { testbed: office_testbed(), targets, schedule: office_schedule(), noise, seed, duration }
}

fn one_target(p: Point) -> Vec<TargetSpec> {
    vec![TargetSpec { label: "t".into(), position: p }]
}

fn random_target(rng: &mut ChaCha8Rng, tb: &TestbedConfig) -> Point {
    let (lo, hi) = (tb.bounds.min, tb.bounds.max);
    Point::new(rng.random_range(lo.x + 0.5..hi.x - 0.5), rng.random_range(lo.y + 0.5..hi.y - 0.5), 0.0)
}

fn jitter(sigma: f64) -> NoiseModel {
    NoiseModel { timestamp_jitter_sigma: sigma, ..NoiseModel::noiseless() }
}

fn err2d(f: &LocationFix, truth: &Point) -> f64 {
    (f.position.x - truth.x).hypot(f.position.y - truth.y)
}

/// All ordered pairs the solver would start from for this window.
fn window_pairs(w: &ObservationWindow, tb: &TestbedConfig, p: &SolverParams) -> Vec<TdoaPair> {
    let sel = select_per_anchor(w);
    let off = detect_outlier_offsets(&sel, tb, p).unwrap();
    let r = sel[&off.reference].target_timestamp;
    let tdoas: BTreeMap<AnchorId, f64> = off
        .offsets
        .iter()
        .map(|(k, o)| (*k, compute_tdoa(sel[k].target_timestamp, r, *o)))
        .collect();
    permute_tdoas(&tdoas, tb.speed_of_sound)
}

#[test]
fn simulation_is_deterministic() {
    let mut noise = jitter(20e-6);
    noise.miss_detect_prob = 0.1;
    let a = simulate(&office(office_targets(), noise.clone(), 9, 90.0)).unwrap();
    let b = simulate(&office(office_targets(), noise, 9, 90.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn residual_vanishes_at_truth() {
    let tb = office_testbed();
    let p = SolverParams::default();
    let targets = office_targets();
    let (obs, _) = simulate(&office(targets.clone(), NoiseModel::noiseless(), 1, 36.0)).unwrap();
    for w in window_observations(&obs, WINDOW) {
        let pairs = window_pairs(&w, &tb, &p);
        let f = objective(&pairs, &tb, &targets[w.target.0 as usize].position).unwrap();
        assert!(f <= 1e-15, "objective {f:e} at truth");
    }
}

#[test]
fn solver_beats_grid_on_noiseless_off_grid_targets() {
    let tb = office_testbed();
    let p = SolverParams::default().with_variant(Variant::ALL_RAW);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..3 {
        // Off the 1 cm grid by construction.
        let t = random_target(&mut rng, &tb) + Point::new(0.00123, 0.00456, 0.0);
        let (obs, _) = simulate(&office(one_target(t), NoiseModel::noiseless(), seed, 9.0)).unwrap();
        let w = &window_observations(&obs, WINDOW)[0];
        let fix = locate(w, &tb, &p).unwrap();
        let pairs = window_pairs(w, &tb, &p);
        let gn = objective(&pairs, &tb, &fix.position).unwrap();
        let mut grid = f64::INFINITY;
        for a in 0..=1067 {
            for b in 0..=776 {
                grid = grid.min(objective(&pairs, &tb, &Point::new(a as f64 * 0.01, b as f64 * 0.01, 0.0)).unwrap());
            }
        }
        assert!(gn <= grid, "seed {seed}: {gn:e} > {grid:e}");
        assert!(err2d(&fix, &t) < 1e-6);
    }
}

#[test]
fn every_variant_recovers_targets_inside_the_hull() {
    let tb = office_testbed();
    let targets = office_targets();
    let (obs, _) = simulate(&office(targets.clone(), NoiseModel::noiseless(), 2, 90.0)).unwrap();
    let windows = window_observations(&obs, WINDOW);
    for v in Variant::ALL {
        let fixes = locate_all(&windows, &tb, &SolverParams::default().with_variant(v));
        assert_eq!(fixes.len(), windows.len(), "{}", v.name());
        for f in &fixes {
            assert!(err2d(f, &targets[f.target.0 as usize].position) < 1e-6, "{}", v.name());
        }
    }
}

#[test]
fn removal_beats_raw_on_an_nlos_window() {
    let tb = office_testbed();
    let t = Point::new(5.2, 2.4, 0.0);
    let mut noise = NoiseModel::noiseless();
    noise.nlos_bias.insert((AnchorId(6), NodeId::Target(TargetId(0))), 3e-3);
    let (obs, _) = simulate(&office(one_target(t), noise, 0, 9.0)).unwrap();
    let w = &window_observations(&obs, WINDOW)[0];
    let robust = locate(w, &tb, &SolverParams::default().with_variant(Variant::ALL_ROBUST)).unwrap();
    let raw = locate(w, &tb, &SolverParams::default().with_variant(Variant::ALL_RAW)).unwrap();
    assert_eq!(robust.removed_anchors, vec![AnchorId(6)]);
    assert!(err2d(&robust, &t) < err2d(&raw, &t));
}

/// After each removal, the bad pairs among the surviving anchors (at the
/// refitted position) must not outnumber those same pairs before it.
#[test]
fn outlier_removal_is_sound() {
    let tb = office_testbed();
    let p = SolverParams::default();
    let mut sound = 0;
    let trials = 100;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let t = random_target(&mut rng, &tb);
        let biased = AnchorId(rng.random_range(1..=8));
        let mut noise = NoiseModel::noiseless();
        noise.nlos_bias.insert((biased, NodeId::Target(TargetId(0))), 3e-3);
        let (obs, _) = simulate(&office(one_target(t), noise, seed, 9.0)).unwrap();
        let w = &window_observations(&obs, WINDOW)[0];
        let pairs = window_pairs(w, &tb, &p);
        let fix = locate(w, &tb, &p).unwrap();

        let mut active: BTreeSet<AnchorId> = pairs.iter().map(|q| q.anchor_i).collect();
        let mut ok = true;
        for (k, removed) in fix.removed_anchors.iter().enumerate() {
            active.remove(removed);
            let kept: Vec<TdoaPair> = pairs
                .iter()
                .filter(|q| active.contains(&q.anchor_i) && active.contains(&q.anchor_j))
                .copied()
                .collect();
            let rounds = &fix.diagnostics.rounds;
            let before: usize = bad_pair_counts(&kept, &tb, &rounds[k].position, p.ddoa_err_thr).unwrap().values().sum();
            let after: usize =
                bad_pair_counts(&kept, &tb, &rounds[k + 1].position, p.ddoa_err_thr).unwrap().values().sum();
            ok &= after <= before;
        }
        if ok {
            sound += 1;
        }
    }
    assert!(sound >= 95, "sound in {sound}/{trials}");
}

#[test]
fn error_grows_with_jitter() {
    let tb = office_testbed();
    let targets = office_targets();
    let mut means = Vec::new();
    for sigma in [10e-6, 20e-6, 50e-6, 100e-6] {
        let (obs, _) = simulate(&office(targets.clone(), jitter(sigma), 31, 18.0 * WINDOW)).unwrap();
        let windows = window_observations(&obs, WINDOW);
        assert!(windows.len() >= 100);
        let fixes = locate_all(&windows, &tb, &SolverParams::default());
        let mean = fixes.iter().map(|f| err2d(f, &targets[f.target.0 as usize].position)).sum::<f64>()
            / fixes.len() as f64;
        means.push(mean);
    }
    assert!(means.windows(2).all(|m| m[1] > m[0]), "{means:?}");
}

#[test]
fn missed_detections_degrade_gracefully() {
    let tb = office_testbed();
    for prob in [0.05, 0.1, 0.2] {
        let mut total = 0;
        let mut fixed = 0;
        for seed in 0..5 {
            let mut noise = jitter(20e-6);
            noise.miss_detect_prob = prob;
            let (obs, _) = simulate(&office(office_targets(), noise, 100 + seed, 10.0 * WINDOW)).unwrap();
            let windows = window_observations(&obs, WINDOW);
            total += windows.len();
            fixed += locate_all(&windows, &tb, &SolverParams::default()).len();
        }
        let rate = fixed as f64 / total as f64;
        assert!(rate >= 0.9, "p={prob}: fix rate {rate}");
    }
}

#[test]
fn selection_matches_brute_force() {
    let mut noise = NoiseModel::noiseless();
    noise.miss_detect_prob = 0.5;
    let (obs, _) = simulate(&office(office_targets(), noise, 55, 20.0 * WINDOW)).unwrap();
    for w in window_observations(&obs, WINDOW) {
        let sel = select_per_anchor(&w);
        for a in 1..=8 {
            let a = AnchorId(a);
            // Highest seqno heard by both the source itself and the target.
            let expected = w
                .observations
                .iter()
                .filter(|o| o.source == a && o.receiver == NodeId::Target(w.target))
                .map(|o| o.seqno)
                .filter(|&s| w.observations.iter().any(|o| o.source == a && o.seqno == s && o.receiver == NodeId::Anchor(a)))
                .max();
            assert_eq!(sel.get(&a).map(|b| b.seqno), expected);
            if let Some(b) = sel.get(&a) {
                for o in w.observations.iter().filter(|o| o.source == a && o.seqno == b.seqno) {
                    match o.receiver {
                        NodeId::Target(_) => assert_eq!(o.timestamp, b.target_timestamp),
                        NodeId::Anchor(r) if r == a => assert_eq!(o.timestamp, b.self_timestamp),
                        NodeId::Anchor(r) => assert_eq!(b.peer_timestamps[&r], o.timestamp),
                    }
                }
                let heard = w
                    .observations
                    .iter()
                    .filter(|o| o.source == a && o.seqno == b.seqno && matches!(o.receiver, NodeId::Anchor(r) if r != a))
                    .count();
                assert_eq!(heard, b.peer_timestamps.len());
            }
        }
    }
}

#[test]
fn single_link_bias_leaves_other_receptions_unchanged() {
    let t = Point::new(5.2, 2.4, 0.0);
    let mut noise = jitter(20e-6);
    let (clean, _) = simulate(&office(one_target(t), noise.clone(), 4, 18.0)).unwrap();
    noise.nlos_bias.insert((AnchorId(3), NodeId::Target(TargetId(0))), 3e-3);
    let (biased, _) = simulate(&office(one_target(t), noise, 4, 18.0)).unwrap();
    let key = |o: &tdoa_core::BeaconObservation| o.key();
    let clean: BTreeMap<_, _> = clean.iter().map(|o| (key(o), o.timestamp)).collect();
    for o in &biased {
        let before = clean[&o.key()];
        if o.source == AnchorId(3) && o.receiver == NodeId::Target(TargetId(0)) {
            assert!((o.timestamp - before - 3e-3).abs() < 1e-12);
        } else {
            assert_eq!(o.timestamp, before);
        }
    }
}
