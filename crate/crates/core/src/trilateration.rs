//! TDoA construction, pair selection, bounded Gauss-Newton solving and
//! iterative outlier-anchor removal.
//!
//! Sign convention: `ddoa_ij = c * tdoa_ij` predicts `dist(j, x) - dist(i, x)`,
//! and every residual is `ddoa_ij - (dist(j, x) - dist(i, x))`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::model::{
    AnchorId, Dimension, LocationFix, PairingMode, Point, RemovalRound, SolveDiagnostics, SolverParams,
    TargetId, TestbedConfig,
};
use crate::sync::{detect_outlier_offsets, OffsetSet};
use crate::window::{select_per_anchor, ObservationWindow};

/// Halvings tried before a Gauss-Newton step is abandoned.
const MAX_STEP_HALVINGS: usize = 20;

/// Steps shorter than this, meters, are taken whole: near the optimum the
/// objective change falls to rounding level and a strict decrease test would
/// stall the iteration short of the minimizer.
const POLISH_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdoaPair {
    pub anchor_i: AnchorId,
    pub anchor_j: AnchorId,
    /// Seconds.
    pub tdoa: f64,
    /// Meters, `c * tdoa`.
    pub ddoa: f64,
}

/// Arrival-time difference between anchor `k`'s and the reference's beacons
/// at the target, with the emission offset removed.
pub fn compute_tdoa(target_ts_k: f64, target_ts_ref: f64, offset_ref_k: f64) -> f64 {
    target_ts_k - target_ts_ref - offset_ref_k
}

/// Expands reference-relative TDoAs to all ordered pairs:
/// `tdoa_ij = tdoa_rj - tdoa_ri`.
pub fn permute_tdoas(tdoas_from_ref: &BTreeMap<AnchorId, f64>, c: f64) -> Vec<TdoaPair> {
    let mut out = Vec::with_capacity(tdoas_from_ref.len() * tdoas_from_ref.len().saturating_sub(1));
    for (&i, &ti) in tdoas_from_ref {
        for (&j, &tj) in tdoas_from_ref {
            if i != j {
                let tdoa = tj - ti;
                out.push(TdoaPair { anchor_i: i, anchor_j: j, tdoa, ddoa: c * tdoa });
            }
        }
    }
    out
}

/// Picks the pairs fed to the solver. `arrival_order` lists anchors by
/// ascending target arrival time.
///
/// All-pairs mode keeps each unordered pair once, oriented earlier-then-later.
/// Consecutive mode keeps the ring of neighbouring arrivals, closing with
/// `(last, first)`.
pub fn select_pairs(pairs: &[TdoaPair], mode: PairingMode, arrival_order: &[AnchorId]) -> Vec<TdoaPair> {
    let lookup: BTreeMap<(AnchorId, AnchorId), TdoaPair> =
        pairs.iter().map(|p| ((p.anchor_i, p.anchor_j), *p)).collect();
    let mut wanted = Vec::new();
    match mode {
        PairingMode::AllPairs => {
            for (a, &i) in arrival_order.iter().enumerate() {
                for &j in &arrival_order[a + 1..] {
                    wanted.push((i, j));
                }
            }
        }
        PairingMode::Consecutive => {
            let m = arrival_order.len();
            for a in 0..m {
                let next = (a + 1) % m;
                if m == 2 && next == 0 {
                    break;
                }
                if a != next {
                    wanted.push((arrival_order[a], arrival_order[next]));
                }
            }
        }
    }
    wanted.into_iter().filter_map(|k| lookup.get(&k).copied()).collect()
}

/// Sum of squared distance-difference residuals at `x`, meters².
pub fn objective(pairs: &[TdoaPair], config: &TestbedConfig, x: &Point) -> Result<f64> {
    let dim = config.dimension;
    let mut sum = 0.0;
    for p in pairs {
        let pi = config.position(p.anchor_i)?;
        let pj = config.position(p.anchor_j)?;
        let r = p.ddoa - (dim.dist(&pj, x) - dim.dist(&pi, x));
        sum += r * r;
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub position: Point,
    pub iterations: usize,
    pub objective: f64,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
}

/// Minimizes the distance-difference objective by damped Gauss-Newton with
/// every iterate clamped to the testbed bounds.
pub fn solve_position(
    pairs: &[TdoaPair],
    config: &TestbedConfig,
    init: &Point,
    params: &SolverParams,
) -> Result<Solution> {
    let dim = config.dimension;
    let anchors: BTreeSet<AnchorId> = pairs.iter().flat_map(|p| [p.anchor_i, p.anchor_j]).collect();
    let mut distinct: Vec<Point> = Vec::new();
    for id in &anchors {
        let p = dim.project(&config.position(*id)?);
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    let need = dim.count() + 1;
    if distinct.len() < need {
        return Err(Error::Underdetermined { have: distinct.len(), need });
    }

    let terms: Vec<(Point, Point, f64)> = pairs
        .iter()
        .map(|p| Ok((config.position(p.anchor_i)?, config.position(p.anchor_j)?, p.ddoa)))
        .collect::<Result<_>>()?;
    match dim {
        Dimension::Two => gauss_newton::<2>(&terms, config, init, params),
        Dimension::Three => gauss_newton::<3>(&terms, config, init, params),
    }
}

fn to_vec<const D: usize>(p: &Point) -> SVector<f64, D> {
    SVector::<f64, D>::from_fn(|k, _| p[k])
}

fn from_vec<const D: usize>(v: &SVector<f64, D>) -> Point {
    let mut p = Point::zeros();
    for k in 0..D {
        p[k] = v[k];
    }
    p
}

fn unit<const D: usize>(d: SVector<f64, D>) -> (f64, SVector<f64, D>) {
    let n = d.norm();
    if n > 0.0 {
        (n, d / n)
    } else {
        (0.0, SVector::zeros())
    }
}

fn gauss_newton<const D: usize>(
    terms: &[(Point, Point, f64)],
    config: &TestbedConfig,
    init: &Point,
    params: &SolverParams,
) -> Result<Solution> {
    let terms: Vec<(SVector<f64, D>, SVector<f64, D>, f64)> =
        terms.iter().map(|(i, j, d)| (to_vec::<D>(i), to_vec::<D>(j), *d)).collect();
    let lo = to_vec::<D>(&config.bounds.min);
    let hi = to_vec::<D>(&config.bounds.max);
    let clamp = |v: SVector<f64, D>| v.zip_zip_map(&lo, &hi, |x, l, h| x.clamp(l, h));

    let cost = |x: &SVector<f64, D>| -> f64 {
        terms
            .iter()
            .map(|(pi, pj, ddoa)| {
                let r = ddoa - ((x - pj).norm() - (x - pi).norm());
                r * r
            })
            .sum()
    };

    let mut x = clamp(to_vec::<D>(init));
    let mut f = cost(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut trace = vec![f];
    let mut iterations = 0;

    while iterations < params.gn_max_iters {
        iterations += 1;
        let mut jtj = SMatrix::<f64, D, D>::zeros();
        let mut jtr = SVector::<f64, D>::zeros();
        for (pi, pj, ddoa) in &terms {
            let (di, ui) = unit(x - pi);
            let (dj, uj) = unit(x - pj);
            let r = ddoa - (dj - di);
            let g = ui - uj;
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let step = match jtj.cholesky() {
            Some(ch) => -ch.solve(&jtr),
            None => {
                let lambda = 1e-9 * (jtj.trace() / D as f64).max(1e-12);
                let damped = jtj + SMatrix::<f64, D, D>::identity() * lambda;
                match damped.cholesky() {
                    Some(ch) => -ch.solve(&jtr),
                    None => break,
                }
            }
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        if step.norm() < POLISH_STEP {
            let cand = clamp(x + step);
            let fc = cost(&cand);
            if fc <= f * (1.0 + 1e-9) {
                accepted = Some((cand, fc));
            }
        }
        for _ in 0..=MAX_STEP_HALVINGS {
            if accepted.is_some() {
                break;
            }
            let cand = clamp(x + step * alpha);
            let fc = cost(&cand);
            if !fc.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            if fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, fnext)) = accepted else { break };
        let moved = (next - x).norm();
        x = next;
        f = fnext;
        trace.push(f);
        if moved < params.gn_tolerance {
            break;
        }
    }

    Ok(Solution { position: from_vec(&x), iterations, objective: f, objective_trace: trace })
}

/// Centroid of the given anchors, clamped to bounds.
pub fn anchor_centroid(config: &TestbedConfig, anchors: &BTreeSet<AnchorId>) -> Result<Point> {
    let mut sum = Point::zeros();
    for id in anchors {
        sum += config.position(*id)?;
    }
    let c = sum / anchors.len().max(1) as f64;
    Ok(config.bounds.clamp(config.dimension, &c))
}

/// Counts, per anchor, the pairs whose distance-difference residual at `x`
/// exceeds `threshold` in magnitude.
pub fn bad_pair_counts(
    pairs: &[TdoaPair],
    config: &TestbedConfig,
    x: &Point,
    threshold: f64,
) -> Result<BTreeMap<AnchorId, usize>> {
    let dim = config.dimension;
    let mut counts = BTreeMap::new();
    for p in pairs {
        let pi = config.position(p.anchor_i)?;
        let pj = config.position(p.anchor_j)?;
        let err = p.ddoa - (dim.dist(&pj, x) - dim.dist(&pi, x));
        let slot = counts.entry(p.anchor_i).or_insert(0);
        if err.abs() > threshold {
            *slot += 1;
        }
    }
    Ok(counts)
}

/// Which target and window a fix belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixContext {
    pub target: TargetId,
    pub window_start: f64,
}

/// Solves, counts bad pairs per anchor, drops the worst anchor and repeats
/// until no pair is bad. With `params.outlier_removal` off it stops after the
/// first solve. Returns `None` once fewer than `num_anchors_req` anchors
/// remain or the geometry cannot be solved.
pub fn iterative_outlier_removal(
    offsets: &OffsetSet,
    target_ts: &BTreeMap<AnchorId, f64>,
    config: &TestbedConfig,
    params: &SolverParams,
    ctx: FixContext,
) -> Option<LocationFix> {
    let reference_ts = *target_ts.get(&offsets.reference)?;
    let c = config.speed_of_sound;
    let tdoas: BTreeMap<AnchorId, f64> = offsets
        .offsets
        .iter()
        .filter_map(|(k, off)| target_ts.get(k).map(|ts| (*k, compute_tdoa(*ts, reference_ts, *off))))
        .collect();
    let all_pairs = permute_tdoas(&tdoas, c);

    let mut active: BTreeSet<AnchorId> = tdoas.keys().copied().collect();
    let mut removed = Vec::new();
    let mut rounds = Vec::new();

    loop {
        if active.len() < params.num_anchors_req {
            return None;
        }
        let mut order: Vec<AnchorId> = active.iter().copied().collect();
        order.sort_by(|a, b| target_ts[a].total_cmp(&target_ts[b]).then(a.cmp(b)));
        let in_set: Vec<TdoaPair> = all_pairs
            .iter()
            .filter(|p| active.contains(&p.anchor_i) && active.contains(&p.anchor_j))
            .copied()
            .collect();
        let pairs = select_pairs(&in_set, params.pairing_mode, &order);

        let init = anchor_centroid(config, &active).ok()?;
        let sol = match solve_position(&pairs, config, &init, params) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("target {} window {}: {e}", ctx.target, ctx.window_start);
                return None;
            }
        };
        let counts = bad_pair_counts(&in_set, config, &sol.position, params.ddoa_err_thr).ok()?;
        let counts_vec: Vec<(AnchorId, usize)> = counts.iter().map(|(k, v)| (*k, *v)).collect();
        rounds.push(RemovalRound { position: sol.position, bad_pair_counts: counts_vec.clone() });

        // Strict `>` over ascending ids keeps the lowest id among ties.
        let mut worst: Option<(AnchorId, usize)> = None;
        for (&id, &n) in &counts {
            if n > worst.map_or(0, |w| w.1) {
                worst = Some((id, n));
            }
        }

        match worst {
            Some((id, _)) if params.outlier_removal => {
                active.remove(&id);
                removed.push(id);
            }
            _ => {
                let residual_rms = if pairs.is_empty() {
                    0.0
                } else {
                    (sol.objective / pairs.len() as f64).sqrt()
                };
                return Some(LocationFix {
                    target: ctx.target,
                    window_start: ctx.window_start,
                    position: sol.position,
                    used_anchors: active,
                    reference: offsets.reference,
                    residual_rms,
                    removed_anchors: removed.clone(),
                    diagnostics: SolveDiagnostics {
                        iterations: sol.iterations,
                        final_objective: sol.objective,
                        removed_anchors: removed,
                        bad_pair_counts: counts_vec,
                        rounds,
                    },
                });
            }
        }
    }
}

/// Full pipeline for one window: beacon selection, offset validation,
/// TDoA construction and (robust) solving.
pub fn locate(window: &ObservationWindow, config: &TestbedConfig, params: &SolverParams) -> Option<LocationFix> {
    let selected = select_per_anchor(window);
    let offsets = detect_outlier_offsets(&selected, config, params)?;
    let target_ts: BTreeMap<AnchorId, f64> = selected
        .iter()
        .filter(|(k, _)| offsets.valid_anchors.contains(k))
        .map(|(k, b)| (*k, b.target_timestamp))
        .collect();
    iterative_outlier_removal(
        &offsets,
        &target_ts,
        config,
        params,
        FixContext { target: window.target, window_start: window.start },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnchorConfig, Bounds};

    fn square_testbed(extra_center: bool) -> TestbedConfig {
        let mut pos = vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        if extra_center {
            pos.push((5.0, 5.0));
        }
        let anchors = pos
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| AnchorConfig {
                id: AnchorId(k as u32 + 1),
                position: Point::new(x, y, 0.0),
                mic_speaker_separation: 0.0,
            })
            .collect();
        TestbedConfig::new(
            anchors,
            Bounds::new(Point::new(0.0, 0.0, 0.0), Point::new(10.0, 10.0, 3.0)),
            343.0,
            Dimension::Two,
        )
        .unwrap()
    }

    fn exact_pairs(cfg: &TestbedConfig, x: &Point) -> Vec<TdoaPair> {
        let c = cfg.speed_of_sound;
        let ids: Vec<_> = cfg.anchor_ids().collect();
        let r = ids[0];
        let d = |id: AnchorId| (cfg.position(id).unwrap() - x).norm();
        let tdoas = ids.iter().map(|&k| (k, (d(k) - d(r)) / c)).collect();
        permute_tdoas(&tdoas, c)
    }

    #[test]
    fn tdoa_examples() {
        // A at (0,0), B at (17,0), c = 340, B emits 1 s after A.
        assert!((compute_tdoa(1.05, 0.0, 1.0) - 0.05).abs() < 1e-15);
        assert!((compute_tdoa(1.0, 0.05, 1.0) + 0.05).abs() < 1e-15);
        assert_eq!(compute_tdoa(3.5, 2.5, 1.0), 0.0);
    }

    #[test]
    fn permutation_is_antisymmetric() {
        let tdoas = BTreeMap::from([(AnchorId(1), 0.0), (AnchorId(2), 0.013), (AnchorId(3), -0.004)]);
        let pairs = permute_tdoas(&tdoas, 343.0);
        assert_eq!(pairs.len(), 6);
        let get = |i: u32, j: u32| {
            pairs
                .iter()
                .find(|p| p.anchor_i == AnchorId(i) && p.anchor_j == AnchorId(j))
                .unwrap()
                .tdoa
        };
        assert_eq!(get(2, 3), -0.004 - 0.013);
        assert_eq!(get(3, 2), 0.013 - -0.004);
        assert_eq!(get(2, 1), -0.013);
    }

    #[test]
    fn consecutive_ring() {
        let ids: Vec<AnchorId> = (1..=4).map(AnchorId).collect();
        let tdoas = ids.iter().map(|&k| (k, 0.0)).collect();
        let pairs = permute_tdoas(&tdoas, 343.0);
        let ring: Vec<_> = select_pairs(&pairs, PairingMode::Consecutive, &ids)
            .iter()
            .map(|p| (p.anchor_i.0, p.anchor_j.0))
            .collect();
        assert_eq!(ring, vec![(1, 2), (2, 3), (3, 4), (4, 1)]);

        let order = vec![AnchorId(3), AnchorId(1), AnchorId(2)];
        let all = select_pairs(&pairs, PairingMode::AllPairs, &order);
        assert_eq!(all.len(), 3);
        assert_eq!((all[0].anchor_i, all[0].anchor_j), (AnchorId(3), AnchorId(1)));
    }

    #[test]
    fn all_pairs_counts() {
        let ids: Vec<AnchorId> = (1..=8).map(AnchorId).collect();
        let tdoas = ids.iter().map(|&k| (k, 0.0)).collect();
        let pairs = permute_tdoas(&tdoas, 343.0);
        assert_eq!(pairs.len(), 56);
        assert_eq!(select_pairs(&pairs, PairingMode::AllPairs, &ids).len(), 28);
    }

    #[test]
    fn solves_corner_geometry() {
        let cfg = square_testbed(false);
        let truth = Point::new(3.0, 4.0, 0.0);
        let pairs = exact_pairs(&cfg, &truth);
        let sol = solve_position(&pairs, &cfg, &Point::new(5.0, 5.0, 0.0), &SolverParams::default()).unwrap();
        assert!((sol.position - truth).norm() < 1e-6, "{:?}", sol.position);
        assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    }

    #[test]
    fn zero_ddoas_give_centroid() {
        let cfg = square_testbed(false);
        let ids: Vec<_> = cfg.anchor_ids().collect();
        let tdoas = ids.iter().map(|&k| (k, 0.0)).collect();
        let pairs = permute_tdoas(&tdoas, 343.0);
        let sol = solve_position(&pairs, &cfg, &Point::new(2.0, 7.0, 0.0), &SolverParams::default()).unwrap();
        assert!((sol.position - Point::new(5.0, 5.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn outside_target_clamps_to_boundary() {
        let cfg = square_testbed(false);
        let truth = Point::new(11.0, 5.0, 0.0);
        let pairs = exact_pairs(&cfg, &truth);
        let sol = solve_position(&pairs, &cfg, &Point::new(5.0, 5.0, 0.0), &SolverParams::default()).unwrap();
        assert!(cfg.bounds.contains(Dimension::Two, &sol.position));
        assert!((sol.position.x - 10.0).abs() < 1e-9, "{:?}", sol.position);
        assert!((sol.position.y - 5.0).abs() < 1e-3, "{:?}", sol.position);
    }

    #[test]
    fn underdetermined_is_an_error() {
        let cfg = square_testbed(false);
        let tdoas = BTreeMap::from([(AnchorId(1), 0.0), (AnchorId(2), 0.001)]);
        let pairs = permute_tdoas(&tdoas, 343.0);
        assert!(matches!(
            solve_position(&pairs, &cfg, &Point::new(5.0, 5.0, 0.0), &SolverParams::default()),
            Err(Error::Underdetermined { have: 2, need: 3 })
        ));
    }

    fn offset_set(ids: &[AnchorId]) -> OffsetSet {
        OffsetSet {
            reference: ids[0],
            offsets: ids.iter().map(|&k| (k, 0.0)).collect(),
            valid_anchors: ids.iter().copied().collect(),
            avg_ranging_error: 0.0,
        }
    }

    const CTX: FixContext = FixContext { target: TargetId(0), window_start: 0.0 };

    #[test]
    fn clean_data_passes_through() {
        let cfg = square_testbed(true);
        let truth = Point::new(3.0, 6.5, 0.0);
        let ids: Vec<_> = cfg.anchor_ids().collect();
        // Zero emission offsets: target timestamps are plain flight times.
        let ts = ids
            .iter()
            .map(|&k| (k, (cfg.position(k).unwrap() - truth).norm() / cfg.speed_of_sound))
            .collect();
        let fix = iterative_outlier_removal(&offset_set(&ids), &ts, &cfg, &SolverParams::default(), CTX).unwrap();
        assert!(fix.removed_anchors.is_empty());
        assert!((fix.position - truth).norm() < 1e-6);
        assert_eq!(fix.used_anchors.len(), 5);
    }

    #[test]
    fn biased_anchor_is_removed_first() {
        let cfg = square_testbed(true);
        let truth = Point::new(3.0, 6.1, 0.0);
        let ids: Vec<_> = cfg.anchor_ids().collect();
        let mut ts: BTreeMap<AnchorId, f64> = ids
            .iter()
            .map(|&k| (k, (cfg.position(k).unwrap() - truth).norm() / cfg.speed_of_sound))
            .collect();
        // Center anchor arrives 3 ms late (about 1.03 m of distance difference).
        *ts.get_mut(&AnchorId(5)).unwrap() += 3e-3;
        let fix = iterative_outlier_removal(&offset_set(&ids), &ts, &cfg, &SolverParams::default(), CTX).unwrap();
        assert_eq!(fix.removed_anchors, vec![AnchorId(5)]);
        assert_eq!(fix.diagnostics.rounds.len(), 2);
        assert!((fix.position - truth).norm() < 1e-6);

        let raw = SolverParams { outlier_removal: false, ..Default::default() };
        let fix = iterative_outlier_removal(&offset_set(&ids), &ts, &cfg, &raw, CTX).unwrap();
        assert!(fix.removed_anchors.is_empty());
        assert!((fix.position - truth).norm() > 0.05);
    }

    #[test]
    fn four_anchors_one_biased() {
        let cfg = square_testbed(false);
        let truth = Point::new(6.0, 6.1, 0.0);
        let ids: Vec<_> = cfg.anchor_ids().collect();
        let mut ts: BTreeMap<AnchorId, f64> = ids
            .iter()
            .map(|&k| (k, (cfg.position(k).unwrap() - truth).norm() / cfg.speed_of_sound))
            .collect();
        *ts.get_mut(&AnchorId(1)).unwrap() += 3e-3;
        let fix = iterative_outlier_removal(&offset_set(&ids), &ts, &cfg, &SolverParams::default(), CTX).unwrap();
        assert_eq!(fix.removed_anchors, vec![AnchorId(1)]);
        assert_eq!(fix.used_anchors.len(), 3);
        assert!((fix.position - truth).norm() < 1e-6);
    }

    #[test]
    fn too_few_anchors_gives_none() {
        let cfg = square_testbed(false);
        let ids = vec![AnchorId(1), AnchorId(2)];
        let ts = BTreeMap::from([(AnchorId(1), 0.01), (AnchorId(2), 0.02)]);
        assert!(iterative_outlier_removal(&offset_set(&ids), &ts, &cfg, &SolverParams::default(), CTX).is_none());
    }
}
