//! Pairwise transmission-offset estimation and anchor ranging from
//! full-duplex timestamps, and selection of a consistent offset set.
//!
//! For anchors A and B whose beacons are emitted at common-time instants
//! `T_A` and `T_B`, each anchor measures one interval on its own clock:
//!
//! ```text
//! interval_a = (A hears B) - (A hears itself) = T_B - T_A + (d_BA - d_AA) / c
//! interval_b = (B hears itself) - (B hears A) = T_B - T_A + (d_BB - d_AB) / c
//! ```
//!
//! Summing cancels the propagation terms (leaving the offset `T_B - T_A`);
//! differencing cancels the offset (leaving the range). Only same-node
//! differences appear, so per-node clock offsets drop out.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{AnchorId, SolverParams, TestbedConfig};
use crate::window::SelectedBeacon;

/// Average ranging errors closer than this are considered tied.
pub const RANGING_TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairIntervals {
    pub anchor_a: AnchorId,
    pub anchor_b: AnchorId,
    /// A's reception of B's beacon minus A's reception of its own, seconds.
    pub interval_a: f64,
    /// B's reception of its own beacon minus B's reception of A's, seconds.
    pub interval_b: f64,
    pub sep_a: f64,
    pub sep_b: f64,
}

impl PairIntervals {
    /// Builds the intervals for `a` then `b`; `None` unless each anchor
    /// decoded the other's beacon.
    pub fn from_beacons(a: &SelectedBeacon, b: &SelectedBeacon, sep_a: f64, sep_b: f64) -> Option<Self> {
        let a_hears_b = *b.peer_timestamps.get(&a.source)?;
        let b_hears_a = *a.peer_timestamps.get(&b.source)?;
        Some(PairIntervals {
            anchor_a: a.source,
            anchor_b: b.source,
            interval_a: a_hears_b - a.self_timestamp,
            interval_b: b.self_timestamp - b_hears_a,
            sep_a,
            sep_b,
        })
    }
}

/// Emission time of B's beacon minus A's, in common time. Assumes the
/// A→B and B→A path lengths are equal.
pub fn estimate_time_offset(p: &PairIntervals, c: f64) -> f64 {
    (p.interval_b + p.interval_a) / 2.0 + (p.sep_a - p.sep_b) / (2.0 * c)
}

/// Speaker-to-microphone distance between the two anchors, meters.
pub fn estimate_anchor_distance(p: &PairIntervals, c: f64) -> f64 {
    c / 2.0 * (p.interval_a - p.interval_b) + (p.sep_a + p.sep_b) / 2.0
}

/// Ranging check for one anchor pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCheck {
    /// `T_j - T_i`, seconds.
    pub offset: f64,
    pub distance: f64,
    pub truth: f64,
    pub error: f64,
    pub valid: bool,
}

/// Ranging checks for every ordered pair `(i, j)`, `i != j`, of selected
/// anchors. Pairs where either cross-reception is missing are absent.
pub fn ranging_matrix(
    selected: &BTreeMap<AnchorId, SelectedBeacon>,
    config: &TestbedConfig,
    ranging_err_thr: f64,
) -> BTreeMap<(AnchorId, AnchorId), PairCheck> {
    let c = config.speed_of_sound;
    let mut out = BTreeMap::new();
    let beacons: Vec<_> = selected
        .values()
        .filter_map(|b| config.anchor(b.source).map(|a| (b, a)))
        .collect();
    for (n, (bi, ai)) in beacons.iter().enumerate() {
        for (bj, aj) in &beacons[n + 1..] {
            let Some(p) = PairIntervals::from_beacons(bi, bj, ai.mic_speaker_separation, aj.mic_speaker_separation)
            else {
                continue;
            };
            let distance = estimate_anchor_distance(&p, c);
            let offset = estimate_time_offset(&p, c);
            let truth = (ai.position - aj.position).norm();
            let error = (distance - truth).abs();
            let valid = error <= ranging_err_thr;
            let check = PairCheck { offset, distance, truth, error, valid };
            out.insert((ai.id, aj.id), check);
            out.insert((aj.id, ai.id), PairCheck { offset: -offset, ..check });
        }
    }
    out
}

/// Time offsets of every valid anchor relative to one reference anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSet {
    pub reference: AnchorId,
    /// `k -> T_k - T_reference`; the reference maps to 0.
    pub offsets: BTreeMap<AnchorId, f64>,
    pub valid_anchors: BTreeSet<AnchorId>,
    /// Mean ranging error over the reference's valid pairs, meters.
    pub avg_ranging_error: f64,
}

/// Picks the reference anchor whose valid pairs have the smallest mean
/// ranging error, among references that keep at least
/// `num_anchors_req` anchors (itself included). Ties go to the reference
/// keeping more anchors, then to the lowest id.
/// Returns `None` when no reference qualifies.
pub fn detect_outlier_offsets(
    selected: &BTreeMap<AnchorId, SelectedBeacon>,
    config: &TestbedConfig,
    params: &SolverParams,
) -> Option<OffsetSet> {
    let checks = ranging_matrix(selected, config, params.ranging_err_thr);
    let mut best: Option<OffsetSet> = None;

    for &reference in selected.keys() {
        let mut offsets = BTreeMap::from([(reference, 0.0)]);
        let mut errors = Vec::new();
        for &peer in selected.keys().filter(|&&k| k != reference) {
            if let Some(check) = checks.get(&(reference, peer)).filter(|c| c.valid) {
                offsets.insert(peer, check.offset);
                errors.push(check.error);
            }
        }
        if offsets.len() < params.num_anchors_req {
            continue;
        }
        let avg = errors.iter().sum::<f64>() / errors.len() as f64;
        let better = match &best {
            None => true,
            Some(b) if avg < b.avg_ranging_error - RANGING_TIE_EPS => true,
            Some(b) if avg <= b.avg_ranging_error + RANGING_TIE_EPS => offsets.len() > b.offsets.len(),
            Some(_) => false,
        };
        if better {
            best = Some(OffsetSet {
                reference,
                valid_anchors: offsets.keys().copied().collect(),
                offsets,
                avg_ranging_error: avg,
            });
        }
    }
    best
}
