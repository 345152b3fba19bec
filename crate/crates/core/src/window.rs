//! Tumbling observation windows and per-anchor beacon selection.
//!
//! Windows are per target and anchored at that target's earliest timestamp.
//! A beacon belongs to the window in which the target heard it; anchor-side
//! receptions of the same beacon are joined by `(source, seqno)`.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{AnchorId, BeaconObservation, NodeId, TargetId};

/// Timestamps closer than this to a window's end belong to the next window.
pub const WINDOW_EDGE_EPS: f64 = 1e-9;

pub const DEFAULT_WINDOW_SECONDS: f64 = 18.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub target: TargetId,
    pub start: f64,
    pub length: f64,
    pub observations: Vec<BeaconObservation>,
}

impl ObservationWindow {
    pub fn end(&self) -> f64 {
        self.start + self.length
    }

    /// Copy of this window without the given anchors, both as beacon sources
    /// and as receivers.
    pub fn without_anchors(&self, removed: &BTreeSet<AnchorId>) -> ObservationWindow {
        let observations = self
            .observations
            .iter()
            .filter(|o| {
                !removed.contains(&o.source)
                    && !matches!(o.receiver, NodeId::Anchor(a) if removed.contains(&a))
            })
            .copied()
            .collect();
        ObservationWindow { observations, ..self.clone() }
    }
}

/// Index of the window holding `ts` for a window grid starting at `origin`.
pub fn window_index(ts: f64, origin: f64, length: f64) -> i64 {
    let rel = ts - origin;
    let k = (rel / length).floor();
    if (k + 1.0) * length - rel < WINDOW_EDGE_EPS {
        k as i64 + 1
    } else {
        k as i64
    }
}

/// Earliest target timestamp per target.
pub fn window_origins(stream: &[BeaconObservation]) -> BTreeMap<TargetId, f64> {
    let mut origins = BTreeMap::new();
    for o in stream {
        if let Some(t) = o.target() {
            origins
                .entry(t)
                .and_modify(|v: &mut f64| *v = v.min(o.timestamp))
                .or_insert(o.timestamp);
        }
    }
    origins
}

/// Splits a stream into tumbling windows of `length` seconds, one grid per
/// target anchored at that target's first observation.
pub fn window_observations(stream: &[BeaconObservation], length: f64) -> Vec<ObservationWindow> {
    window_observations_with_origins(stream, length, &window_origins(stream))
}

/// Same as [`window_observations`] with explicit grid origins; targets
/// without an origin are skipped.
pub fn window_observations_with_origins(
    stream: &[BeaconObservation],
    length: f64,
    origins: &BTreeMap<TargetId, f64>,
) -> Vec<ObservationWindow> {
    let mut anchor_side: BTreeMap<(AnchorId, u64), Vec<BeaconObservation>> = BTreeMap::new();
    for o in stream.iter().filter(|o| o.target().is_none()) {
        anchor_side.entry((o.source, o.seqno)).or_default().push(*o);
    }

    let mut buckets: BTreeMap<(TargetId, i64), Vec<BeaconObservation>> = BTreeMap::new();
    for o in stream {
        let Some(t) = o.target() else { continue };
        let Some(&origin) = origins.get(&t) else { continue };
        buckets
            .entry((t, window_index(o.timestamp, origin, length)))
            .or_default()
            .push(*o);
    }

    buckets
        .into_iter()
        .map(|((target, k), target_obs)| {
            let beacons: BTreeSet<(AnchorId, u64)> =
                target_obs.iter().map(|o| (o.source, o.seqno)).collect();
            let mut observations = target_obs;
            for key in &beacons {
                if let Some(side) = anchor_side.get(key) {
                    observations.extend_from_slice(side);
                }
            }
            ObservationWindow {
                target,
                start: origins[&target] + k as f64 * length,
                length,
                observations,
            }
        })
        .collect()
}

/// The timestamps of one beacon that the offset estimator needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedBeacon {
    pub source: AnchorId,
    pub seqno: u64,
    /// Source anchor's own reception of its beacon (local clock).
    pub self_timestamp: f64,
    /// Target's reception (target clock).
    pub target_timestamp: f64,
    /// Other anchors' receptions, each on that anchor's clock.
    pub peer_timestamps: BTreeMap<AnchorId, f64>,
}

/// Keeps the latest complete beacon per anchor. A beacon is complete when
/// both its source anchor and the window's target decoded it; peer
/// receptions are carried along and checked per pair downstream.
pub fn select_per_anchor(window: &ObservationWindow) -> BTreeMap<AnchorId, SelectedBeacon> {
    #[derive(Default)]
    struct Partial {
        own: Option<f64>,
        target: Option<f64>,
        peers: BTreeMap<AnchorId, f64>,
    }
    // Duplicates of the same reception resolve to the earliest timestamp so
    // the result does not depend on input order.
    fn keep_min(slot: &mut Option<f64>, ts: f64) {
        *slot = Some(slot.map_or(ts, |v| v.min(ts)));
    }

    let mut beacons: BTreeMap<(AnchorId, u64), Partial> = BTreeMap::new();
    for o in &window.observations {
        let p = beacons.entry((o.source, o.seqno)).or_default();
        match o.receiver {
            NodeId::Anchor(a) if a == o.source => keep_min(&mut p.own, o.timestamp),
            NodeId::Anchor(a) => {
                p.peers
                    .entry(a)
                    .and_modify(|v| *v = v.min(o.timestamp))
                    .or_insert(o.timestamp);
            }
            NodeId::Target(t) if t == window.target => keep_min(&mut p.target, o.timestamp),
            NodeId::Target(_) => {}
        }
    }

    let mut out: BTreeMap<AnchorId, SelectedBeacon> = BTreeMap::new();
    // Ascending seqno per source, so later entries overwrite earlier ones.
    for ((source, seqno), p) in beacons {
        if let (Some(own), Some(target)) = (p.own, p.target) {
            out.insert(
                source,
                SelectedBeacon {
                    source,
                    seqno,
                    self_timestamp: own,
                    target_timestamp: target,
                    peer_timestamps: p.peers,
                },
            );
        }
    }
    out
}
