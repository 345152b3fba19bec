//! Deterministic timestamp-level simulator of anchors, targets and the
//! beacon schedule.
//!
//! Every emission at common time `T` from anchor `a` reaches receiver `n` at
//! local time `T + d(a, n)/c + nlos(a, n) + clock(n) + jitter`, where the
//! self-reception path is the anchor's speaker-to-mic separation. Self
//! receptions are never lost and never NLOS-biased.
//!
//! Randomness comes from ChaCha8 seeded with the scenario seed. Each
//! `(source, seqno, receiver)` reception draws from its own ChaCha stream
//! (see [`reception_stream`]), so perturbing one link leaves every other
//! draw unchanged. The schedule uses stream [`SCHEDULE_STREAM`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{
    AnchorConfig, AnchorId, BeaconObservation, Bounds, Dimension, NodeId, Point, TargetId, TestbedConfig,
};

pub const SCHEDULE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Tdma,
    RandomBackoff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub slot_length: f64,
    pub beacon_duration: f64,
    pub mode: ScheduleMode,
    /// Upper bound of the uniform backoff added in random-backoff mode, seconds.
    pub backoff_max: f64,
    /// Slots per TDMA round; defaults to the number of anchors. Extra slots
    /// are idle.
    pub slots_per_round: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            slot_length: 1.0,
            beacon_duration: 0.44,
            mode: ScheduleMode::Tdma,
            backoff_max: 0.0,
            slots_per_round: None,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, anchors: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.slot_length > 0.0 && self.beacon_duration >= 0.0 && self.backoff_max >= 0.0) {
            return bad("schedule lengths must be positive");
        }
        if self.mode == ScheduleMode::Tdma && self.beacon_duration >= self.slot_length {
            return bad("beacon duration must be shorter than the TDMA slot");
        }
        if self.slots_per_round.is_some_and(|s| s < anchors) {
            return bad("slots_per_round is smaller than the number of anchors");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub anchor: AnchorId,
    pub seqno: u64,
    /// Common-time emission instant, seconds.
    pub time: f64,
}

/// Emissions for every complete round that fits in `duration`. Anchor `k`
/// (by position in `anchor_ids`) emits at `(round * slots + k) * slot`,
/// with `seqno = round`.
pub fn generate_schedule<R: Rng + ?Sized>(
    cfg: &ScheduleConfig,
    anchor_ids: &[AnchorId],
    duration: f64,
    rng: &mut R,
) -> Vec<Emission> {
    if anchor_ids.is_empty() {
        return Vec::new();
    }
    let slots = cfg.slots_per_round.unwrap_or(anchor_ids.len());
    let round_len = slots as f64 * cfg.slot_length;
    let rounds = (duration / round_len + 1e-9).floor() as u64;
    let mut out = Vec::with_capacity(rounds as usize * anchor_ids.len());
    for round in 0..rounds {
        for (k, &anchor) in anchor_ids.iter().enumerate() {
            let mut time = (round as f64 * slots as f64 + k as f64) * cfg.slot_length;
            if cfg.mode == ScheduleMode::RandomBackoff && cfg.backoff_max > 0.0 {
                time += rng.random_range(0.0..cfg.backoff_max);
            }
            out.push(Emission { anchor, seqno: round, time });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseModel {
    /// Standard deviation of the zero-mean Gaussian timestamp noise, seconds.
    pub timestamp_jitter_sigma: f64,
    /// Probability that a non-self reception is lost.
    pub miss_detect_prob: f64,
    /// Extra delay on directed links `(source, receiver)`, seconds.
    pub nlos_bias: BTreeMap<(AnchorId, NodeId), f64>,
    /// Constant local-clock offset per node, seconds.
    pub clock_offset: BTreeMap<NodeId, f64>,
    /// Timestamps are rounded to this resolution; 0 keeps them exact.
    pub timestamp_resolution: f64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel::default()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.timestamp_jitter_sigma >= 0.0 && self.timestamp_jitter_sigma.is_finite()) {
            return bad("jitter sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.miss_detect_prob) {
            return bad("miss-detection probability must lie in [0, 1]");
        }
        if self.nlos_bias.values().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return bad("NLOS biases must be >= 0");
        }
        if self.clock_offset.values().any(|o| !o.is_finite()) {
            return bad("clock offsets must be finite");
        }
        if !(self.timestamp_resolution >= 0.0 && self.timestamp_resolution.is_finite()) {
            return bad("timestamp resolution must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub label: String,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub testbed: TestbedConfig,
    /// Target `k` is simulated as `TargetId(k)`.
    pub targets: Vec<TargetSpec>,
    pub schedule: ScheduleConfig,
    pub noise: NoiseModel,
    pub seed: u64,
    pub duration: f64,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        self.testbed.validate()?;
        self.schedule.validate(self.testbed.anchors.len())?;
        self.noise.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidConfig("duration must be > 0".into()));
        }
        for t in &self.targets {
            if !self.testbed.bounds.contains(self.testbed.dimension, &t.position) {
                return Err(Error::InvalidConfig(format!("target '{}' lies outside bounds", t.label)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTruth {
    pub id: TargetId,
    pub label: String,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub speed_of_sound: f64,
    pub dimension: Dimension,
    pub anchors: BTreeMap<AnchorId, Point>,
    pub targets: Vec<TargetTruth>,
    pub emissions: Vec<Emission>,
}

impl GroundTruth {
    pub fn target(&self, id: TargetId) -> Option<&TargetTruth> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn emission(&self, anchor: AnchorId, seqno: u64) -> Option<&Emission> {
        self.emissions.iter().find(|e| e.anchor == anchor && e.seqno == seqno)
    }
}

/// Expected TDoA `(dist(j, x) - dist(i, x)) / c` straight from geometry.
pub fn oracle_tdoa(truth: &GroundTruth, i: AnchorId, j: AnchorId, x: &Point) -> Result<f64> {
    let pi = truth.anchors.get(&i).ok_or(Error::UnknownAnchor(i))?;
    let pj = truth.anchors.get(&j).ok_or(Error::UnknownAnchor(j))?;
    let dim = truth.dimension;
    Ok((dim.dist(pj, x) - dim.dist(pi, x)) / truth.speed_of_sound)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha stream index for one reception.
pub fn reception_stream(source: AnchorId, seqno: u64, receiver: NodeId) -> u64 {
    let kind = match receiver {
        NodeId::Anchor(_) => 0u64,
        NodeId::Target(_) => 1u64,
    };
    let mut h = splitmix64(u64::from(source.0));
    h = splitmix64(h ^ seqno);
    h = splitmix64(h ^ (kind << 32 | u64::from(receiver.raw())));
    if h == SCHEDULE_STREAM {
        h - 1
    } else {
        h
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn quantize(ts: f64, resolution: f64) -> f64 {
    if resolution > 0.0 {
        // Dividing by an integral inverse makes decimal resolutions land on
        // the same f64 a printed-and-parsed timestamp would.
        let inv = (1.0 / resolution).round();
        if inv >= 1.0 && ((1.0 / inv) - resolution).abs() <= resolution * 1e-12 {
            (ts * inv).round() / inv
        } else {
            (ts / resolution).round() * resolution
        }
    } else {
        ts
    }
}

/// Runs a scenario. Observations come out ordered by true reception time.
pub fn simulate(scenario: &SimScenario) -> Result<(Vec<BeaconObservation>, GroundTruth)> {
    scenario.validate()?;
    let tb = &scenario.testbed;
    let c = tb.speed_of_sound;
    let noise = &scenario.noise;
    let ids: Vec<AnchorId> = tb.anchor_ids().collect();

    let mut sched_rng = rng_for(scenario.seed, SCHEDULE_STREAM);
    let emissions = generate_schedule(&scenario.schedule, &ids, scenario.duration, &mut sched_rng);

    let jitter = if noise.timestamp_jitter_sigma > 0.0 {
        Some(Normal::new(0.0, noise.timestamp_jitter_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };

    let mut receivers: Vec<(NodeId, Point)> =
        tb.anchors.iter().map(|a| (NodeId::Anchor(a.id), a.position)).collect();
    receivers.extend(
        scenario
            .targets
            .iter()
            .enumerate()
            .map(|(k, t)| (NodeId::Target(TargetId(k as u32)), t.position)),
    );

    let mut events: Vec<(f64, BeaconObservation)> = Vec::new();
    for e in &emissions {
        let src: &AnchorConfig = tb.anchor(e.anchor).ok_or(Error::UnknownAnchor(e.anchor))?;
        for &(receiver, pos) in &receivers {
            let mut rng = rng_for(scenario.seed, reception_stream(e.anchor, e.seqno, receiver));
            // Both draws always happen so streams stay aligned across settings.
            let lost = rng.random::<f64>() < noise.miss_detect_prob;
            let noise_term = jitter.map_or(0.0, |n| n.sample(&mut rng));

            let is_self = receiver == NodeId::Anchor(e.anchor);
            if lost && !is_self {
                continue;
            }
            let flight = if is_self {
                src.mic_speaker_separation / c
            } else {
                (src.position - pos).norm() / c
            };
            let bias = if is_self {
                0.0
            } else {
                noise.nlos_bias.get(&(e.anchor, receiver)).copied().unwrap_or(0.0)
            };
            let arrival = e.time + flight + bias;
            let clock = noise.clock_offset.get(&receiver).copied().unwrap_or(0.0);
            let timestamp = quantize(arrival + clock + noise_term, noise.timestamp_resolution);
            events.push((
                arrival,
                BeaconObservation { receiver, source: e.anchor, seqno: e.seqno, timestamp },
            ));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.receiver.cmp(&b.1.receiver)));

    let truth = GroundTruth {
        speed_of_sound: c,
        dimension: tb.dimension,
        anchors: tb.anchors.iter().map(|a| (a.id, a.position)).collect(),
        targets: scenario
            .targets
            .iter()
            .enumerate()
            .map(|(k, t)| TargetTruth { id: TargetId(k as u32), label: t.label.clone(), position: t.position })
            .collect(),
        emissions,
    };
    Ok((events.into_iter().map(|(_, o)| o).collect(), truth))
}

/// Office-sized 2D testbed: 10.67 m × 7.76 m with eight anchors around the
/// perimeter, numbered counter-clockwise from the lower-left corner.
pub fn office_testbed() -> TestbedConfig {
    let pos = [
        (0.30, 0.30),
        (5.33, 0.30),
        (10.37, 0.30),
        (10.37, 3.88),
        (10.37, 7.46),
        (5.33, 7.46),
        (0.30, 7.46),
        (0.30, 3.88),
    ];
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
        Bounds::new(Point::new(0.0, 0.0, -1.0), Point::new(10.67, 7.76, 3.0)),
        crate::model::DEFAULT_SPEED_OF_SOUND,
        Dimension::Two,
    )
    .expect("office testbed is valid")
}

/// Six test locations inside the office testbed.
pub fn office_targets() -> Vec<TargetSpec> {
    [(2.1, 1.9), (5.2, 2.4), (8.6, 1.7), (2.7, 5.6), (6.1, 4.3), (8.9, 6.0)]
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| TargetSpec { label: format!("L{}", k + 1), position: Point::new(x, y, 0.0) })
        .collect()
}

/// TDMA schedule with one idle slot per round, so an 18 s window covers two
/// full rounds of eight anchors.
pub fn office_schedule() -> ScheduleConfig {
    ScheduleConfig { slots_per_round: Some(9), ..Default::default() }
}
