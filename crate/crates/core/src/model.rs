//! Domain types shared by the offset estimator, the solver, the simulator and
//! the location server.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions are always stored as 3-vectors; 2D testbeds ignore `z`.
pub type Point = Vector3<f64>;

/// Speed of sound in dry air at 20 °C.
pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetId(pub u32);

impl fmt::Display for AnchorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A node that can time-stamp a received beacon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum NodeId {
    Anchor(AnchorId),
    Target(TargetId),
}

impl NodeId {
    pub fn kind(&self) -> &'static str {
        match self {
            NodeId::Anchor(_) => "anchor",
            NodeId::Target(_) => "target",
        }
    }

    pub fn raw(&self) -> u32 {
        match self {
            NodeId::Anchor(a) => a.0,
            NodeId::Target(t) => t.0,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind(), self.raw())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dimension {
    Two,
    Three,
}

impl Dimension {
    pub fn count(self) -> usize {
        match self {
            Dimension::Two => 2,
            Dimension::Three => 3,
        }
    }

    /// Minimum number of anchors needed for a fix.
    pub fn anchors_required(self) -> usize {
        self.count() + 1
    }

    /// Drops the coordinates this dimension does not solve for.
    pub fn project(self, p: &Point) -> Point {
        match self {
            Dimension::Two => Point::new(p.x, p.y, 0.0),
            Dimension::Three => *p,
        }
    }

    pub fn dist(self, a: &Point, b: &Point) -> f64 {
        match self {
            Dimension::Two => (a.x - b.x).hypot(a.y - b.y),
            Dimension::Three => (a - b).norm(),
        }
    }
}

impl TryFrom<u8> for Dimension {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            2 => Ok(Dimension::Two),
            3 => Ok(Dimension::Three),
            other => Err(format!("dimension must be 2 or 3, got {other}")),
        }
    }
}

impl From<Dimension> for u8 {
    fn from(d: Dimension) -> u8 {
        d.count() as u8
    }
}

/// Euclidean distance between two coordinate vectors of equal length.
pub fn distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn new(min: Point, max: Point) -> Self {
        Bounds { min, max }
    }

    pub fn contains(&self, dim: Dimension, p: &Point) -> bool {
        (0..dim.count()).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn clamp(&self, dim: Dimension, p: &Point) -> Point {
        let mut out = dim.project(p);
        for k in 0..dim.count() {
            out[k] = out[k].clamp(self.min[k], self.max[k]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub id: AnchorId,
    pub position: Point,
    /// Speaker-to-microphone distance on this anchor, meters.
    pub mic_speaker_separation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedConfig {
    /// Sorted by id.
    pub anchors: Vec<AnchorConfig>,
    pub bounds: Bounds,
    pub speed_of_sound: f64,
    pub dimension: Dimension,
}

impl TestbedConfig {
    /// Validates and normalizes (anchors sorted by id).
    pub fn new(
        mut anchors: Vec<AnchorConfig>,
        bounds: Bounds,
        speed_of_sound: f64,
        dimension: Dimension,
    ) -> Result<Self> {
        anchors.sort_by_key(|a| a.id);
        let cfg = TestbedConfig {
            anchors,
            bounds,
            speed_of_sound,
            dimension,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return bad(format!("speed of sound must be > 0, got {}", self.speed_of_sound));
        }
        let need = self.dimension.anchors_required();
        if self.anchors.len() < need {
            return bad(format!("{} anchors configured, need at least {need}", self.anchors.len()));
        }
        for k in 0..self.dimension.count() {
            if !(self.bounds.min[k].is_finite() && self.bounds.max[k].is_finite())
                || self.bounds.min[k] > self.bounds.max[k]
            {
                return bad(format!("bounds axis {k} is empty or not finite"));
            }
        }
        for w in self.anchors.windows(2) {
            if w[0].id == w[1].id {
                return bad(format!("duplicate anchor id {}", w[0].id));
            }
        }
        for a in &self.anchors {
            if !a.position.iter().all(|v| v.is_finite()) {
                return bad(format!("anchor {} position is not finite", a.id));
            }
            if !(a.mic_speaker_separation >= 0.0 && a.mic_speaker_separation.is_finite()) {
                return bad(format!("anchor {} has negative separation", a.id));
            }
            if !self.bounds.contains(self.dimension, &a.position) {
                return bad(format!("anchor {} lies outside bounds", a.id));
            }
        }
        Ok(())
    }

    pub fn anchor(&self, id: AnchorId) -> Option<&AnchorConfig> {
        self.anchors
            .binary_search_by_key(&id, |a| a.id)
            .ok()
            .map(|i| &self.anchors[i])
    }

    pub fn position(&self, id: AnchorId) -> Result<Point> {
        self.anchor(id)
            .map(|a| a.position)
            .ok_or(Error::UnknownAnchor(id))
    }

    pub fn anchor_ids(&self) -> impl Iterator<Item = AnchorId> + '_ {
        self.anchors.iter().map(|a| a.id)
    }

    /// Keeps only the listed anchors.
    pub fn restricted_to(&self, keep: &BTreeSet<AnchorId>) -> Result<Self> {
        for id in keep {
            if self.anchor(*id).is_none() {
                return Err(Error::UnknownAnchor(*id));
            }
        }
        TestbedConfig::new(
            self.anchors
                .iter()
                .filter(|a| keep.contains(&a.id))
                .cloned()
                .collect(),
            self.bounds,
            self.speed_of_sound,
            self.dimension,
        )
    }
}

/// One decoded beacon: `receiver` heard the beacon `(source, seqno)` at
/// `timestamp` seconds on its own clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconObservation {
    pub receiver: NodeId,
    pub source: AnchorId,
    pub seqno: u64,
    pub timestamp: f64,
}

impl BeaconObservation {
    pub fn target(&self) -> Option<TargetId> {
        match self.receiver {
            NodeId::Target(t) => Some(t),
            NodeId::Anchor(_) => None,
        }
    }

    /// Deduplication key.
    pub fn key(&self) -> (NodeId, AnchorId, u64) {
        (self.receiver, self.source, self.seqno)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    AllPairs,
    Consecutive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    /// Inter-anchor ranging error above which a time offset is discarded, meters.
    pub ranging_err_thr: f64,
    /// Distance-difference residual above which a TDoA pair counts as bad, meters.
    pub ddoa_err_thr: f64,
    pub num_anchors_req: usize,
    pub pairing_mode: PairingMode,
    pub outlier_removal: bool,
    pub gn_max_iters: usize,
    /// Step-norm stopping tolerance, meters.
    pub gn_tolerance: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            ranging_err_thr: 0.5,
            ddoa_err_thr: 0.3,
            num_anchors_req: 3,
            pairing_mode: PairingMode::AllPairs,
            outlier_removal: true,
            gn_max_iters: 100,
            gn_tolerance: 1e-10,
        }
    }
}

impl SolverParams {
    pub fn for_dimension(dim: Dimension) -> Self {
        SolverParams {
            num_anchors_req: dim.anchors_required(),
            ..Default::default()
        }
    }

    pub fn with_variant(self, v: Variant) -> Self {
        SolverParams {
            pairing_mode: v.pairing,
            outlier_removal: v.outlier_removal,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.ranging_err_thr > 0.0 && self.ddoa_err_thr > 0.0 && self.gn_tolerance > 0.0) {
            return bad("solver thresholds must be > 0");
        }
        if !(3..=4).contains(&self.num_anchors_req) {
            return bad("num_anchors_req must be 3 or 4");
        }
        if self.gn_max_iters == 0 {
            return bad("gn_max_iters must be positive");
        }
        Ok(())
    }
}

/// The four evaluated algorithm variants: pair selection crossed with
/// iterative outlier removal on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub pairing: PairingMode,
    pub outlier_removal: bool,
}

impl Variant {
    pub const ALL_RAW: Variant = Variant { pairing: PairingMode::AllPairs, outlier_removal: false };
    pub const CONSEC_RAW: Variant = Variant { pairing: PairingMode::Consecutive, outlier_removal: false };
    pub const ALL_ROBUST: Variant = Variant { pairing: PairingMode::AllPairs, outlier_removal: true };
    pub const CONSEC_ROBUST: Variant = Variant { pairing: PairingMode::Consecutive, outlier_removal: true };

    pub const ALL: [Variant; 4] = [
        Variant::ALL_RAW,
        Variant::CONSEC_RAW,
        Variant::ALL_ROBUST,
        Variant::CONSEC_ROBUST,
    ];

    pub fn name(&self) -> &'static str {
        match (self.pairing, self.outlier_removal) {
            (PairingMode::AllPairs, false) => "all-raw",
            (PairingMode::Consecutive, false) => "consec-raw",
            (PairingMode::AllPairs, true) => "all-robust",
            (PairingMode::Consecutive, true) => "consec-robust",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    /// Accepts `all-raw`, `consec-robust`, ... and the `allxraw` spelling.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (pairing, removal) = lower
            .split_once(['-', 'x', '_'])
            .ok_or_else(|| Error::InvalidConfig(format!("bad variant '{s}'")))?;
        let pairing = match pairing {
            "all" => PairingMode::AllPairs,
            "consec" | "consecutive" => PairingMode::Consecutive,
            _ => return Err(Error::InvalidConfig(format!("bad variant '{s}'"))),
        };
        let outlier_removal = match removal {
            "raw" => false,
            "robust" => true,
            _ => return Err(Error::InvalidConfig(format!("bad variant '{s}'"))),
        };
        Ok(Variant { pairing, outlier_removal })
    }
}

/// Per-solve bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    /// Objective at the returned position, meters².
    pub final_objective: f64,
    pub removed_anchors: Vec<AnchorId>,
    /// Bad-pair count per anchor in the last round.
    pub bad_pair_counts: Vec<(AnchorId, usize)>,
    /// Every solve/count round, in order.
    pub rounds: Vec<RemovalRound>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovalRound {
    pub position: Point,
    pub bad_pair_counts: Vec<(AnchorId, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationFix {
    pub target: TargetId,
    pub window_start: f64,
    pub position: Point,
    pub used_anchors: BTreeSet<AnchorId>,
    pub reference: AnchorId,
    /// RMS of the distance-difference residuals over the solved pairs, meters.
    pub residual_rms: f64,
    pub removed_anchors: Vec<AnchorId>,
    pub diagnostics: SolveDiagnostics,
}
