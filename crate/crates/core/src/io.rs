//! Text formats: observation and fix lines (shared with the TCP protocol),
//! ground-truth files, and TOML testbed/scenario configuration.
//!
//! Line grammar, one message per line, space-separated:
//!
//! ```text
//! OBS <anchor|target> <receiverId> src <anchorId> seq <n> ts <seconds>
//! QUERY target <id>
//! FIX target <id> window <start> x <m> y <m> [z <m>] anchors <id,...> rms <m>
//! NOFIX target <id>
//! ERR <message>
//! ```
//!
//! Timestamps and window starts carry 9 fractional digits. Coordinates and
//! residuals use the shortest representation that parses back to the same
//! `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AnchorConfig, AnchorId, BeaconObservation, Bounds, Dimension, LocationFix, NodeId, PairingMode, Point,
    SolverParams, TargetId, TestbedConfig, DEFAULT_SPEED_OF_SOUND,
};
use crate::sim::{
    Emission, GroundTruth, NoiseModel, ScheduleConfig, ScheduleMode, SimScenario, TargetSpec, TargetTruth,
};

/// Position and anchor set of one fix as carried on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct FixRecord {
    pub target: TargetId,
    pub window_start: f64,
    pub position: Point,
    /// `false` for 2D fixes, which omit `z`.
    pub has_z: bool,
    pub anchors: BTreeSet<AnchorId>,
    pub rms: f64,
}

impl FixRecord {
    pub fn from_fix(fix: &LocationFix, dim: Dimension) -> Self {
        FixRecord {
            target: fix.target,
            window_start: fix.window_start,
            position: dim.project(&fix.position),
            has_z: dim == Dimension::Three,
            anchors: fix.used_anchors.clone(),
            rms: fix.residual_rms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Obs(BeaconObservation),
    Query(TargetId),
    Fix(FixRecord),
    NoFix(TargetId),
    Err(String),
}

impl WireMessage {
    pub fn parse(line: &str) -> Result<Self, String> {
        let tok: Vec<&str> = line.split_whitespace().collect();
        let Some(&kind) = tok.first() else {
            return Err("empty message".into());
        };
        match kind {
            "OBS" => parse_obs_tokens(&tok).map(WireMessage::Obs),
            "QUERY" | "NOFIX" => {
                if tok.len() != 3 || tok[1] != "target" {
                    return Err(format!("expected '{kind} target <id>'"));
                }
                let t = TargetId(parse_num(tok[2], "target")?);
                Ok(if kind == "QUERY" { WireMessage::Query(t) } else { WireMessage::NoFix(t) })
            }
            "FIX" => parse_fix_tokens(&tok).map(WireMessage::Fix),
            "ERR" => Ok(WireMessage::Err(line.trim_start()[3..].trim().to_string())),
            other => Err(format!("unknown message kind '{other}'")),
        }
    }
}

impl std::fmt::Display for WireMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WireMessage::Obs(o) => f.write_str(&format_observation(o)),
            WireMessage::Query(t) => write!(f, "QUERY target {t}"),
            WireMessage::Fix(r) => f.write_str(&format_fix_record(r)),
            WireMessage::NoFix(t) => write!(f, "NOFIX target {t}"),
            WireMessage::Err(m) => write!(f, "ERR {}", m.replace('\n', " ")),
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, field: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("field '{field}': cannot parse '{s}'"))
}

fn parse_f64(s: &str, field: &str) -> Result<f64, String> {
    let v: f64 = parse_num(s, field)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("field '{field}': value '{s}' is not finite"))
    }
}

fn expect_kw(tok: &[&str], idx: usize, kw: &str) -> Result<(), String> {
    match tok.get(idx) {
        Some(t) if *t == kw => Ok(()),
        Some(t) => Err(format!("expected keyword '{kw}', found '{t}'")),
        None => Err(format!("missing keyword '{kw}'")),
    }
}

fn parse_obs_tokens(tok: &[&str]) -> Result<BeaconObservation, String> {
    if tok.len() != 9 {
        return Err(format!("OBS expects 9 fields, found {}", tok.len()));
    }
    let id: u32 = parse_num(tok[2], "receiverId")?;
    let receiver = match tok[1] {
        "anchor" => NodeId::Anchor(AnchorId(id)),
        "target" => NodeId::Target(TargetId(id)),
        other => return Err(format!("field 'kind': expected anchor or target, found '{other}'")),
    };
    expect_kw(tok, 3, "src")?;
    expect_kw(tok, 5, "seq")?;
    expect_kw(tok, 7, "ts")?;
    Ok(BeaconObservation {
        receiver,
        source: AnchorId(parse_num(tok[4], "src")?),
        seqno: parse_num(tok[6], "seq")?,
        timestamp: parse_f64(tok[8], "ts")?,
    })
}

fn parse_fix_tokens(tok: &[&str]) -> Result<FixRecord, String> {
    expect_kw(tok, 1, "target")?;
    let target = TargetId(parse_num(tok.get(2).copied().unwrap_or(""), "target")?);
    expect_kw(tok, 3, "window")?;
    let window_start = parse_f64(tok.get(4).copied().unwrap_or(""), "window")?;
    expect_kw(tok, 5, "x")?;
    let x = parse_f64(tok.get(6).copied().unwrap_or(""), "x")?;
    expect_kw(tok, 7, "y")?;
    let y = parse_f64(tok.get(8).copied().unwrap_or(""), "y")?;
    let (z, has_z, next) = if tok.get(9) == Some(&"z") {
        (parse_f64(tok.get(10).copied().unwrap_or(""), "z")?, true, 11)
    } else {
        (0.0, false, 9)
    };
    expect_kw(tok, next, "anchors")?;
    let anchors = tok
        .get(next + 1)
        .ok_or("missing anchor list")?
        .split(',')
        .map(|a| parse_num(a, "anchors").map(AnchorId))
        .collect::<Result<BTreeSet<_>, _>>()?;
    expect_kw(tok, next + 2, "rms")?;
    let rms = parse_f64(tok.get(next + 3).copied().unwrap_or(""), "rms")?;
    if tok.len() != next + 4 {
        return Err(format!("FIX has {} trailing fields", tok.len() - next - 4));
    }
    Ok(FixRecord { target, window_start, position: Point::new(x, y, z), has_z, anchors, rms })
}

pub fn format_observation(o: &BeaconObservation) -> String {
    format!(
        "OBS {} {} src {} seq {} ts {:.9}",
        o.receiver.kind(),
        o.receiver.raw(),
        o.source,
        o.seqno,
        o.timestamp
    )
}

pub fn format_fix_record(r: &FixRecord) -> String {
    let mut s = format!(
        "FIX target {} window {:.9} x {} y {}",
        r.target, r.window_start, r.position.x, r.position.y
    );
    if r.has_z {
        let _ = write!(s, " z {}", r.position.z);
    }
    let anchors: Vec<String> = r.anchors.iter().map(|a| a.to_string()).collect();
    let _ = write!(s, " anchors {} rms {}", anchors.join(","), r.rms);
    s
}

pub fn format_fix(fix: &LocationFix, dim: Dimension) -> String {
    format_fix_record(&FixRecord::from_fix(fix, dim))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses an observation file. Blank lines and `#` comments are skipped;
/// any other line must be a well-formed `OBS` record.
pub fn parse_observations(text: &str) -> Result<Vec<BeaconObservation>> {
    content_lines(text)
        .map(|(line, l)| match WireMessage::parse(l) {
            Ok(WireMessage::Obs(o)) => Ok(o),
            Ok(_) => Err(Error::Parse { line, msg: "expected an OBS record".into() }),
            Err(msg) => Err(Error::Parse { line, msg }),
        })
        .collect()
}

pub fn write_observations(obs: &[BeaconObservation]) -> String {
    let mut out = String::with_capacity(obs.len() * 48);
    for o in obs {
        out.push_str(&format_observation(o));
        out.push('\n');
    }
    out
}

pub fn parse_fixes(text: &str) -> Result<Vec<FixRecord>> {
    content_lines(text)
        .map(|(line, l)| match WireMessage::parse(l) {
            Ok(WireMessage::Fix(f)) => Ok(f),
            Ok(_) => Err(Error::Parse { line, msg: "expected a FIX record".into() }),
            Err(msg) => Err(Error::Parse { line, msg }),
        })
        .collect()
}

pub fn write_fixes(fixes: &[FixRecord]) -> String {
    fixes.iter().map(|f| format_fix_record(f) + "\n").collect()
}

/// Ground-truth file:
///
/// ```text
/// SPEED <c>
/// DIM <2|3>
/// ANCHOR <id> x <m> y <m> z <m>
/// TARGET <id> label <label> x <m> y <m> z <m>
/// EMIT anchor <id> seq <n> t <seconds>
/// ```
pub fn write_truth(truth: &GroundTruth) -> String {
    let mut s = format!("SPEED {}\nDIM {}\n", truth.speed_of_sound, truth.dimension.count());
    for (id, p) in &truth.anchors {
        let _ = writeln!(s, "ANCHOR {id} x {} y {} z {}", p.x, p.y, p.z);
    }
    for t in &truth.targets {
        let _ = writeln!(
            s,
            "TARGET {} label {} x {} y {} z {}",
            t.id, t.label, t.position.x, t.position.y, t.position.z
        );
    }
    for e in &truth.emissions {
        let _ = writeln!(s, "EMIT anchor {} seq {} t {}", e.anchor, e.seqno, e.time);
    }
    s
}

pub fn parse_truth(text: &str) -> Result<GroundTruth> {
    let mut truth = GroundTruth {
        speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        dimension: Dimension::Two,
        anchors: BTreeMap::new(),
        targets: Vec::new(),
        emissions: Vec::new(),
    };
    for (line, l) in content_lines(text) {
        let tok: Vec<&str> = l.split_whitespace().collect();
        let err = |msg: String| Error::Parse { line, msg };
        let xyz = |at: usize| -> Result<Point, String> {
            expect_kw(&tok, at, "x")?;
            expect_kw(&tok, at + 2, "y")?;
            expect_kw(&tok, at + 4, "z")?;
            if tok.len() != at + 6 {
                return Err("wrong number of fields".into());
            }
            Ok(Point::new(
                parse_f64(tok[at + 1], "x")?,
                parse_f64(tok[at + 3], "y")?,
                parse_f64(tok[at + 5], "z")?,
            ))
        };
        match tok[0] {
            "SPEED" if tok.len() == 2 => truth.speed_of_sound = parse_f64(tok[1], "speed").map_err(err)?,
            "DIM" if tok.len() == 2 => {
                let d: u8 = parse_num(tok[1], "dim").map_err(err)?;
                truth.dimension = Dimension::try_from(d).map_err(err)?;
            }
            "ANCHOR" if tok.len() >= 2 => {
                let id = AnchorId(parse_num(tok[1], "anchor").map_err(err)?);
                truth.anchors.insert(id, xyz(2).map_err(err)?);
            }
            "TARGET" if tok.len() >= 4 => {
                let id = TargetId(parse_num(tok[1], "target").map_err(err)?);
                expect_kw(&tok, 2, "label").map_err(err)?;
                let position = xyz(4).map_err(err)?;
                truth.targets.push(TargetTruth { id, label: tok[3].to_string(), position });
            }
            "EMIT" if tok.len() == 7 => {
                expect_kw(&tok, 1, "anchor").map_err(err)?;
                expect_kw(&tok, 3, "seq").map_err(err)?;
                expect_kw(&tok, 5, "t").map_err(err)?;
                truth.emissions.push(Emission {
                    anchor: AnchorId(parse_num(tok[2], "anchor").map_err(err)?),
                    seqno: parse_num(tok[4], "seq").map_err(err)?,
                    time: parse_f64(tok[6], "t").map_err(err)?,
                });
            }
            other => return Err(err(format!("unrecognized truth record '{other}'"))),
        }
    }
    Ok(truth)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorFile {
    id: u32,
    x: f64,
    y: f64,
    #[serde(default)]
    z: f64,
    #[serde(default)]
    sep: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    min: Vec<f64>,
    max: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    ranging_err_thr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ddoa_err_thr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_anchors_req: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pairing_mode: Option<PairingMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outlier_removal: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gn_max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gn_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestbedFile {
    #[serde(default = "default_speed")]
    speed_of_sound: f64,
    #[serde(default = "default_dimension")]
    dimension: Dimension,
    bounds: BoundsFile,
    anchors: Vec<AnchorFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solver: Option<SolverFile>,
}

fn default_speed() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

fn default_dimension() -> Dimension {
    Dimension::Two
}

fn bound_point(v: &[f64], what: &str) -> Result<Point> {
    match v {
        [x, y] => Ok(Point::new(*x, *y, 0.0)),
        [x, y, z] => Ok(Point::new(*x, *y, *z)),
        _ => Err(Error::InvalidConfig(format!("bounds.{what} needs 2 or 3 values"))),
    }
}

impl TestbedFile {
    fn into_domain(self) -> Result<(TestbedConfig, SolverParams)> {
        let min = bound_point(&self.bounds.min, "min")?;
        let max = bound_point(&self.bounds.max, "max")?;
        if self.dimension == Dimension::Three && (self.bounds.min.len() != 3 || self.bounds.max.len() != 3) {
            return Err(Error::InvalidConfig("3D testbeds need 3-value bounds".into()));
        }
        let anchors = self
            .anchors
            .iter()
            .map(|a| AnchorConfig {
                id: AnchorId(a.id),
                position: Point::new(a.x, a.y, a.z),
                mic_speaker_separation: a.sep,
            })
            .collect();
        let tb = TestbedConfig::new(anchors, Bounds::new(min, max), self.speed_of_sound, self.dimension)?;
        let s = self.solver.unwrap_or_default();
        let base = SolverParams::for_dimension(self.dimension);
        let params = SolverParams {
            ranging_err_thr: s.ranging_err_thr.unwrap_or(base.ranging_err_thr),
            ddoa_err_thr: s.ddoa_err_thr.unwrap_or(base.ddoa_err_thr),
            num_anchors_req: s.num_anchors_req.unwrap_or(base.num_anchors_req),
            pairing_mode: s.pairing_mode.unwrap_or(base.pairing_mode),
            outlier_removal: s.outlier_removal.unwrap_or(base.outlier_removal),
            gn_max_iters: s.gn_max_iters.unwrap_or(base.gn_max_iters),
            gn_tolerance: s.gn_tolerance.unwrap_or(base.gn_tolerance),
        };
        params.validate()?;
        Ok((tb, params))
    }

    fn from_domain(tb: &TestbedConfig, params: Option<&SolverParams>) -> Self {
        // 2D testbeds with a degenerate z range round-trip through the short form.
        let n = if tb.dimension == Dimension::Two && tb.bounds.min.z == 0.0 && tb.bounds.max.z == 0.0 {
            2
        } else {
            3
        };
        TestbedFile {
            speed_of_sound: tb.speed_of_sound,
            dimension: tb.dimension,
            bounds: BoundsFile {
                min: tb.bounds.min.iter().take(n).copied().collect(),
                max: tb.bounds.max.iter().take(n).copied().collect(),
            },
            anchors: tb
                .anchors
                .iter()
                .map(|a| AnchorFile {
                    id: a.id.0,
                    x: a.position.x,
                    y: a.position.y,
                    z: a.position.z,
                    sep: a.mic_speaker_separation,
                })
                .collect(),
            solver: params.map(|p| SolverFile {
                ranging_err_thr: Some(p.ranging_err_thr),
                ddoa_err_thr: Some(p.ddoa_err_thr),
                num_anchors_req: Some(p.num_anchors_req),
                pairing_mode: Some(p.pairing_mode),
                outlier_removal: Some(p.outlier_removal),
                gn_max_iters: Some(p.gn_max_iters),
                gn_tolerance: Some(p.gn_tolerance),
            }),
        }
    }
}

/// Parses a testbed TOML file; the optional `[solver]` table overrides the
/// dimension's default solver parameters.
pub fn parse_config(text: &str) -> Result<(TestbedConfig, SolverParams)> {
    toml::from_str::<TestbedFile>(text)?.into_domain()
}

pub fn load_config(path: &Path) -> Result<(TestbedConfig, SolverParams)> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn write_config(tb: &TestbedConfig, params: Option<&SolverParams>) -> String {
    toml::to_string(&TestbedFile::from_domain(tb, params)).expect("testbed serializes")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetFile {
    label: String,
    x: f64,
    y: f64,
    #[serde(default)]
    z: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeFile {
    Tdma,
    RandomBackoff,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    #[serde(default = "one")]
    slot_length: f64,
    #[serde(default = "beacon_len")]
    beacon_duration: f64,
    #[serde(default = "tdma")]
    mode: ModeFile,
    #[serde(default)]
    backoff_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slots_per_round: Option<usize>,
}

fn one() -> f64 {
    1.0
}
fn beacon_len() -> f64 {
    0.44
}
fn tdma() -> ModeFile {
    ModeFile::Tdma
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkBiasFile {
    src: u32,
    receiver: NodeId,
    bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClockFile {
    node: NodeId,
    offset: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseFile {
    #[serde(default)]
    jitter_sigma: f64,
    #[serde(default)]
    miss_detect_prob: f64,
    #[serde(default)]
    resolution: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    nlos: Vec<LinkBiasFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    clock_offset: Vec<ClockFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    seed: u64,
    duration: f64,
    testbed: TestbedFile,
    targets: Vec<TargetFile>,
    schedule: Option<ScheduleFile>,
    #[serde(default)]
    noise: NoiseFile,
}

pub fn parse_scenario(text: &str) -> Result<SimScenario> {
    let f: ScenarioFile = toml::from_str(text)?;
    let (testbed, _) = f.testbed.into_domain()?;
    let schedule = f
        .schedule
        .map(|s| ScheduleConfig {
            slot_length: s.slot_length,
            beacon_duration: s.beacon_duration,
            mode: match s.mode {
                ModeFile::Tdma => ScheduleMode::Tdma,
                ModeFile::RandomBackoff => ScheduleMode::RandomBackoff,
            },
            backoff_max: s.backoff_max,
            slots_per_round: s.slots_per_round,
        })
        .unwrap_or_default();
    let noise = NoiseModel {
        timestamp_jitter_sigma: f.noise.jitter_sigma,
        miss_detect_prob: f.noise.miss_detect_prob,
        timestamp_resolution: f.noise.resolution,
        nlos_bias: f.noise.nlos.iter().map(|l| ((AnchorId(l.src), l.receiver), l.bias)).collect(),
        clock_offset: f.noise.clock_offset.iter().map(|c| (c.node, c.offset)).collect(),
    };
    let scenario = SimScenario {
        testbed,
        targets: f
            .targets
            .into_iter()
            .map(|t| TargetSpec { label: t.label, position: Point::new(t.x, t.y, t.z) })
            .collect(),
        schedule,
        noise,
        seed: f.seed,
        duration: f.duration,
    };
    scenario.validate()?;
    Ok(scenario)
}

pub fn write_scenario(s: &SimScenario) -> String {
    let f = ScenarioFile {
        seed: s.seed,
        duration: s.duration,
        testbed: TestbedFile::from_domain(&s.testbed, None),
        targets: s
            .targets
            .iter()
            .map(|t| TargetFile { label: t.label.clone(), x: t.position.x, y: t.position.y, z: t.position.z })
            .collect(),
        schedule: Some(ScheduleFile {
            slot_length: s.schedule.slot_length,
            beacon_duration: s.schedule.beacon_duration,
            mode: match s.schedule.mode {
                ScheduleMode::Tdma => ModeFile::Tdma,
                ScheduleMode::RandomBackoff => ModeFile::RandomBackoff,
            },
            backoff_max: s.schedule.backoff_max,
            slots_per_round: s.schedule.slots_per_round,
        }),
        noise: NoiseFile {
            jitter_sigma: s.noise.timestamp_jitter_sigma,
            miss_detect_prob: s.noise.miss_detect_prob,
            resolution: s.noise.timestamp_resolution,
            nlos: s
                .noise
                .nlos_bias
                .iter()
                .map(|((src, rx), b)| LinkBiasFile { src: src.0, receiver: *rx, bias: *b })
                .collect(),
            clock_offset: s.noise.clock_offset.iter().map(|(n, o)| ClockFile { node: *n, offset: *o }).collect(),
        },
    };
    toml::to_string(&f).expect("scenario serializes")
}
