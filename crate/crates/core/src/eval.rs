//! Error statistics, bias, and anchor-subset ablation.
//!
//! Errors are measured in the horizontal plane (x, y) only. Percentiles use
//! the nearest-rank rule: the q-quantile of n sorted values is the
//! `ceil(q * n)`-th one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::io::FixRecord;
use crate::model::{AnchorId, LocationFix, Point, SolverParams, TestbedConfig};
use crate::sim::GroundTruth;
use crate::trilateration::locate;
use crate::window::ObservationWindow;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSummary {
    pub per_fix_errors: Vec<f64>,
    pub mean: f64,
    pub q95: f64,
    /// `(error, fraction of fixes with error <= it)`, one point per distinct
    /// error value, ending at 1.0.
    pub cdf: Vec<(f64, f64)>,
}

/// Nearest-rank quantile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn summarize_errors(errors: Vec<f64>) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::Eval("no fixes to summarize".into()));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite()) {
        return Err(Error::Eval(format!("non-finite error {e}")));
    }
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (k, &e) in sorted.iter().enumerate() {
        let frac = (k + 1) as f64 / n as f64;
        match cdf.last_mut() {
            Some(last) if last.0 == e => last.1 = frac,
            _ => cdf.push((e, frac)),
        }
    }
    Ok(ErrorSummary { per_fix_errors: errors, mean, q95: nearest_rank(&sorted, 0.95), cdf })
}

fn horizontal_error(a: &Point, b: &Point) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Per-fix 2D errors against the simulated target positions.
pub fn compute_error_summary(fixes: &[FixRecord], truth: &GroundTruth) -> Result<ErrorSummary> {
    let errors = fixes
        .iter()
        .map(|f| {
            truth
                .target(f.target)
                .map(|t| horizontal_error(&f.position, &t.position))
                .ok_or_else(|| Error::Eval(format!("no ground truth for target {}", f.target)))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_errors(errors)
}

/// Plain-text summary followed by the CDF table.
pub fn format_summary(s: &ErrorSummary) -> String {
    let mut out = String::from("# 2D errors in meters; q95 by nearest rank\n");
    let _ = writeln!(out, "fixes {}", s.per_fix_errors.len());
    let _ = writeln!(out, "mean {}", s.mean);
    let _ = writeln!(out, "q95 {}", s.q95);
    out.push_str("# cdf: error fraction\n");
    for (e, f) in &s.cdf {
        let _ = writeln!(out, "{e} {f}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationBias {
    /// Centroid of the estimates minus the true position (z is zero).
    pub vector: Point,
    pub magnitude: f64,
    pub fixes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub per_location: BTreeMap<String, LocationBias>,
    pub average_bias: f64,
}

pub fn compute_bias(
    fixes_by_location: &BTreeMap<String, Vec<Point>>,
    truth: &BTreeMap<String, Point>,
) -> Result<BiasReport> {
    if fixes_by_location.is_empty() {
        return Err(Error::Eval("no locations to compute bias for".into()));
    }
    let mut per_location = BTreeMap::new();
    for (label, est) in fixes_by_location {
        let t = truth
            .get(label)
            .ok_or_else(|| Error::Eval(format!("no ground truth for location '{label}'")))?;
        if est.is_empty() {
            return Err(Error::Eval(format!("location '{label}' has no fixes")));
        }
        let n = est.len() as f64;
        let cx = est.iter().map(|p| p.x).sum::<f64>() / n;
        let cy = est.iter().map(|p| p.y).sum::<f64>() / n;
        let vector = Point::new(cx - t.x, cy - t.y, 0.0);
        per_location.insert(
            label.clone(),
            LocationBias { magnitude: vector.x.hypot(vector.y), vector, fixes: est.len() },
        );
    }
    let average_bias =
        per_location.values().map(|b: &LocationBias| b.magnitude).sum::<f64>() / per_location.len() as f64;
    Ok(BiasReport { per_location, average_bias })
}

/// Groups fixes by their target's label and computes the bias report.
pub fn bias_from_truth(fixes: &[FixRecord], truth: &GroundTruth) -> Result<BiasReport> {
    let mut by_label: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for f in fixes {
        let t = truth
            .target(f.target)
            .ok_or_else(|| Error::Eval(format!("no ground truth for target {}", f.target)))?;
        by_label.entry(t.label.clone()).or_default().push(f.position);
    }
    let positions = truth.targets.iter().map(|t| (t.label.clone(), t.position)).collect();
    compute_bias(&by_label, &positions)
}

pub fn format_bias(b: &BiasReport) -> String {
    let mut out = String::from("# bias: label dx dy magnitude fixes\n");
    for (label, l) in &b.per_location {
        let _ = writeln!(out, "{label} {} {} {} {}", l.vector.x, l.vector.y, l.magnitude, l.fixes);
    }
    let _ = writeln!(out, "average_bias {}", b.average_bias);
    out
}

/// Runs [`locate`] on every window, in parallel, keeping window order.
pub fn locate_all(windows: &[ObservationWindow], config: &TestbedConfig, params: &SolverParams) -> Vec<LocationFix> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(windows.len().max(1));
    let chunk = windows.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = windows
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().filter_map(|w| locate(w, config, params)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("locate worker panicked")).collect()
    })
}

/// Anchor subsets used for the default ablation, smallest first.
pub fn default_ablation_subsets() -> Vec<BTreeSet<AnchorId>> {
    [&[2, 4, 6, 8][..], &[1, 2, 4, 6, 8], &[1, 2, 3, 4, 6, 8], &[1, 2, 3, 4, 5, 6, 8], &[1, 2, 3, 4, 5, 6, 7, 8]]
        .iter()
        .map(|ids| ids.iter().map(|&i| AnchorId(i)).collect())
        .collect()
}

/// One subset per line as comma- or space-separated anchor ids.
pub fn parse_subsets(text: &str) -> Result<Vec<BTreeSet<AnchorId>>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let set = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map(AnchorId).map_err(|_| Error::Parse {
                    line: n + 1,
                    msg: format!("field 'anchor': cannot parse '{s}'"),
                })
            })
            .collect::<Result<BTreeSet<_>>>()?;
        out.push(set);
    }
    Ok(out)
}

pub fn subset_label(set: &BTreeSet<AnchorId>) -> String {
    let ids: Vec<String> = set.iter().map(|a| a.to_string()).collect();
    ids.join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub anchors: BTreeSet<AnchorId>,
    pub label: String,
    pub windows: usize,
    pub fixes: Vec<LocationFix>,
    pub summary: ErrorSummary,
}

/// For each subset, drops the other anchors' beacons from every window,
/// re-locates, and summarizes against `truth`.
pub fn run_ablation(
    windows: &[ObservationWindow],
    config: &TestbedConfig,
    params: &SolverParams,
    subsets: &[BTreeSet<AnchorId>],
    truth: &GroundTruth,
) -> Result<Vec<AblationRow>> {
    let all: BTreeSet<AnchorId> = config.anchor_ids().collect();
    let mut rows = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let label = subset_label(subset);
        if subset.len() < params.num_anchors_req {
            return Err(Error::Eval(format!(
                "subset {{{label}}} has {} anchors, solver needs {}",
                subset.len(),
                params.num_anchors_req
            )));
        }
        let restricted = config.restricted_to(subset)?;
        let removed: BTreeSet<AnchorId> = all.difference(subset).copied().collect();
        let filtered: Vec<ObservationWindow> = windows.iter().map(|w| w.without_anchors(&removed)).collect();
        let fixes = locate_all(&filtered, &restricted, params);
        let records: Vec<FixRecord> = fixes.iter().map(|f| FixRecord::from_fix(f, config.dimension)).collect();
        let summary = compute_error_summary(&records, truth)
            .map_err(|e| Error::Eval(format!("subset {{{label}}}: {e}")))?;
        rows.push(AblationRow { anchors: subset.clone(), label, windows: windows.len(), fixes, summary });
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("# anchors count windows fixes mean_m q95_m (nearest rank)\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            r.label,
            r.anchors.len(),
            r.windows,
            r.fixes.len(),
            r.summary.mean,
            r.summary.q95
        );
    }
    out
}
