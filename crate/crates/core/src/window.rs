//! Timing windows, Δskew, and TSI/FSI classification of coupling pairs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabelError, OracleError};
use crate::layout::{CouplingPair, Design, NetId, SegmentId};
use crate::oracle::{driver_timing, Alignment, CoupledRun, DriverTiming};

/// Default |delta| above which an oracle-labeled pair is TSI (ps).
pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Arrival interval at a net's driver output (ps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingWindow {
    pub early: f64,
    pub late: f64,
}

impl TimingWindow {
    pub fn new(early: f64, late: f64) -> Self {
        assert!(early <= late, "window [{early}, {late}] is inverted");
        Self { early, late }
    }

    pub fn width(&self) -> f64 {
        self.late - self.early
    }
}

/// `victim_at − aggressor_at`.
pub fn delta_skew(victim_at: f64, aggressor_at: f64) -> f64 {
    victim_at - aggressor_at
}

fn window_from(t: &DriverTiming) -> TimingWindow {
    TimingWindow::new(t.at_out, t.at_out + t.s_out.max(0.0))
}

/// `[at_out, at_out + s_out]` from the driver table, with every coupling
/// capacitor in `pairs` loading the driver. Clamped lookups are logged.
pub fn window_of(design: &Design, net: NetId, pairs: &[CouplingPair]) -> TimingWindow {
    let t = driver_timing(design, design.net(net), pairs);
    if t.clamped {
        log::warn!("net {net}: driver lookup outside table range (load {:.3} fF), clamped", t.load);
    }
    window_from(&t)
}

/// Window of every net, keyed by id.
pub fn all_windows(design: &Design, pairs: &[CouplingPair]) -> BTreeMap<NetId, TimingWindow> {
    timings(design, pairs)
        .iter()
        .map(|(&id, t)| (id, window_from(t)))
        .collect()
}

pub(crate) fn timings(design: &Design, pairs: &[CouplingPair]) -> BTreeMap<NetId, DriverTiming> {
    let mut timings = BTreeMap::new();
    for n in design.nets() {
        let t = driver_timing(design, n, pairs);
        if t.clamped {
            log::warn!("net {}: driver lookup outside table range (load {:.3} fF), clamped", n.id, t.load);
        }
        timings.insert(n.id, t);
    }
    timings
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairClass {
    /// The aggressor's switching matters to the victim.
    #[serde(rename = "TSI")]
    Tsi,
    #[serde(rename = "FSI")]
    Fsi,
}

impl fmt::Display for PairClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairClass::Tsi => "TSI",
            PairClass::Fsi => "FSI",
        })
    }
}

/// TSI iff the victim window widened by `guard` on both sides meets the
/// aggressor window.
pub fn classify_pair(victim: TimingWindow, aggressor: TimingWindow, guard: f64) -> PairClass {
    assert!(guard >= 0.0, "guard must be >= 0");
    let lo = (victim.early - guard).max(aggressor.early);
    let hi = (victim.late + guard).min(aggressor.late);
    if lo <= hi {
        PairClass::Tsi
    } else {
        PairClass::Fsi
    }
}

/// One directed coupling pair with its skew and class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairLabel {
    pub pair: CouplingPair,
    /// Victim minus aggressor driver-output arrival (ps).
    pub dskew: f64,
    pub classification: PairClass,
    /// Victim delay change from the two-net oracle run (ps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_delta: Option<f64>,
}

/// Both orientations of every pair, sorted by (victim, aggressor) segment.
pub fn directed_pairs(pairs: &[CouplingPair]) -> Vec<CouplingPair> {
    let mut out: Vec<CouplingPair> = pairs.iter().flat_map(|p| [*p, p.reversed()]).collect();
    out.sort_by_key(|p| (p.victim_segment_id, p.aggressor_segment_id));
    out.dedup_by_key(|p| (p.victim_segment_id, p.aggressor_segment_id));
    out
}

fn pair_skew(design: &Design, t: &BTreeMap<NetId, DriverTiming>, p: &CouplingPair) -> f64 {
    let v = design.segment(p.victim_segment_id).net_id;
    let a = design.segment(p.aggressor_segment_id).net_id;
    delta_skew(t[&v].at_out, t[&a].at_out)
}

/// Labels every directed pair by timing-window overlap alone.
pub fn window_labels(design: &Design, pairs: &[CouplingPair], guard: f64) -> Vec<PairLabel> {
    let t = timings(design, pairs);
    directed_pairs(pairs)
        .into_iter()
        .map(|p| {
            let v = design.segment(p.victim_segment_id).net_id;
            let a = design.segment(p.aggressor_segment_id).net_id;
            PairLabel {
                pair: p,
                dskew: pair_skew(design, &t, &p),
                classification: classify_pair(window_from(&t[&v]), window_from(&t[&a]), guard),
                oracle_delta: None,
            }
        })
        .collect()
}

/// Labels every directed pair from per-pair oracle deltas keyed by
/// (victim segment, aggressor segment): TSI iff |delta| > `threshold`.
pub fn label_dataset(
    design: &Design,
    pairs: &[CouplingPair],
    oracle: &HashMap<(SegmentId, SegmentId), f64>,
    threshold: f64,
) -> Result<Vec<PairLabel>, LabelError> {
    if threshold <= 0.0 {
        log::warn!("label threshold {threshold} ps: every nonzero delta counts as TSI");
    }
    let t = timings(design, pairs);
    directed_pairs(pairs)
        .into_iter()
        .map(|p| {
            let key = (p.victim_segment_id, p.aggressor_segment_id);
            let delta = *oracle.get(&key).ok_or(LabelError::MissingOracle {
                victim: key.0,
                aggressor: key.1,
            })?;
            Ok(PairLabel {
                pair: p,
                dskew: pair_skew(design, &t, &p),
                classification: if delta.abs() > threshold {
                    PairClass::Tsi
                } else {
                    PairClass::Fsi
                },
                oracle_delta: Some(delta),
            })
        })
        .collect()
}

/// Oracle settings for labeling a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    /// Extraction distance; the design default when absent (µm).
    pub w_max: Option<f64>,
    pub segments_per_wire: usize,
    /// Fixed step override (ps).
    pub dt: Option<f64>,
    pub threshold: f64,
    /// Also simulate every coupled net with all its neighbors switching.
    pub golden: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            w_max: None,
            segments_per_wire: 8,
            dt: None,
            threshold: DEFAULT_THRESHOLD,
            golden: true,
        }
    }
}

/// Quiet delay of one segment: the 50% crossing at its end minus the one at
/// its start, with every neighbor held (ps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentDelay {
    pub segment_id: SegmentId,
    pub net_id: NetId,
    pub tau_nosi: f64,
}

/// Per-net oracle results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetOracle {
    pub net_id: NetId,
    /// Table driver delay (ps).
    pub d_driver: f64,
    /// Driver output to sink, neighbors quiet (ps).
    pub d_net_nosi: f64,
    /// Driver output to sink with every coupled neighbor switching in the
    /// opposite direction at its own arrival (ps). Absent unless requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_net_golden: Option<f64>,
}

/// Everything the oracle produces for one design besides the pair labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSummary {
    pub design: String,
    pub w_max: f64,
    pub segments_per_wire: usize,
    pub threshold: f64,
    pub segments: Vec<SegmentDelay>,
    pub nets: Vec<NetOracle>,
}

impl OracleSummary {
    pub fn tau_nosi(&self) -> HashMap<SegmentId, f64> {
        self.segments.iter().map(|s| (s.segment_id, s.tau_nosi)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLabels {
    pub pairs: Vec<CouplingPair>,
    pub labels: Vec<PairLabel>,
    pub summary: OracleSummary,
}

/// Runs the oracle over a whole design.
///
/// Each pair is simulated with its two nets only: the pair's capacitor
/// floats, every other capacitor on those nets is grounded, and each
/// victim sees its aggressor switch the opposite way at the aggressor's
/// own arrival. Both orientations come from one run.
pub fn oracle_label_design(design: &Design, cfg: &LabelConfig) -> Result<OracleLabels, LabelError> {
    let w_max = cfg.w_max.unwrap_or_else(|| design.default_w_max());
    let pairs = crate::layout::extract_coupling_pairs(design, w_max);
    let net_of = |s: SegmentId| design.segment(s).net_id;
    let mut by_net: HashMap<NetId, Vec<usize>> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_net.entry(net_of(p.victim_segment_id)).or_default().push(i);
        let a = net_of(p.aggressor_segment_id);
        if a != net_of(p.victim_segment_id) {
            by_net.entry(a).or_default().push(i);
        }
    }
    let touching = |nets: &[NetId]| -> Vec<usize> {
        let mut ix: Vec<usize> = nets
            .iter()
            .flat_map(|n| by_net.get(n).into_iter().flatten().copied())
            .collect();
        ix.sort_unstable();
        ix.dedup();
        ix
    };
    let spw = cfg.segments_per_wire;

    let deltas: Vec<[(SegmentId, SegmentId, f64); 2]> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<_, OracleError> {
            let (a, b) = (net_of(p.victim_segment_id), net_of(p.aggressor_segment_id));
            let grounded: Vec<CouplingPair> = touching(&[a, b])
                .into_iter()
                .filter(|&j| j != i)
                .map(|j| pairs[j])
                .collect();
            let run = CoupledRun::new(design, &[a, b], &[*p], &grounded, spw, cfg.dt)?;
            let fwd = run.delays(0, &[1], Alignment::Opposite)?.delta;
            let rev = run.delays(1, &[0], Alignment::Opposite)?.delta;
            Ok([
                (p.victim_segment_id, p.aggressor_segment_id, fwd),
                (p.aggressor_segment_id, p.victim_segment_id, rev),
            ])
        })
        .collect::<Result<_, _>>()?;
    let oracle: HashMap<(SegmentId, SegmentId), f64> = deltas
        .iter()
        .flatten()
        .map(|&(v, a, d)| ((v, a), d))
        .collect();
    let labels = label_dataset(design, &pairs, &oracle, cfg.threshold)?;

    let timing = timings(design, &pairs);
    let per_net: Vec<(Vec<SegmentDelay>, NetOracle)> = design
        .nets()
        .par_iter()
        .map(|net| -> Result<_, OracleError> {
            let mine: Vec<CouplingPair> = touching(&[net.id]).into_iter().map(|j| pairs[j]).collect();
            let quiet = CoupledRun::new(design, &[net.id], &[], &mine, spw, cfg.dt)?;
            let t = quiet.victim_crossings(0, &[], Alignment::Opposite)?;
            let segs = net
                .segments
                .iter()
                .zip(t.windows(2))
                .map(|(&s, w)| SegmentDelay {
                    segment_id: s,
                    net_id: net.id,
                    tau_nosi: w[1] - w[0],
                })
                .collect();
            let d_net_nosi = t[t.len() - 1] - t[0];
            let d_net_golden = if !cfg.golden {
                None
            } else if mine.is_empty() {
                Some(d_net_nosi)
            } else {
                let mut nets: Vec<NetId> = mine
                    .iter()
                    .flat_map(|p| [net_of(p.victim_segment_id), net_of(p.aggressor_segment_id)])
                    .filter(|&n| n != net.id)
                    .collect();
                nets.sort_unstable();
                nets.dedup();
                nets.insert(0, net.id);
                let (floating, grounded): (Vec<CouplingPair>, Vec<CouplingPair>) = touching(&nets)
                    .into_iter()
                    .map(|j| pairs[j])
                    .partition(|p| {
                        nets.contains(&net_of(p.victim_segment_id)) && nets.contains(&net_of(p.aggressor_segment_id))
                    });
                let run = CoupledRun::new(design, &nets, &floating, &grounded, spw, cfg.dt)?;
                let all: Vec<usize> = (1..nets.len()).collect();
                Some(run.delays(0, &all, Alignment::Opposite)?.d_si)
            };
            Ok((
                segs,
                NetOracle {
                    net_id: net.id,
                    d_driver: timing[&net.id].d_driver,
                    d_net_nosi,
                    d_net_golden,
                },
            ))
        })
        .collect::<Result<_, _>>()?;
    let mut segments = Vec::new();
    let mut nets = Vec::new();
    for (s, n) in per_net {
        segments.extend(s);
        nets.push(n);
    }
    segments.sort_by_key(|s| s.segment_id);
    nets.sort_by_key(|n| n.net_id);
    Ok(OracleLabels {
        pairs,
        labels,
        summary: OracleSummary {
            design: design.name().to_string(),
            w_max,
            segments_per_wire: spw,
            threshold: cfg.threshold,
            segments,
            nets,
        },
    })
}

pub fn save_labels(labels: &[PairLabel], path: impl AsRef<Path>) -> std::io::Result<()> {
    write_json(labels, path)
}

pub fn load_labels(path: impl AsRef<Path>) -> std::io::Result<Vec<PairLabel>> {
    read_json(path)
}

pub fn save_summary(summary: &OracleSummary, path: impl AsRef<Path>) -> std::io::Result<()> {
    write_json(summary, path)
}

pub fn load_summary(path: impl AsRef<Path>) -> std::io::Result<OracleSummary> {
    read_json(path)
}

/// Sidecar path holding the [`OracleSummary`] for a label file.
pub fn summary_path(labels: &Path) -> std::path::PathBuf {
    let stem = labels.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    labels.with_file_name(format!("{stem}.oracle.json"))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(v: &T, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(std::io::Error::other)?;
    s.push('\n');
    std::fs::write(path, s)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> std::io::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(a: f64, b: f64) -> TimingWindow {
        TimingWindow::new(a, b)
    }

    #[test]
    fn skew_examples() {
        assert_eq!(delta_skew(100.0, 100.0), 0.0);
        assert_eq!(delta_skew(100.0, 40.0), 60.0);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_pair(w(100.0, 140.0), w(120.0, 160.0), 0.0), PairClass::Tsi);
        assert_eq!(classify_pair(w(100.0, 140.0), w(200.0, 240.0), 0.0), PairClass::Fsi);
        assert_eq!(classify_pair(w(100.0, 140.0), w(150.0, 160.0), 10.0), PairClass::Tsi);
        assert_eq!(classify_pair(w(100.0, 140.0), w(150.0, 160.0), 9.9), PairClass::Fsi);
    }

    #[test]
    fn point_windows_touching() {
        assert_eq!(classify_pair(w(5.0, 5.0), w(5.0, 5.0), 0.0), PairClass::Tsi);
    }

    #[test]
    fn class_serializes_as_tag() {
        assert_eq!(serde_json::to_string(&PairClass::Tsi).unwrap(), "\"TSI\"");
        assert_eq!(serde_json::from_str::<PairClass>("\"FSI\"").unwrap(), PairClass::Fsi);
    }
}
