//! Per-segment feature vectors, labeled samples, and dataset handling.
//!
//! Every feature comes from the layout and the driver tables; oracle results
//! only ever enter as labels.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::layout::{coupling_capacitance, CouplingPair, Design, NetId, SegmentId};
use crate::oracle::DriverTiming;
use crate::window::{directed_pairs, timings, OracleSummary, PairClass, PairLabel};

pub const FEATURE_COUNT: usize = 12;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "dskew", "rf", "s_in", "s_out", "d_driver", "m_w", "m_t", "m_h", "m_eps0", "wire_len", "l_si",
    "w_si",
];

pub const CSV_HEADER: [&str; FEATURE_COUNT + 3] = [
    "dskew",
    "rf",
    "s_in",
    "s_out",
    "d_driver",
    "m_w",
    "m_t",
    "m_h",
    "m_eps0",
    "wire_len",
    "l_si",
    "w_si",
    "label_class",
    "label_delta",
    "label_tau_nosi",
];

/// Δskew of an uncoupled segment (ps).
pub const DSKEW_MAX: f64 = 1e4;

/// Spacing of an uncoupled segment for a given extraction distance (µm).
pub fn w_sentinel(w_max: f64) -> f64 {
    10.0 * w_max
}

/// Features that drive the quiet segment delay, as column indices. Overlap
/// length and spacing are in because the quiet delay still sees the
/// coupling capacitance, grounded.
pub const NOSI_FEATURES: [usize; 10] = [4, 2, 3, 9, 5, 6, 7, 8, 10, 11];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Victim minus aggressor driver-output arrival (ps).
    pub dskew: f64,
    /// +1 for a rising victim input, −1 for falling.
    pub rf: f64,
    pub s_in: f64,
    /// Table output slew (ps).
    pub s_out: f64,
    /// Table driver delay (ps).
    pub d_driver: f64,
    pub m_w: f64,
    pub m_t: f64,
    pub m_h: f64,
    pub m_eps0: f64,
    /// Segment length (µm).
    pub wire_len: f64,
    pub l_si: f64,
    pub w_si: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.dskew,
            self.rf,
            self.s_in,
            self.s_out,
            self.d_driver,
            self.m_w,
            self.m_t,
            self.m_h,
            self.m_eps0,
            self.wire_len,
            self.l_si,
            self.w_si,
        ]
    }

    pub fn from_array(a: [f64; FEATURE_COUNT]) -> Self {
        Self {
            dskew: a[0],
            rf: a[1],
            s_in: a[2],
            s_out: a[3],
            d_driver: a[4],
            m_w: a[5],
            m_t: a[6],
            m_h: a[7],
            m_eps0: a[8],
            wire_len: a[9],
            l_si: a[10],
            w_si: a[11],
        }
    }

    pub fn is_coupled(&self) -> bool {
        self.l_si > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelClass {
    #[serde(rename = "TSI")]
    Tsi,
    #[serde(rename = "FSI")]
    Fsi,
    /// No coupling pair at all.
    #[serde(rename = "NONE")]
    None,
}

impl LabelClass {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelClass::Tsi => "TSI",
            LabelClass::Fsi => "FSI",
            LabelClass::None => "NONE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "TSI" => Some(LabelClass::Tsi),
            "FSI" => Some(LabelClass::Fsi),
            "NONE" => Some(LabelClass::None),
            _ => None,
        }
    }
}

impl From<PairClass> for LabelClass {
    fn from(c: PairClass) -> Self {
        match c {
            PairClass::Tsi => LabelClass::Tsi,
            PairClass::Fsi => LabelClass::Fsi,
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class: LabelClass,
    /// Delay change from the strongest aggressor; zero unless TSI (ps).
    pub delta: f64,
    /// Quiet segment delay (ps).
    pub tau_nosi: f64,
}

/// Where a sample came from. Samples read back from a dataset file only
/// know their file.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Trace {
    pub design: String,
    pub net_id: NetId,
    pub segment_id: SegmentId,
    pub aggressor_segment_id: Option<SegmentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    pub label: Option<Label>,
    pub trace: Trace,
}

impl Sample {
    pub fn class(&self) -> Option<LabelClass> {
        self.label.map(|l| l.class)
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.trace.cmp(&other.trace).then_with(|| {
            let (a, b) = (self.features.to_array(), other.features.to_array());
            a.iter()
                .zip(&b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
                .then_with(|| label_key(self.label).cmp(&label_key(other.label)))
        })
    }
}

fn label_key(l: Option<Label>) -> (Option<LabelClass>, u64, u64) {
    match l {
        Some(l) => (Some(l.class), l.delta.to_bits(), l.tau_nosi.to_bits()),
        None => (None, 0, 0),
    }
}

/// Table timing and pair geometry needed to build features for one design.
pub struct FeatureContext<'a> {
    design: &'a Design,
    timing: BTreeMap<NetId, DriverTiming>,
    w_max: f64,
}

impl<'a> FeatureContext<'a> {
    /// Driver timings are looked up with every pair in `pairs` loading its
    /// nets, as in the window rule.
    pub fn new(design: &'a Design, pairs: &[CouplingPair], w_max: f64) -> Self {
        Self {
            design,
            timing: timings(design, pairs),
            w_max,
        }
    }

    pub fn design(&self) -> &Design {
        self.design
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn timing(&self, net: NetId) -> &DriverTiming {
        &self.timing[&net]
    }

    /// Features of `segment`, coupled through `pair` (whose victim must be
    /// `segment`) or uncoupled.
    pub fn features(&self, segment: SegmentId, pair: Option<&CouplingPair>) -> FeatureVector {
        let seg = self.design.segment(segment);
        let layer = self.design.layer(seg.layer_id);
        let driver = self.design.driver(seg.net_id);
        let t = &self.timing[&seg.net_id];
        let (dskew, l_si, w_si) = match pair {
            Some(p) => {
                debug_assert_eq!(p.victim_segment_id, segment);
                let a = self.design.segment(p.aggressor_segment_id).net_id;
                (t.at_out - self.timing[&a].at_out, p.l_si, p.w_si)
            }
            None => (DSKEW_MAX, 0.0, w_sentinel(self.w_max)),
        };
        FeatureVector {
            dskew,
            rf: driver.direction.sign(),
            s_in: driver.s_in,
            s_out: t.s_out,
            d_driver: t.d_driver,
            m_w: self.design.segment_width(seg),
            m_t: layer.m_t,
            m_h: layer.m_h,
            m_eps0: layer.m_eps0,
            wire_len: seg.length(),
            l_si,
            w_si,
        }
    }

    fn trace(&self, segment: SegmentId, aggressor: Option<SegmentId>) -> Trace {
        Trace {
            design: self.design.name().to_string(),
            net_id: self.design.segment(segment).net_id,
            segment_id: segment,
            aggressor_segment_id: aggressor,
        }
    }
}

/// Directed pairs grouped by victim segment.
pub fn pairs_by_victim(pairs: &[CouplingPair]) -> BTreeMap<SegmentId, Vec<CouplingPair>> {
    let mut m: BTreeMap<SegmentId, Vec<CouplingPair>> = BTreeMap::new();
    for p in directed_pairs(pairs) {
        m.entry(p.victim_segment_id).or_default().push(p);
    }
    m
}

/// The pair with the largest coupling capacitance; ties go to the lower
/// aggressor id.
pub fn strongest<'p>(design: &Design, pairs: &'p [CouplingPair]) -> Option<&'p CouplingPair> {
    let cc = |p: &CouplingPair| coupling_capacitance(p, design.layer(design.segment(p.victim_segment_id).layer_id));
    pairs.iter().max_by(|a, b| {
        cc(a)
            .total_cmp(&cc(b))
            .then_with(|| b.aggressor_segment_id.cmp(&a.aggressor_segment_id))
    })
}

/// One unlabeled sample per segment in id order, coupled through its
/// strongest aggressor when it has one.
pub fn extract_features(design: &Design, pairs: &[CouplingPair], w_max: f64) -> Vec<Sample> {
    let ctx = FeatureContext::new(design, pairs, w_max);
    let by_victim = pairs_by_victim(pairs);
    let mut ids: Vec<SegmentId> = design.segments().iter().map(|s| s.id).collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|s| {
            let p = by_victim.get(&s).and_then(|ps| strongest(design, ps));
            Sample {
                features: ctx.features(s, p),
                label: None,
                trace: ctx.trace(s, p.map(|p| p.aggressor_segment_id)),
            }
        })
        .collect()
}

/// Attaches oracle labels: the class and delta of each sample's pair and
/// the quiet delay of its segment.
pub fn attach_labels(
    samples: &mut [Sample],
    labels: &[PairLabel],
    summary: &OracleSummary,
) -> Result<(), DatasetError> {
    let by_pair: HashMap<(SegmentId, SegmentId), &PairLabel> = labels
        .iter()
        .map(|l| ((l.pair.victim_segment_id, l.pair.aggressor_segment_id), l))
        .collect();
    let tau = summary.tau_nosi();
    for (row, s) in samples.iter_mut().enumerate() {
        let seg = s.trace.segment_id;
        let tau_nosi = *tau.get(&seg).ok_or_else(|| DatasetError::Row {
            row,
            message: format!("no quiet delay for segment {seg}"),
        })?;
        let (class, delta) = match s.trace.aggressor_segment_id {
            None => (LabelClass::None, 0.0),
            Some(a) => {
                let l = by_pair.get(&(seg, a)).ok_or_else(|| DatasetError::Row {
                    row,
                    message: format!("no label for pair {seg}->{a}"),
                })?;
                match l.classification {
                    PairClass::Tsi => (LabelClass::Tsi, l.oracle_delta.unwrap_or(0.0)),
                    PairClass::Fsi => (LabelClass::Fsi, 0.0),
                }
            }
        };
        s.label = Some(Label { class, delta, tau_nosi });
    }
    Ok(())
}

/// Writes samples with the fixed header. Unlabeled samples leave the label
/// columns empty.
pub fn write_samples(samples: &[Sample], out: impl Write) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for s in samples {
        let mut rec: Vec<String> = s.features.to_array().iter().map(|v| v.to_string()).collect();
        match s.label {
            Some(l) => rec.extend([l.class.to_string(), l.delta.to_string(), l.tau_nosi.to_string()]),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples written by [`write_samples`], tagging each with `design`.
pub fn read_samples(input: impl Read, design: &str) -> Result<Vec<Sample>, DatasetError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != CSV_HEADER {
        return Err(DatasetError::Header {
            expected: CSV_HEADER.join(","),
            found: found.join(","),
        });
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| DatasetError::Row { row: row + 1, message };
        let num = |i: usize| -> Result<f64, DatasetError> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("column {} is not a number: `{}`", CSV_HEADER[i], &rec[i])))
        };
        let mut a = [0.0; FEATURE_COUNT];
        for (i, v) in a.iter_mut().enumerate() {
            *v = num(i)?;
        }
        let class = rec[12].trim();
        let label = if class.is_empty() {
            None
        } else {
            let class = LabelClass::parse(class).ok_or_else(|| bad(format!("unknown label class `{class}`")))?;
            Some(Label {
                class,
                delta: num(13)?,
                tau_nosi: num(14)?,
            })
        };
        out.push(Sample {
            features: FeatureVector::from_array(a),
            label,
            trace: Trace {
                design: design.to_string(),
                net_id: 0,
                segment_id: 0,
                aggressor_segment_id: None,
            },
        });
    }
    Ok(out)
}

pub fn save_samples(samples: &[Sample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let f = std::fs::File::create(path)?;
    write_samples(samples, std::io::BufWriter::new(f))
}

/// Reads a dataset file; samples are tagged with the file stem.
pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<Sample>, DatasetError> {
    let path = path.as_ref();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    read_samples(std::io::BufReader::new(std::fs::File::open(path)?), &stem)
}

/// Per-feature z-score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; FEATURE_COUNT],
    pub scale: [f64; FEATURE_COUNT],
}

impl NormStats {
    /// Mean and population standard deviation of `rows`. A constant column
    /// gets scale 1 with a warning.
    pub fn fit<'r>(rows: impl Iterator<Item = &'r FeatureVector>) -> Result<Self, DatasetError> {
        let rows: Vec<[f64; FEATURE_COUNT]> = rows.map(|f| f.to_array()).collect();
        if rows.is_empty() {
            return Err(DatasetError::EmptyTrain);
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; FEATURE_COUNT];
        let mut scale = [0.0; FEATURE_COUNT];
        for j in 0..FEATURE_COUNT {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            scale[j] = var.sqrt();
            if !(scale[j] > 1e-12 * mean[j].abs().max(1.0)) {
                log::warn!("feature {} has zero variance; passing it through centered", FEATURE_NAMES[j]);
                scale[j] = 1.0;
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_COUNT],
            scale: [1.0; FEATURE_COUNT],
        }
    }

    pub fn apply(&self, f: &FeatureVector) -> [f64; FEATURE_COUNT] {
        let mut a = f.to_array();
        for j in 0..FEATURE_COUNT {
            a[j] = (a[j] - self.mean[j]) / self.scale[j];
        }
        a
    }

    pub fn invert(&self, z: &[f64; FEATURE_COUNT]) -> FeatureVector {
        let mut a = *z;
        for j in 0..FEATURE_COUNT {
            a[j] = a[j] * self.scale[j] + self.mean[j];
        }
        FeatureVector::from_array(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples in canonical order with an optional train/test assignment and
/// normalization. Until split, every sample is in the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    split: Vec<Split>,
    split_seed: Option<u64>,
    stats: Option<NormStats>,
}

impl Dataset {
    /// Sorts `samples` by trace, then by content, so that results never
    /// depend on input order.
    pub fn new(mut samples: Vec<Sample>) -> Self {
        samples.sort_by(Sample::canonical_cmp);
        let split = vec![Split::Train; samples.len()];
        Self {
            samples,
            split,
            split_seed: None,
            stats: None,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn assignment(&self) -> &[Split] {
        &self.split
    }

    pub fn split_seed(&self) -> Option<u64> {
        self.split_seed
    }

    pub fn stats(&self) -> Option<&NormStats> {
        self.stats.as_ref()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn subset(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }

    /// Shuffled split with `fraction` of each label class in train. With
    /// fewer than two TSI samples the classes are not kept apart.
    pub fn split(mut self, fraction: f64, seed: u64) -> Result<Self, DatasetError> {
        check_fraction(fraction)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tsi = self.samples.iter().filter(|s| s.class() == Some(LabelClass::Tsi)).count();
        let mut groups: BTreeMap<Option<LabelClass>, Vec<usize>> = BTreeMap::new();
        if tsi < 2 {
            log::warn!("only {tsi} TSI samples; splitting without stratification");
            groups.insert(None, (0..self.samples.len()).collect());
        } else {
            for (i, s) in self.samples.iter().enumerate() {
                groups.entry(s.class()).or_default().push(i);
            }
        }
        for ix in groups.values_mut() {
            ix.shuffle(&mut rng);
            let n_train = (fraction * ix.len() as f64).round() as usize;
            for (k, &i) in ix.iter().enumerate() {
                self.split[i] = if k < n_train { Split::Train } else { Split::Test };
            }
        }
        self.split_seed = Some(seed);
        self.stats = None;
        Ok(self)
    }

    /// Split that keeps every design whole: designs are shuffled and taken
    /// into train until `fraction` of the samples is reached.
    pub fn split_by_design(mut self, fraction: f64, seed: u64) -> Result<Self, DatasetError> {
        check_fraction(fraction)?;
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.samples {
            *sizes.entry(s.trace.design.as_str()).or_default() += 1;
        }
        let mut designs: Vec<(&str, usize)> = sizes.into_iter().collect();
        designs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let target = fraction * self.samples.len() as f64;
        let mut taken = 0usize;
        let mut train = std::collections::HashSet::new();
        for (d, n) in designs {
            if train.is_empty() || (taken as f64) + 0.5 * n as f64 <= target {
                train.insert(d.to_string());
                taken += n;
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            self.split[i] = if train.contains(&s.trace.design) {
                Split::Train
            } else {
                Split::Test
            };
        }
        self.split_seed = Some(seed);
        self.stats = None;
        Ok(self)
    }

    /// Fits z-score statistics on the training split and stores them.
    pub fn normalize(mut self) -> Result<Self, DatasetError> {
        let stats = NormStats::fit(self.subset(Split::Train).into_iter().map(|s| &s.features))?;
        self.stats = Some(stats);
        Ok(self)
    }

    /// Replaces the test split with `samples` (kept in canonical order);
    /// statistics are left untouched.
    pub fn with_test(mut self, test: Vec<Sample>) -> Self {
        let mut kept: Vec<Sample> = Vec::new();
        for (s, sp) in self.samples.drain(..).zip(self.split.drain(..)) {
            if sp == Split::Train {
                kept.push(s);
            }
        }
        let n_train = kept.len();
        let mut test = test;
        test.sort_by(Sample::canonical_cmp);
        kept.extend(test);
        self.split = (0..kept.len())
            .map(|i| if i < n_train { Split::Train } else { Split::Test })
            .collect();
        self.samples = kept;
        self
    }
}

fn check_fraction(fraction: f64) -> Result<(), DatasetError> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(DatasetError::BadFraction(fraction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize, class: LabelClass) -> Sample {
        Sample {
            features: FeatureVector::from_array([i as f64; FEATURE_COUNT]),
            label: Some(Label {
                class,
                delta: if class == LabelClass::Tsi { 1.0 } else { 0.0 },
                tau_nosi: 1.0,
            }),
            trace: Trace {
                design: "d".into(),
                net_id: i as u32,
                segment_id: i as u32,
                aggressor_segment_id: None,
            },
        }
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![sample(1, LabelClass::Tsi), sample(2, LabelClass::None)];
        let mut buf = Vec::new();
        write_samples(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        let back = read_samples(&buf[..], "d").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].features, s[0].features);
        assert_eq!(back[0].label, s[0].label);
    }

    #[test]
    fn header_is_checked() {
        let err = read_samples("a,b\n1,2\n".as_bytes(), "d").unwrap_err();
        assert!(matches!(err, DatasetError::Header { .. }));
    }

    #[test]
    fn split_sizes_and_repeatability() {
        let samples: Vec<Sample> = (0..1000)
            .map(|i| sample(i, if i % 10 == 0 { LabelClass::Tsi } else { LabelClass::Fsi }))
            .collect();
        let a = Dataset::new(samples.clone()).split(0.7, 42).unwrap();
        let b = Dataset::new(samples).split(0.7, 42).unwrap();
        assert_eq!(a.indices(Split::Train).len(), 700);
        assert_eq!(a.indices(Split::Test).len(), 300);
        assert_eq!(a.assignment(), b.assignment());
    }

    #[test]
    fn constant_column_is_centered() {
        let samples: Vec<Sample> = (0..10).map(|i| sample(i, LabelClass::Fsi)).collect();
        let mut rows: Vec<FeatureVector> = samples.iter().map(|s| s.features).collect();
        for r in &mut rows {
            r.rf = 1.0;
        }
        let st = NormStats::fit(rows.iter()).unwrap();
        assert_eq!(st.scale[1], 1.0);
        assert_eq!(st.apply(&rows[3])[1], 0.0);
    }

    #[test]
    fn bad_fraction() {
        assert!(Dataset::new(vec![]).split(1.0, 0).is_err());
    }
}
