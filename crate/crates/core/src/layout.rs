//! Routed-design description and coupling-pair extraction.
//!
//! A [`Design`] is a set of metal layers, nets built from axis-aligned wire
//! segments, and one driver per net. Designs are stored as JSON documents
//! (see [`load_design`]) and are always validated on construction, so code
//! holding a `Design` can rely on every id resolving.
//!
//! Coupling is modeled between parallel segments on the same layer only.
//! [`extract_coupling_pairs`] finds them with a per-layer sweep over segment
//! spans.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::{LayoutError, Violation};

pub type LayerId = u32;
pub type NetId = u32;
pub type SegmentId = u32;

/// Coordinates closer than this are treated as the same point when checking
/// segment chains.
const CONNECT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteDirection {
    Horizontal,
    Vertical,
}

/// Switching direction of a driver input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transition {
    Rise,
    Fall,
}

impl Transition {
    pub fn opposite(self) -> Self {
        match self {
            Transition::Rise => Transition::Fall,
            Transition::Fall => Transition::Rise,
        }
    }

    /// `+1` for rise, `-1` for fall.
    pub fn sign(self) -> f64 {
        match self {
            Transition::Rise => 1.0,
            Transition::Fall => -1.0,
        }
    }
}

/// A metal layer with the electrical parameters used for RC estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub id: LayerId,
    pub direction: RouteDirection,
    /// Default wire width (µm).
    #[serde(rename = "M_W")]
    pub m_w: f64,
    /// Wire thickness (µm).
    #[serde(rename = "M_T")]
    pub m_t: f64,
    /// Inter-layer dielectric thickness (µm).
    #[serde(rename = "M_H")]
    pub m_h: f64,
    /// Relative oxide permittivity.
    #[serde(rename = "M_eps0")]
    pub m_eps0: f64,
    /// Sheet resistance (Ω/square).
    pub r_sheet: f64,
    /// Ground capacitance per unit length (fF/µm).
    pub c_area: f64,
    /// Sidewall coupling coefficient (fF); per-length coupling is
    /// `c_coup_unit / W_SI`.
    pub c_coup_unit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub id: SegmentId,
    pub net_id: NetId,
    pub layer_id: LayerId,
    pub start: Point,
    pub end: Point,
    /// Overrides the layer's default width (µm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

impl Segment {
    pub fn orientation(&self) -> Option<RouteDirection> {
        let dx = (self.end.x - self.start.x).abs();
        let dy = (self.end.y - self.start.y).abs();
        match (dx > 0.0, dy > 0.0) {
            (true, false) => Some(RouteDirection::Horizontal),
            (false, true) => Some(RouteDirection::Vertical),
            _ => None,
        }
    }

    pub fn length(&self) -> f64 {
        (self.end.x - self.start.x).abs() + (self.end.y - self.start.y).abs()
    }

    /// Span along the routing axis, ordered low to high.
    fn span(&self, dir: RouteDirection) -> (f64, f64) {
        let (a, b) = match dir {
            RouteDirection::Horizontal => (self.start.x, self.end.x),
            RouteDirection::Vertical => (self.start.y, self.end.y),
        };
        (a.min(b), a.max(b))
    }

    /// Coordinate across the routing axis (the track).
    fn track(&self, dir: RouteDirection) -> f64 {
        match dir {
            RouteDirection::Horizontal => self.start.y,
            RouteDirection::Vertical => self.start.x,
        }
    }

    /// Position along the routing axis measured from `start`, as a fraction
    /// of the length. `coord` is an absolute coordinate on that axis.
    pub fn fraction_at(&self, coord: f64) -> f64 {
        let (s, e) = match self.orientation() {
            Some(RouteDirection::Horizontal) => (self.start.x, self.end.x),
            Some(RouteDirection::Vertical) => (self.start.y, self.end.y),
            None => return 0.0,
        };
        ((coord - s) / (e - s)).clamp(0.0, 1.0)
    }
}

/// Two-dimensional cell characterization: input slew × load capacitance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayTable {
    /// Input transition axis (ps), strictly increasing.
    pub input_slew: Vec<f64>,
    /// Load capacitance axis (fF), strictly increasing.
    pub load: Vec<f64>,
    /// `delay[i][j]` at `input_slew[i]`, `load[j]` (ps).
    pub delay: Vec<Vec<f64>>,
    /// Output transition, same indexing (ps).
    pub output_slew: Vec<Vec<f64>>,
}

/// Result of a table lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTiming {
    pub delay: f64,
    pub output_slew: f64,
    /// Set when either coordinate fell outside the table and was clamped.
    pub clamped: bool,
}

impl DelayTable {
    /// Bilinear interpolation, clamping out-of-range coordinates to the
    /// table edge.
    pub fn lookup(&self, slew: f64, load: f64) -> CellTiming {
        let (i, fi, ci) = locate(&self.input_slew, slew);
        let (j, fj, cj) = locate(&self.load, load);
        let interp = |t: &Vec<Vec<f64>>| {
            let i1 = (i + 1).min(self.input_slew.len() - 1);
            let j1 = (j + 1).min(self.load.len() - 1);
            let a = t[i][j] * (1.0 - fj) + t[i][j1] * fj;
            let b = t[i1][j] * (1.0 - fj) + t[i1][j1] * fj;
            a * (1.0 - fi) + b * fi
        };
        CellTiming {
            delay: interp(&self.delay),
            output_slew: interp(&self.output_slew),
            clamped: ci || cj,
        }
    }

    fn violations(&self, net_id: NetId, out: &mut Vec<Violation>) {
        let ctx = format!("driver of net {net_id}");
        for (name, axis) in [("input_slew", &self.input_slew), ("load", &self.load)] {
            if axis.is_empty() {
                out.push(Violation::new(&ctx, format!("delay_table.{name} is empty")));
            } else if axis.windows(2).any(|w| !(w[1] > w[0])) {
                out.push(Violation::new(
                    &ctx,
                    format!("delay_table.{name} is not strictly increasing"),
                ));
            }
        }
        for (name, grid) in [("delay", &self.delay), ("output_slew", &self.output_slew)] {
            let shape_ok = grid.len() == self.input_slew.len()
                && grid.iter().all(|row| row.len() == self.load.len());
            if !shape_ok {
                out.push(Violation::new(
                    &ctx,
                    format!(
                        "delay_table.{name} must be {}x{}",
                        self.input_slew.len(),
                        self.load.len()
                    ),
                ));
            } else if grid.iter().flatten().any(|v| !(*v > 0.0) || !v.is_finite()) {
                out.push(Violation::new(
                    &ctx,
                    format!("delay_table.{name} has a non-positive entry"),
                ));
            }
        }
    }
}

/// Index of the lower grid point, interpolation fraction, and clamp flag.
fn locate(axis: &[f64], x: f64) -> (usize, f64, bool) {
    let n = axis.len();
    if n == 1 {
        return (0, 0.0, x != axis[0]);
    }
    if x <= axis[0] {
        return (0, 0.0, x < axis[0]);
    }
    if x >= axis[n - 1] {
        return (n - 2, 1.0, x > axis[n - 1]);
    }
    let i = axis.partition_point(|&a| a <= x) - 1;
    let f = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, f, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Driver {
    pub net_id: NetId,
    /// Thevenin output resistance (kΩ).
    pub r_drive: f64,
    /// Input transition time, 10–90% (ps).
    pub s_in: f64,
    pub direction: Transition,
    /// Arrival time at the driver input, 50% point (ps).
    pub at_in: f64,
    pub delay_table: DelayTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Net {
    pub id: NetId,
    pub name: String,
    /// Segment ids in source-to-sink order.
    pub segments: Vec<SegmentId>,
    /// Sink load capacitance (fF).
    pub sink_load: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

/// On-disk form of a design. Converting it into a [`Design`] validates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    pub layers: Vec<Layer>,
    pub nets: Vec<Net>,
    pub segments: Vec<Segment>,
    pub drivers: Vec<Driver>,
    pub meta: Meta,
}

/// A validated routed design.
#[derive(Debug, Clone)]
pub struct Design {
    file: DesignFile,
    layer_ix: HashMap<LayerId, usize>,
    net_ix: HashMap<NetId, usize>,
    seg_ix: HashMap<SegmentId, usize>,
    driver_ix: HashMap<NetId, usize>,
}

impl PartialEq for Design {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

impl TryFrom<DesignFile> for Design {
    type Error = LayoutError;

    fn try_from(file: DesignFile) -> Result<Self, Self::Error> {
        Design::new(file)
    }
}

impl Design {
    pub fn new(file: DesignFile) -> Result<Self, LayoutError> {
        let violations = validate(&file);
        if !violations.is_empty() {
            return Err(LayoutError::Invalid(violations));
        }
        let index = |ids: Vec<u32>| -> HashMap<u32, usize> {
            ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
        };
        Ok(Self {
            layer_ix: index(file.layers.iter().map(|l| l.id).collect()),
            net_ix: index(file.nets.iter().map(|n| n.id).collect()),
            seg_ix: index(file.segments.iter().map(|s| s.id).collect()),
            driver_ix: index(file.drivers.iter().map(|d| d.net_id).collect()),
            file,
        })
    }

    pub fn name(&self) -> &str {
        &self.file.meta.name
    }

    pub fn meta(&self) -> &Meta {
        &self.file.meta
    }

    pub fn layers(&self) -> &[Layer] {
        &self.file.layers
    }

    pub fn nets(&self) -> &[Net] {
        &self.file.nets
    }

    pub fn segments(&self) -> &[Segment] {
        &self.file.segments
    }

    pub fn drivers(&self) -> &[Driver] {
        &self.file.drivers
    }

    pub fn file(&self) -> &DesignFile {
        &self.file
    }

    pub fn into_file(self) -> DesignFile {
        self.file
    }

    pub fn layer(&self, id: LayerId) -> &Layer {
        &self.file.layers[self.layer_ix[&id]]
    }

    pub fn net(&self, id: NetId) -> &Net {
        &self.file.nets[self.net_ix[&id]]
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.file.segments[self.seg_ix[&id]]
    }

    pub fn try_segment(&self, id: SegmentId) -> Option<&Segment> {
        self.seg_ix.get(&id).map(|&i| &self.file.segments[i])
    }

    pub fn driver(&self, net: NetId) -> &Driver {
        &self.file.drivers[self.driver_ix[&net]]
    }

    pub fn segment_width(&self, seg: &Segment) -> f64 {
        seg.width.unwrap_or_else(|| self.layer(seg.layer_id).m_w)
    }

    /// Wire resistance of a segment (Ω).
    pub fn segment_resistance(&self, seg: &Segment) -> f64 {
        self.layer(seg.layer_id).r_sheet * seg.length() / self.segment_width(seg)
    }

    /// Ground capacitance of a segment (fF).
    pub fn segment_capacitance(&self, seg: &Segment) -> f64 {
        self.layer(seg.layer_id).c_area * seg.length()
    }

    /// Capacitive load seen by a net's driver: wire ground capacitance, sink
    /// load, and every coupling capacitor on the net counted as grounded.
    pub fn net_load(&self, net: NetId, pairs: &[CouplingPair]) -> f64 {
        let n = self.net(net);
        let wire: f64 = n
            .segments
            .iter()
            .map(|&s| self.segment_capacitance(self.segment(s)))
            .sum();
        let coupling: f64 = pairs
            .iter()
            .filter(|p| {
                self.segment(p.victim_segment_id).net_id == net
                    || self.segment(p.aggressor_segment_id).net_id == net
            })
            .map(|p| coupling_capacitance(p, self.layer(self.segment(p.victim_segment_id).layer_id)))
            .sum();
        wire + n.sink_load + coupling
    }

    /// Applies `f` to every point, used for translation tests and tooling.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Design {
        let mut file = self.file.clone();
        for s in &mut file.segments {
            s.start = f(s.start);
            s.end = f(s.end);
        }
        Design::new(file).expect("point mapping preserves validity")
    }

    /// Smallest edge-to-edge spacing between overlapping parallel segments of
    /// different nets on the same layer. Only neighbors within ten wire widths
    /// are considered.
    pub fn min_spacing(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for group in self.track_groups().values() {
            let max_half = group.iter().map(|s| s.half_width).fold(0.0, f64::max);
            sweep(
                group,
                |a, b, _, _| {
                    let sp = spacing(a, b);
                    if sp > 0.0 {
                        best = Some(best.map_or(sp, |x: f64| x.min(sp)));
                    }
                },
                Some(22.0 * max_half),
            );
        }
        best
    }

    /// Default extraction distance: three times the minimum spacing, or three
    /// default widths on the narrowest layer when nothing runs in parallel.
    pub fn default_w_max(&self) -> f64 {
        self.min_spacing().map(|s| 3.0 * s).unwrap_or_else(|| {
            3.0 * self
                .layers()
                .iter()
                .map(|l| l.m_w)
                .fold(f64::INFINITY, f64::min)
        })
    }

    fn track_groups(&self) -> BTreeMap<(LayerId, u8), Vec<TrackSeg>> {
        let mut groups: BTreeMap<(LayerId, u8), Vec<TrackSeg>> = BTreeMap::new();
        for s in &self.file.segments {
            let dir = s.orientation().expect("validated");
            let (lo, hi) = s.span(dir);
            groups
                .entry((s.layer_id, dir as u8))
                .or_default()
                .push(TrackSeg {
                    id: s.id,
                    net: s.net_id,
                    track: s.track(dir),
                    half_width: self.segment_width(s) / 2.0,
                    lo,
                    hi,
                });
        }
        groups
    }
}

/// Parses and validates a design file.
pub fn load_design(path: impl AsRef<Path>) -> Result<Design, LayoutError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LayoutError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_design(&text)
}

pub fn parse_design(text: &str) -> Result<Design, LayoutError> {
    let file: DesignFile = serde_json::from_str(text).map_err(|e| LayoutError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Design::new(file)
}

pub fn save_design(design: &Design, path: impl AsRef<Path>) -> Result<(), LayoutError> {
    let path = path.as_ref();
    std::fs::write(path, design_to_string(design)).map_err(|e| LayoutError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn design_to_string(design: &Design) -> String {
    let mut s = serde_json::to_string_pretty(design.file()).expect("design serializes");
    s.push('\n');
    s
}

fn validate(f: &DesignFile) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut layer_ids: Vec<LayerId> = f.layers.iter().map(|l| l.id).collect();
    layer_ids.sort_unstable();
    for (i, &id) in layer_ids.iter().enumerate() {
        if id != i as u32 + 1 {
            out.push(Violation::new(
                "layers",
                format!("layer ids must be unique and contiguous from 1, found {layer_ids:?}"),
            ));
            break;
        }
    }
    for l in &f.layers {
        let ctx = format!("layer {}", l.id);
        for (name, v) in [
            ("M_W", l.m_w),
            ("M_T", l.m_t),
            ("M_H", l.m_h),
            ("r_sheet", l.r_sheet),
            ("c_area", l.c_area),
            ("c_coup_unit", l.c_coup_unit),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                out.push(Violation::new(&ctx, format!("{name} must be positive, got {v}")));
            }
        }
        if !(l.m_eps0 >= 1.0) {
            out.push(Violation::new(&ctx, format!("M_eps0 must be >= 1, got {}", l.m_eps0)));
        }
    }
    let layers: BTreeSet<LayerId> = layer_ids.iter().copied().collect();

    let mut nets: HashMap<NetId, &Net> = HashMap::new();
    for n in &f.nets {
        if nets.insert(n.id, n).is_some() {
            out.push(Violation::new(format!("net {}", n.id), "duplicate net id"));
        }
    }

    let mut segs: HashMap<SegmentId, &Segment> = HashMap::new();
    for s in &f.segments {
        let ctx = format!("segment {}", s.id);
        if segs.insert(s.id, s).is_some() {
            out.push(Violation::new(&ctx, "duplicate segment id"));
        }
        if !layers.contains(&s.layer_id) {
            out.push(Violation::new(&ctx, format!("references missing layer {}", s.layer_id)));
        }
        if !nets.contains_key(&s.net_id) {
            out.push(Violation::new(&ctx, format!("references missing net {}", s.net_id)));
        }
        let coords = [s.start.x, s.start.y, s.end.x, s.end.y];
        if coords.iter().any(|c| !c.is_finite()) {
            out.push(Violation::new(&ctx, "non-finite coordinate"));
        } else if s.orientation().is_none() {
            out.push(Violation::new(
                &ctx,
                "must be strictly horizontal or vertical with positive length",
            ));
        }
        if let Some(w) = s.width {
            if !(w > 0.0) {
                out.push(Violation::new(&ctx, format!("width override must be positive, got {w}")));
            }
        }
    }

    let mut owner: HashMap<SegmentId, NetId> = HashMap::new();
    for n in &f.nets {
        let ctx = format!("net {}", n.id);
        if !(n.sink_load >= 0.0) || !n.sink_load.is_finite() {
            out.push(Violation::new(&ctx, format!("sink_load must be >= 0, got {}", n.sink_load)));
        }
        for &sid in &n.segments {
            match segs.get(&sid) {
                None => out.push(Violation::new(&ctx, format!("lists missing segment {sid}"))),
                Some(s) if s.net_id != n.id => out.push(Violation::new(
                    &ctx,
                    format!("lists segment {sid} which belongs to net {}", s.net_id),
                )),
                Some(_) => {
                    if let Some(prev) = owner.insert(sid, n.id) {
                        out.push(Violation::new(
                            &ctx,
                            format!("segment {sid} already listed by net {prev}"),
                        ));
                    }
                }
            }
        }
        for w in n.segments.windows(2) {
            if let (Some(a), Some(b)) = (segs.get(&w[0]), segs.get(&w[1])) {
                let gap = (a.end.x - b.start.x).abs() + (a.end.y - b.start.y).abs();
                if gap > CONNECT_EPS {
                    out.push(Violation::new(
                        &ctx,
                        format!("segment {} does not end where segment {} starts", a.id, b.id),
                    ));
                }
            }
        }
    }
    for s in &f.segments {
        if nets.contains_key(&s.net_id) && !owner.contains_key(&s.id) {
            out.push(Violation::new(
                format!("segment {}", s.id),
                format!("not listed in the chain of net {}", s.net_id),
            ));
        }
    }

    let mut driven: HashMap<NetId, usize> = HashMap::new();
    for d in &f.drivers {
        let ctx = format!("driver of net {}", d.net_id);
        *driven.entry(d.net_id).or_default() += 1;
        if !nets.contains_key(&d.net_id) {
            out.push(Violation::new(&ctx, "references missing net"));
        }
        if !(d.r_drive > 0.0) {
            out.push(Violation::new(&ctx, format!("r_drive must be positive, got {}", d.r_drive)));
        }
        if !(d.s_in > 0.0) {
            out.push(Violation::new(&ctx, format!("s_in must be positive, got {}", d.s_in)));
        }
        if !d.at_in.is_finite() {
            out.push(Violation::new(&ctx, "at_in must be finite"));
        }
        d.delay_table.violations(d.net_id, &mut out);
    }
    for n in &f.nets {
        match driven.get(&n.id).copied().unwrap_or(0) {
            1 => {}
            0 => out.push(Violation::new(format!("net {}", n.id), "has no driver")),
            k => out.push(Violation::new(format!("net {}", n.id), format!("has {k} drivers"))),
        }
    }
    out
}

/// Two parallel segments of different nets on the same layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingPair {
    pub victim_segment_id: SegmentId,
    pub aggressor_segment_id: SegmentId,
    /// Parallel overlap length (µm).
    #[serde(rename = "L_SI")]
    pub l_si: f64,
    /// Edge-to-edge spacing (µm).
    #[serde(rename = "W_SI")]
    pub w_si: f64,
}

impl CouplingPair {
    /// The same pair seen from the other segment.
    pub fn reversed(&self) -> Self {
        Self {
            victim_segment_id: self.aggressor_segment_id,
            aggressor_segment_id: self.victim_segment_id,
            ..*self
        }
    }

    pub fn touches(&self, seg: SegmentId) -> bool {
        self.victim_segment_id == seg || self.aggressor_segment_id == seg
    }
}

impl fmt::Display for CouplingPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}<->{} (L_SI={} W_SI={})",
            self.victim_segment_id, self.aggressor_segment_id, self.l_si, self.w_si
        )
    }
}

/// Parallel-plate coupling capacitance of a pair (fF).
pub fn coupling_capacitance(pair: &CouplingPair, layer: &Layer) -> f64 {
    layer.c_coup_unit * pair.l_si / pair.w_si
}

#[derive(Debug, Clone, Copy)]
struct TrackSeg {
    id: SegmentId,
    net: NetId,
    track: f64,
    half_width: f64,
    lo: f64,
    hi: f64,
}

fn spacing(a: &TrackSeg, b: &TrackSeg) -> f64 {
    (a.track - b.track).abs() - (a.half_width + b.half_width)
}

/// Visits every pair of segments in `group` whose spans overlap by a positive
/// length and, when `reach` is given, whose tracks lie within `reach` of each
/// other (center to center).
fn sweep(
    group: &[TrackSeg],
    mut visit: impl FnMut(&TrackSeg, &TrackSeg, f64, f64),
    reach: Option<f64>,
) {
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.sort_by(|&a, &b| {
        group[a]
            .lo
            .total_cmp(&group[b].lo)
            .then(group[a].id.cmp(&group[b].id))
    });
    // Active segments keyed by track; a min-heap of span ends drives removal.
    let mut active: BTreeSet<(OrderedFloat<f64>, SegmentId, usize)> = BTreeSet::new();
    let mut ends: std::collections::BinaryHeap<std::cmp::Reverse<(OrderedFloat<f64>, usize)>> =
        Default::default();
    for &i in &order {
        let s = &group[i];
        while let Some(std::cmp::Reverse((end, j))) = ends.peek().copied() {
            if end.0 > s.lo {
                break;
            }
            ends.pop();
            active.remove(&(OrderedFloat(group[j].track), group[j].id, j));
        }
        let range: Box<dyn Iterator<Item = &(OrderedFloat<f64>, SegmentId, usize)>> = match reach {
            Some(r) => Box::new(active.range(
                (OrderedFloat(s.track - r), 0, 0)..=(OrderedFloat(s.track + r), u32::MAX, usize::MAX),
            )),
            None => Box::new(active.iter()),
        };
        for &(_, _, j) in range {
            let o = &group[j];
            if o.net == s.net {
                continue;
            }
            let overlap = s.hi.min(o.hi) - s.lo.max(o.lo);
            if overlap > 0.0 {
                visit(s, o, overlap, spacing(s, o));
            }
        }
        active.insert((OrderedFloat(s.track), s.id, i));
        ends.push(std::cmp::Reverse((OrderedFloat(s.hi), i)));
    }
}

/// Finds every coupled pair of parallel same-layer segments from different
/// nets whose edge-to-edge spacing is at most `w_max` and whose spans overlap.
///
/// Each unordered pair is reported once, with the lower segment id as the
/// victim, sorted by (victim, aggressor).
pub fn extract_coupling_pairs(design: &Design, w_max: f64) -> Vec<CouplingPair> {
    assert!(w_max > 0.0, "w_max must be positive");
    let mut pairs = Vec::new();
    for group in design.track_groups().values() {
        let max_half = group.iter().map(|s| s.half_width).fold(0.0, f64::max);
        sweep(
            group,
            |a, b, overlap, sp| {
                if sp > 0.0 && sp <= w_max {
                    let (v, g) = if a.id < b.id { (a.id, b.id) } else { (b.id, a.id) };
                    pairs.push(CouplingPair {
                        victim_segment_id: v,
                        aggressor_segment_id: g,
                        l_si: overlap,
                        w_si: sp,
                    });
                }
            },
            // Slack so rounding never drops a pair at exactly `w_max`; the
            // spacing test above is exact.
            Some((w_max + 2.0 * max_half) * (1.0 + 1e-9)),
        );
    }
    pairs.sort_by_key(|p| (p.victim_segment_id, p.aggressor_segment_id));
    pairs
}

/// Midpoint of a pair's parallel overlap, as a coordinate along the routing
/// axis.
pub fn overlap_midpoint(design: &Design, pair: &CouplingPair) -> f64 {
    let a = design.segment(pair.victim_segment_id);
    let b = design.segment(pair.aggressor_segment_id);
    let dir = a.orientation().expect("validated");
    let (alo, ahi) = a.span(dir);
    let (blo, bhi) = b.span(dir);
    0.5 * (alo.max(blo) + ahi.min(bhi))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table() -> DelayTable {
        DelayTable {
            input_slew: vec![10.0, 100.0],
            load: vec![1.0, 100.0],
            delay: vec![vec![5.0, 50.0], vec![10.0, 60.0]],
            output_slew: vec![vec![8.0, 80.0], vec![20.0, 90.0]],
        }
    }

    fn layer(id: u32, direction: RouteDirection) -> Layer {
        Layer {
            id,
            direction,
            m_w: 0.05,
            m_t: 0.1,
            m_h: 0.1,
            m_eps0: 3.0,
            r_sheet: 0.2,
            c_area: 0.1,
            c_coup_unit: 0.05,
        }
    }

    fn seg(id: u32, net: u32, layer: u32, a: (f64, f64), b: (f64, f64)) -> Segment {
        Segment {
            id,
            net_id: net,
            layer_id: layer,
            start: Point::new(a.0, a.1),
            end: Point::new(b.0, b.1),
            width: None,
        }
    }

    fn driver(net: u32) -> Driver {
        Driver {
            net_id: net,
            r_drive: 1.0,
            s_in: 20.0,
            direction: Transition::Rise,
            at_in: 0.0,
            delay_table: table(),
        }
    }

    fn two_nets(s0: Segment, s1: Segment) -> DesignFile {
        DesignFile {
            layers: vec![layer(1, RouteDirection::Horizontal), layer(2, RouteDirection::Vertical)],
            nets: vec![
                Net { id: 0, name: "a".into(), segments: vec![s0.id], sink_load: 1.0 },
                Net { id: 1, name: "b".into(), segments: vec![s1.id], sink_load: 1.0 },
            ],
            segments: vec![s0, s1],
            drivers: vec![driver(0), driver(1)],
            meta: Meta::default(),
        }
    }

    #[test]
    fn minimal_design_loads() {
        let f = DesignFile {
            layers: vec![layer(1, RouteDirection::Horizontal)],
            nets: vec![Net { id: 0, name: "n".into(), segments: vec![0], sink_load: 2.0 }],
            segments: vec![seg(0, 0, 1, (0.0, 0.0), (10.0, 0.0))],
            drivers: vec![driver(0)],
            meta: Meta::default(),
        };
        let text = serde_json::to_string(&f).unwrap();
        let d = parse_design(&text).unwrap();
        assert_eq!(d.nets().len(), 1);
    }

    #[test]
    fn missing_layer_is_named() {
        let mut f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (10.0, 0.0)),
            seg(1, 1, 1, (0.0, 1.0), (10.0, 1.0)),
        );
        f.segments[1].layer_id = 9;
        let err = Design::new(f).unwrap_err();
        let LayoutError::Invalid(v) = err else { panic!() };
        assert!(v.iter().any(|v| v.to_string().contains("segment 1") && v.to_string().contains("layer 9")));
    }

    #[test]
    fn all_violations_are_reported() {
        let mut f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (10.0, 5.0)),
            seg(1, 1, 7, (0.0, 1.0), (10.0, 1.0)),
        );
        f.drivers.pop();
        f.layers[0].m_eps0 = 0.5;
        let LayoutError::Invalid(v) = Design::new(f).unwrap_err() else { panic!() };
        assert!(v.len() >= 4, "{v:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (10.0, 0.0)),
            seg(1, 1, 1, (0.0, 1.0), (10.0, 1.0)),
        );
        let mut v = serde_json::to_value(&f).unwrap();
        v["segments"][0]["colour"] = serde_json::json!("red");
        let err = parse_design(&v.to_string()).unwrap_err();
        assert!(matches!(err, LayoutError::Parse { .. }), "{err}");
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn broken_chain_rejected() {
        let mut f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (10.0, 0.0)),
            seg(1, 1, 1, (0.0, 1.0), (10.0, 1.0)),
        );
        f.segments.push(seg(2, 0, 2, (11.0, 0.0), (11.0, 4.0)));
        f.nets[0].segments.push(2);
        let LayoutError::Invalid(v) = Design::new(f).unwrap_err() else { panic!() };
        assert!(v[0].to_string().contains("does not end"));
    }

    #[test]
    fn overlapping_parallel_pair() {
        // Width 0.05 each: center distance 0.15 gives 0.10 edge spacing.
        let f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (20.0, 0.0)),
            seg(1, 1, 1, (5.0, 0.15), (30.0, 0.15)),
        );
        let d = Design::new(f).unwrap();
        let pairs = extract_coupling_pairs(&d, 0.5);
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].l_si - 15.0).abs() < 1e-12);
        assert!((pairs[0].w_si - 0.10).abs() < 1e-12);
    }

    #[test]
    fn crossing_segments_do_not_couple() {
        let f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (20.0, 0.0)),
            seg(1, 1, 2, (10.0, -5.0), (10.0, 5.0)),
        );
        let d = Design::new(f).unwrap();
        assert!(extract_coupling_pairs(&d, 0.5).is_empty());
    }

    #[test]
    fn spacing_beyond_threshold_excluded() {
        let f = two_nets(
            seg(0, 0, 1, (0.0, 0.0), (20.0, 0.0)),
            seg(1, 1, 1, (0.0, 0.65), (20.0, 0.65)),
        );
        let d = Design::new(f).unwrap();
        assert!(extract_coupling_pairs(&d, 0.5).is_empty());
        assert_eq!(extract_coupling_pairs(&d, 0.7).len(), 1);
    }

    #[test]
    fn coupling_capacitance_formula() {
        let l = layer(1, RouteDirection::Horizontal);
        let p = CouplingPair { victim_segment_id: 0, aggressor_segment_id: 1, l_si: 15.0, w_si: 0.10 };
        assert!((coupling_capacitance(&p, &l) - 7.5).abs() < 1e-12);
        let longer = CouplingPair { l_si: 30.0, ..p };
        assert!((coupling_capacitance(&longer, &l) - 15.0).abs() < 1e-12);
        let wider = CouplingPair { w_si: 0.20, ..p };
        assert!((coupling_capacitance(&wider, &l) - 3.75).abs() < 1e-12);
    }

    #[test]
    fn table_lookup_clamps_and_interpolates() {
        let t = table();
        let mid = t.lookup(55.0, 50.5);
        assert!(!mid.clamped);
        assert!((mid.delay - (5.0 + 50.0 + 10.0 + 60.0) / 4.0).abs() < 1e-9);
        let out = t.lookup(500.0, 0.1);
        assert!(out.clamped);
        assert_eq!(out.delay, 10.0);
    }
}
