//! Synthetic routed designs.
//!
//! Nets are short vertical lead-ins and lead-outs around one horizontal main
//! wire. Coupled nets come in bundles: 2–3 mains on adjacent tracks, each an
//! offset copy of a template with its own overlap window, sharing driver
//! strength, input slew, and sink load like the bits of a bus. Every bundle
//! or lone net gets its own tile, far enough from the others that only
//! bundle members couple.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GenError;
use crate::layout::{
    extract_coupling_pairs, DelayTable, Design, DesignFile, Driver, Layer, Meta, Net, Point,
    RouteDirection, Segment, Transition,
};
use crate::oracle::characterize_driver;

/// Vacuum permittivity (fF/µm).
const EPS0: f64 = 8.854e-3;
/// Effective wire resistivity including size effects (Ω·µm).
const RHO: f64 = 0.03;
/// Fringe term added to the plate term of ground capacitance.
const FRINGE: f64 = 1.5;
/// Sidewall coupling factor (sidewall plus fringe over the plate estimate).
const SIDEWALL: f64 = 1.5;

/// Pins are reached from the lowest vertical layer and leave on the
/// highest one.
const LEAD_IN_LAYER: u32 = 2;

const TABLE_SLEWS: [f64; 7] = [5.0, 10.0, 20.0, 40.0, 80.0, 160.0, 320.0];
const TABLE_LOADS: [f64; 10] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 400.0, 800.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub name: String,
    /// Metal layers; odd layers route horizontally, even vertically.
    pub layer_count: usize,
    pub net_count: usize,
    /// Main wire length range (µm).
    pub wire_length: (f64, f64),
    /// Lead-in/lead-out length range (µm).
    pub lead_length: (f64, f64),
    /// Probability that a net has a lead-in (and, separately, a lead-out).
    pub lead_probability: f64,
    /// Nets per bundle.
    pub bundle_size: (usize, usize),
    /// Shortest main in a bundle relative to its template.
    pub min_overlap: f64,
    /// Edge-to-edge spacing between bundle tracks (µm).
    pub spacing: (f64, f64),
    /// Arrival jitter within a launch cycle (ps). When absent the range is
    /// `[0, 2 × max transition + max RC]` estimated from the other knobs.
    pub arrival: Option<(f64, f64)>,
    /// Each driver launches in one of this many clock cycles, chosen
    /// uniformly; its input arrival is `cycle × clock_period + jitter`.
    pub cycles: usize,
    /// Launch cycle spacing (ps).
    pub clock_period: f64,
    /// Driver resistances to choose from (kΩ).
    pub drive_strengths: Vec<f64>,
    /// Driver input transition range (ps).
    pub input_slew: (f64, f64),
    /// Sink load range (fF).
    pub sink_load: (f64, f64),
    /// Target fraction of segments that end up in a coupling pair.
    pub coupled_fraction: f64,
    /// Extraction distance the coupled fraction is measured with; the
    /// design default (3 × minimum spacing) when absent (µm).
    pub w_max: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            name: "synth".into(),
            layer_count: 4,
            net_count: 500,
            wire_length: (80.0, 400.0),
            lead_length: (5.0, 40.0),
            lead_probability: 0.7,
            bundle_size: (2, 3),
            min_overlap: 0.5,
            spacing: (0.064, 0.128),
            arrival: Some((0.0, 30.0)),
            cycles: 4,
            clock_period: 2000.0,
            drive_strengths: vec![0.5, 1.0, 2.0],
            input_slew: (15.0, 60.0),
            sink_load: (1.0, 5.0),
            coupled_fraction: 0.3,
            w_max: None,
        }
    }
}

fn range_ok(name: &str, r: (f64, f64), min: f64) -> Result<(), GenError> {
    if !(r.0 >= min) || !(r.1 >= r.0) || !r.1.is_finite() {
        return Err(GenError::Invalid(format!(
            "{name} must satisfy {min} <= min <= max, got [{}, {}]",
            r.0, r.1
        )));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.layer_count < 2 {
            return Err(GenError::Invalid("layer_count must be >= 2".into()));
        }
        if self.net_count == 0 {
            return Err(GenError::Invalid("net_count must be >= 1".into()));
        }
        range_ok("wire_length", self.wire_length, f64::MIN_POSITIVE)?;
        range_ok("lead_length", self.lead_length, f64::MIN_POSITIVE)?;
        range_ok("spacing", self.spacing, f64::MIN_POSITIVE)?;
        range_ok("input_slew", self.input_slew, f64::MIN_POSITIVE)?;
        range_ok("sink_load", self.sink_load, 0.0)?;
        if let Some(a) = self.arrival {
            range_ok("arrival", a, f64::MIN)?;
        }
        if self.cycles == 0 || !(self.clock_period >= 0.0) {
            return Err(GenError::Invalid("need cycles >= 1 and clock_period >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lead_probability) {
            return Err(GenError::Invalid("lead_probability must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.coupled_fraction) {
            return Err(GenError::Invalid("coupled_fraction must lie in [0, 1]".into()));
        }
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return Err(GenError::Invalid("min_overlap must lie in (0, 1]".into()));
        }
        if self.bundle_size.0 < 2 || self.bundle_size.1 < self.bundle_size.0 {
            return Err(GenError::Invalid("bundle_size must satisfy 2 <= min <= max".into()));
        }
        if self.drive_strengths.is_empty() || self.drive_strengths.iter().any(|r| !(*r > 0.0)) {
            return Err(GenError::Invalid("drive_strengths must be non-empty and positive".into()));
        }
        if self.coupled_fraction > 0.0 {
            if self.net_count < 2 {
                return Err(GenError::Infeasible(format!(
                    "coupled_fraction {} needs at least two nets (net_count = {})",
                    self.coupled_fraction, self.net_count
                )));
            }
            if let Some(w) = self.w_max {
                if self.spacing.0 > w {
                    return Err(GenError::Infeasible(format!(
                        "coupled_fraction {} but every spacing in [{}, {}] exceeds w_max {}",
                        self.coupled_fraction, self.spacing.0, self.spacing.1, w
                    )));
                }
            }
        }
        Ok(())
    }

    /// Arrival range used when none is configured.
    pub fn default_arrival(&self) -> (f64, f64) {
        let layers = make_layers(self.layer_count);
        let worst_c = layers
            .iter()
            .map(|l| l.c_area + l.c_coup_unit / self.spacing.0 * 2.0)
            .fold(0.0, f64::max)
            * (self.wire_length.1 + 2.0 * self.lead_length.1)
            + self.sink_load.1;
        let r = self.drive_strengths.iter().copied().fold(0.0, f64::max);
        (0.0, 2.0 * self.input_slew.1 + r * worst_c)
    }
}

fn make_layers(count: usize) -> Vec<Layer> {
    (1..=count as u32)
        .map(|id| {
            // Pairs of layers share a geometry; each pair up is 25% thicker.
            let tier = ((id - 1) / 2) as f64;
            let scale = 1.25f64.powf(tier);
            let m_w = 0.064 * scale;
            let m_t = 0.128 * scale;
            let m_h = 0.1 * scale;
            let m_eps0 = 3.0 - 0.1 * tier;
            Layer {
                id,
                direction: if id % 2 == 1 {
                    RouteDirection::Horizontal
                } else {
                    RouteDirection::Vertical
                },
                m_w,
                m_t,
                m_h,
                m_eps0,
                r_sheet: RHO / m_t,
                c_area: EPS0 * m_eps0 * (2.0 * m_w / m_h + FRINGE),
                c_coup_unit: EPS0 * m_eps0 * m_t * SIDEWALL,
            }
        })
        .collect()
}

/// Which nets get leads, and which are bundled, before any geometry.
struct Topology {
    lead_in: Vec<bool>,
    lead_out: Vec<bool>,
    bundles: Vec<Vec<usize>>,
    singles: Vec<usize>,
}

fn plan(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<Topology, GenError> {
    let n = cfg.net_count;
    let mut lead_in: Vec<bool> = (0..n).map(|_| rng.gen_bool(cfg.lead_probability)).collect();
    let mut lead_out: Vec<bool> = (0..n).map(|_| rng.gen_bool(cfg.lead_probability)).collect();
    let segs = |li: &[bool], lo: &[bool]| -> usize {
        n + li.iter().filter(|&&b| b).count() + lo.iter().filter(|&&b| b).count()
    };
    // Only mains couple, so a high target needs nets without leads.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut drop = order.iter().flat_map(|&i| [(i, true), (i, false)]);
    while (n as f64) < cfg.coupled_fraction * segs(&lead_in, &lead_out) as f64 {
        match drop.next() {
            Some((i, true)) => lead_in[i] = false,
            Some((i, false)) => lead_out[i] = false,
            None => break,
        }
    }
    let total = segs(&lead_in, &lead_out);
    let want = ((cfg.coupled_fraction * total as f64).round() as usize).min(n);
    if cfg.coupled_fraction > 0.0 && want < 2 {
        return Err(GenError::Infeasible(format!(
            "coupled_fraction {} of {} segments is fewer than one coupled pair; raise net_count",
            cfg.coupled_fraction, total
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (bundled, singles) = order.split_at(want);
    let mut bundles: Vec<Vec<usize>> = Vec::new();
    let mut rest = bundled;
    while !rest.is_empty() {
        let k = rng.gen_range(cfg.bundle_size.0..=cfg.bundle_size.1).min(rest.len());
        let (b, r) = rest.split_at(k);
        if b.len() < 2 {
            bundles.last_mut().expect("want >= 2").extend_from_slice(b);
        } else {
            bundles.push(b.to_vec());
        }
        rest = r;
    }
    let mut singles = singles.to_vec();
    singles.sort_unstable();
    Ok(Topology {
        lead_in,
        lead_out,
        bundles,
        singles,
    })
}

struct Builder {
    segments: Vec<Segment>,
    nets: Vec<Net>,
    drivers: Vec<Driver>,
}

/// Electrical character shared by the nets of one bundle.
#[derive(Clone, Copy)]
struct Flavor {
    r_drive: f64,
    s_in: f64,
    sink_load: f64,
    main_layer: u32,
}

/// Generates one design. The same config always yields the same design.
pub fn generate(cfg: &GenConfig) -> Result<Design, GenError> {
    cfg.validate()?;
    let mut last = None;
    // A different draw is tried when the measured coupled fraction misses.
    for attempt in 0..8u64 {
        let design = generate_once(cfg, cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
        let frac = coupled_fraction(&design, cfg.w_max);
        if (frac - cfg.coupled_fraction).abs() <= 0.1 * cfg.coupled_fraction + 1e-12 {
            return Ok(design);
        }
        last = Some(frac);
    }
    Err(GenError::Infeasible(format!(
        "coupled_fraction target {} not reached (measured {:.4}); check spacing {:?} against w_max {:?}",
        cfg.coupled_fraction,
        last.unwrap_or(0.0),
        cfg.spacing,
        cfg.w_max
    )))
}

/// Fraction of segments in at least one coupling pair.
pub fn coupled_fraction(design: &Design, w_max: Option<f64>) -> f64 {
    let w = w_max.unwrap_or_else(|| design.default_w_max());
    let pairs = extract_coupling_pairs(design, w);
    let touched: HashSet<u32> = pairs
        .iter()
        .flat_map(|p| [p.victim_segment_id, p.aggressor_segment_id])
        .collect();
    touched.len() as f64 / design.segments().len() as f64
}

fn generate_once(cfg: &GenConfig, seed: u64) -> Result<Design, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = make_layers(cfg.layer_count);
    let topo = plan(cfg, &mut rng)?;
    let arrival = cfg.arrival.unwrap_or_else(|| cfg.default_arrival());

    let mut tables: BTreeMap<u64, DelayTable> = BTreeMap::new();
    for &r in &cfg.drive_strengths {
        tables.insert(r.to_bits(), characterize_driver(r, &TABLE_SLEWS, &TABLE_LOADS)?);
    }
    let horizontal: Vec<u32> = layers.iter().filter(|l| l.id % 2 == 1).map(|l| l.id).collect();
    let lead_out_layer = (cfg.layer_count as u32) & !1;

    // Tiles: wide enough for the longest main plus leads, tall enough that
    // leads of vertically adjacent tiles never share a span.
    let tile_w = cfg.wire_length.1 + 20.0;
    let tile_h = 2.0 * cfg.lead_length.1 + 20.0;
    let cols = ((cfg.net_count as f64).sqrt().ceil() as usize).max(1);

    let mut groups: Vec<Vec<usize>> = topo.bundles.clone();
    groups.extend(topo.singles.iter().map(|&i| vec![i]));
    groups.sort_by_key(|g| g[0]);

    let mut b = Builder {
        segments: Vec::new(),
        nets: Vec::new(),
        drivers: Vec::new(),
    };
    let mut placed: Vec<(usize, Vec<Segment>, Driver, f64)> = Vec::with_capacity(cfg.net_count);
    for (tile, group) in groups.iter().enumerate() {
        let origin = Point::new((tile % cols) as f64 * tile_w, (tile / cols) as f64 * tile_h + tile_h / 2.0);
        let flavor = Flavor {
            r_drive: *cfg.drive_strengths.choose(&mut rng).expect("validated"),
            s_in: rng.gen_range(cfg.input_slew.0..=cfg.input_slew.1),
            sink_load: rng.gen_range(cfg.sink_load.0..=cfg.sink_load.1),
            main_layer: *horizontal.choose(&mut rng).expect("at least one horizontal layer"),
        };
        let main_layer = &layers[flavor.main_layer as usize - 1];
        let template = rng.gen_range(cfg.wire_length.0..=cfg.wire_length.1);
        let mut y = origin.y;
        let mut used_x: Vec<f64> = Vec::new();
        for (k, &net) in group.iter().enumerate() {
            if k > 0 {
                y += main_layer.m_w + rng.gen_range(cfg.spacing.0..=cfg.spacing.1);
            }
            // Every main spans the middle `min_overlap` of the template, so
            // bundle neighbors always overlap. Lead x positions are kept
            // apart so leads of one bundle never run side by side.
            let slack = 0.5 * (1.0 - cfg.min_overlap) * template;
            let mut window = None;
            for _ in 0..100 {
                let a = origin.x + 10.0 + rng.gen_range(0.0..=slack);
                let b = origin.x + 10.0 + template - rng.gen_range(0.0..=slack);
                if used_x.iter().all(|u| (u - a).abs() > 1.0 && (u - b).abs() > 1.0) {
                    window = Some((a, b - a));
                    break;
                }
            }
            let (x0, len) = window.unwrap_or_else(|| {
                let nudge = 2.0 * k as f64;
                (origin.x + 10.0 + nudge, template - 2.0 * nudge)
            });
            used_x.extend([x0, x0 + len]);
            let mut segs = Vec::new();
            let mut at = Point::new(x0, y);
            if topo.lead_in[net] {
                let l = rng.gen_range(cfg.lead_length.0..=cfg.lead_length.1);
                let start = Point::new(x0, y - l);
                segs.push((LEAD_IN_LAYER, start, at));
            }
            let end = Point::new(x0 + len, y);
            segs.push((flavor.main_layer, at, end));
            at = end;
            if topo.lead_out[net] {
                let l = rng.gen_range(cfg.lead_length.0..=cfg.lead_length.1);
                segs.push((lead_out_layer, at, Point::new(at.x, at.y + l)));
            }
            let segments = segs
                .into_iter()
                .map(|(layer, start, end)| Segment {
                    id: 0,
                    net_id: 0,
                    layer_id: layer,
                    start,
                    end,
                    width: None,
                })
                .collect();
            let direction = if rng.gen_bool(0.5) { Transition::Rise } else { Transition::Fall };
            let driver = Driver {
                net_id: 0,
                r_drive: flavor.r_drive,
                s_in: flavor.s_in,
                direction,
                at_in: rng.gen_range(0..cfg.cycles) as f64 * cfg.clock_period
                    + rng.gen_range(arrival.0..=arrival.1),
                delay_table: tables[&flavor.r_drive.to_bits()].clone(),
            };
            placed.push((net, segments, driver, flavor.sink_load));
        }
    }
    placed.sort_by_key(|p| p.0);
    let mut next_seg = 1u32;
    for (net, segs, mut driver, sink_load) in placed {
        let id = net as u32 + 1;
        let mut ids = Vec::new();
        for mut s in segs {
            s.id = next_seg;
            s.net_id = id;
            ids.push(next_seg);
            next_seg += 1;
            b.segments.push(s);
        }
        driver.net_id = id;
        b.drivers.push(driver);
        b.nets.push(Net {
            id,
            name: format!("n{id}"),
            segments: ids,
            sink_load,
        });
    }
    let file = DesignFile {
        layers,
        nets: b.nets,
        segments: b.segments,
        drivers: b.drivers,
        meta: Meta {
            name: cfg.name.clone(),
            seed: Some(cfg.seed),
            origin: Some("generated".into()),
        },
    };
    Ok(Design::new(file)?)
}

/// Per-design record in a suite manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub nets: usize,
    pub segments: usize,
    pub pairs: usize,
    pub coupled_fraction: f64,
    /// Filled in once the design has been labeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tsi_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub config: GenConfig,
    pub designs: Vec<ManifestEntry>,
}

/// Seed of the `index`-th design of a suite.
pub fn design_seed(suite_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(suite_seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// `count` designs from `base` with per-design seeds derived from `seed`,
/// named `<base name>-<index>`.
pub fn generate_suite(
    base: &GenConfig,
    count: usize,
    seed: u64,
) -> Result<(Vec<Design>, SuiteManifest), GenError> {
    use rayon::prelude::*;
    let designs: Vec<Design> = (0..count)
        .into_par_iter()
        .map(|i| {
            let cfg = GenConfig {
                seed: design_seed(seed, i),
                name: format!("{}-{i:03}", base.name),
                ..base.clone()
            };
            generate(&cfg)
        })
        .collect::<Result<_, _>>()?;
    let entries = designs
        .iter()
        .map(|d| {
            let w = base.w_max.unwrap_or_else(|| d.default_w_max());
            ManifestEntry {
                name: d.name().to_string(),
                seed: d.meta().seed.unwrap_or_default(),
                nets: d.nets().len(),
                segments: d.segments().len(),
                pairs: extract_coupling_pairs(d, w).len(),
                coupled_fraction: coupled_fraction(d, base.w_max),
                tsi_fraction: None,
            }
        })
        .collect();
    Ok((
        designs,
        SuiteManifest {
            seed,
            config: base.clone(),
            designs: entries,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::design_to_string;

    fn small() -> GenConfig {
        GenConfig {
            net_count: 60,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = design_to_string(&generate(&small()).unwrap());
        let b = design_to_string(&generate(&small()).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_coupling_has_no_pairs() {
        let d = generate(&GenConfig {
            coupled_fraction: 0.0,
            ..small()
        })
        .unwrap();
        assert!(extract_coupling_pairs(&d, d.default_w_max()).is_empty());
    }

    #[test]
    fn spacing_beyond_w_max_is_infeasible() {
        let cfg = GenConfig {
            spacing: (0.5, 0.6),
            w_max: Some(0.2),
            ..small()
        };
        match generate(&cfg) {
            Err(GenError::Infeasible(m)) => {
                assert!(m.contains("coupled_fraction") && m.contains("w_max"), "{m}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layers_are_physical() {
        for l in make_layers(4) {
            assert!(l.r_sheet > 0.0 && l.c_area > 0.0 && l.c_coup_unit > 0.0);
        }
    }
}
