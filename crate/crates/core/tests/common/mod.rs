#![allow(dead_code)]

pub mod props;

use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xtalk::bench::{generate_suite, GenConfig};
use xtalk::features::{attach_labels, extract_features, Dataset, Sample};
use xtalk::layout::{
    CouplingPair, DelayTable, Design, DesignFile, Driver, Layer, Meta, Net, Point, RouteDirection,
    Segment, Transition,
};
use xtalk::model::{train_two_step, ClassifierConfig, RegressorConfig, TrainConfig, TwoStepModel};
use xtalk::window::{oracle_label_design, LabelConfig, OracleLabels};

pub fn table() -> DelayTable {
    DelayTable {
        input_slew: vec![10.0, 100.0],
        load: vec![1.0, 200.0],
        delay: vec![vec![5.0, 60.0], vec![12.0, 75.0]],
        output_slew: vec![vec![8.0, 90.0], vec![20.0, 110.0]],
    }
}

pub fn layer(id: u32, direction: RouteDirection) -> Layer {
    Layer {
        id,
        direction,
        m_w: 0.0625,
        m_t: 0.125,
        m_h: 0.1,
        m_eps0: 3.0,
        r_sheet: 0.3,
        c_area: 0.1,
        c_coup_unit: 0.005,
    }
}

/// Nets of one or two segments scattered on a coarse dyadic grid so that
/// shared tracks, touching spans and exact-threshold spacings all occur and
/// translations by multiples of 1/4 are exact.
pub fn random_design(rng: &mut impl Rng, max_segments: usize) -> Design {
    let mut nets = Vec::new();
    let mut segments = Vec::new();
    let mut drivers = Vec::new();
    let mut next_seg = 1u32;
    let mut net_id = 1u32;
    while segments.len() < max_segments {
        let two = segments.len() + 2 <= max_segments && rng.gen_bool(0.3);
        let horizontal = rng.gen_bool(0.5);
        let track = rng.gen_range(0..40) as f64 * 0.03125;
        let lo = rng.gen_range(0..80) as f64 * 0.5;
        let hi = lo + rng.gen_range(1..30) as f64 * 0.5;
        let (start, end) = if horizontal {
            (Point::new(lo, track), Point::new(hi, track))
        } else {
            (Point::new(track, lo), Point::new(track, hi))
        };
        let width = rng.gen_bool(0.2).then(|| rng.gen_range(1..4) as f64 * 0.015625);
        let mut ids = vec![next_seg];
        segments.push(Segment {
            id: next_seg,
            net_id,
            layer_id: rng.gen_range(1..=2),
            start,
            end,
            width,
        });
        next_seg += 1;
        if two {
            let len = rng.gen_range(1..20) as f64 * 0.5;
            let end2 = if horizontal {
                Point::new(end.x, end.y + len)
            } else {
                Point::new(end.x + len, end.y)
            };
            ids.push(next_seg);
            segments.push(Segment {
                id: next_seg,
                net_id,
                layer_id: rng.gen_range(1..=2),
                start: end,
                end: end2,
                width: None,
            });
            next_seg += 1;
        }
        nets.push(Net {
            id: net_id,
            name: format!("n{net_id}"),
            segments: ids,
            sink_load: 2.0,
        });
        drivers.push(Driver {
            net_id,
            r_drive: 1.0,
            s_in: 20.0,
            direction: Transition::Rise,
            at_in: rng.gen_range(0.0..100.0),
            delay_table: table(),
        });
        net_id += 1;
    }
    Design::new(DesignFile {
        layers: vec![layer(1, RouteDirection::Horizontal), layer(2, RouteDirection::Vertical)],
        nets,
        segments,
        drivers,
        meta: Meta {
            name: "random".into(),
            seed: None,
            origin: None,
        },
    })
    .expect("random design is valid")
}

/// Every segment pair checked directly: same layer, different nets, parallel,
/// spans overlapping by a positive length and edge spacing in (0, w_max].
pub fn brute_force_pairs(design: &Design, w_max: f64) -> Vec<CouplingPair> {
    let segs = design.segments();
    let mut out = Vec::new();
    for (i, a) in segs.iter().enumerate() {
        for b in &segs[i + 1..] {
            if a.layer_id != b.layer_id || a.net_id == b.net_id {
                continue;
            }
            let ha = a.start.y == a.end.y;
            let hb = b.start.y == b.end.y;
            if ha != hb {
                continue;
            }
            let (alo, ahi, at) = if ha {
                (a.start.x.min(a.end.x), a.start.x.max(a.end.x), a.start.y)
            } else {
                (a.start.y.min(a.end.y), a.start.y.max(a.end.y), a.start.x)
            };
            let (blo, bhi, bt) = if hb {
                (b.start.x.min(b.end.x), b.start.x.max(b.end.x), b.start.y)
            } else {
                (b.start.y.min(b.end.y), b.start.y.max(b.end.y), b.start.x)
            };
            let overlap = ahi.min(bhi) - alo.max(blo);
            let lw = design.layer(a.layer_id).m_w;
            let wa = a.width.unwrap_or(lw);
            let wb = b.width.unwrap_or(lw);
            let spacing = (at - bt).abs() - (wa / 2.0 + wb / 2.0);
            if overlap > 0.0 && spacing > 0.0 && spacing <= w_max {
                let (v, g) = if a.id < b.id { (a.id, b.id) } else { (b.id, a.id) };
                out.push(CouplingPair {
                    victim_segment_id: v,
                    aggressor_segment_id: g,
                    l_si: overlap,
                    w_si: spacing,
                });
            }
        }
    }
    out.sort_by_key(|p| (p.victim_segment_id, p.aggressor_segment_id));
    out
}

pub fn same_pairs(a: &[CouplingPair], b: &[CouplingPair], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{} pairs vs {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        let ids = (x.victim_segment_id, x.aggressor_segment_id) == (y.victim_segment_id, y.aggressor_segment_id);
        if !ids || (x.l_si - y.l_si).abs() > tol || (x.w_si - y.w_si).abs() > tol {
            return Err(format!("{x} vs {y}"));
        }
    }
    Ok(())
}

pub struct Labeled {
    pub design: Design,
    pub oracle: OracleLabels,
    pub samples: Vec<Sample>,
}

pub fn label(design: Design, golden: bool) -> Labeled {
    let oracle = oracle_label_design(&design, &LabelConfig { golden, ..Default::default() }).expect("oracle");
    let mut samples = extract_features(&design, &oracle.pairs, oracle.summary.w_max);
    attach_labels(&mut samples, &oracle.labels, &oracle.summary).expect("labels attach");
    Labeled { design, oracle, samples }
}

pub fn small_train_config() -> TrainConfig {
    TrainConfig {
        classifier: ClassifierConfig {
            n_trees: 20,
            ..Default::default()
        },
        regressor: RegressorConfig {
            n_trees: 60,
            min_samples_leaf: 5,
            ..Default::default()
        },
        nosi: RegressorConfig {
            n_trees: 60,
            min_samples_leaf: 5,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Three labeled 500-net designs and a small model trained on the first two.
pub fn fixture() -> &'static (Vec<Labeled>, TwoStepModel) {
    static F: OnceLock<(Vec<Labeled>, TwoStepModel)> = OnceLock::new();
    F.get_or_init(|| {
        let base = GenConfig {
            net_count: 500,
            name: "fx".into(),
            ..Default::default()
        };
        let (designs, _) = generate_suite(&base, 3, 5).expect("suite");
        let labeled: Vec<Labeled> = designs.into_iter().map(|d| label(d, true)).collect();
        let train: Vec<Sample> = labeled[..2].iter().flat_map(|l| l.samples.clone()).collect();
        let ds = Dataset::new(train).split(0.8, 3).unwrap().normalize().unwrap();
        let (model, _) = train_two_step(&ds, &small_train_config()).expect("training");
        (labeled, model)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
