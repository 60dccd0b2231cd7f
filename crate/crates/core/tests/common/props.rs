//! Structural properties shared by the property tests and the acceptance
//! harness. Each check runs its own deterministic proptest runner.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use xtalk::bench::{generate, GenConfig};
use xtalk::features::{extract_features, pairs_by_victim, Dataset, FeatureContext, Sample};
use xtalk::layout::{design_to_string, extract_coupling_pairs, Point};
use xtalk::model::{
    load_model, model_to_bytes, predict_stage, r_squared, save_model, train_classifier, train_regressor,
    train_two_step, SegmentInput,
};
use xtalk::sta::{net_delay, path_delay, segment_inputs, StageDelay};
use xtalk::window::delta_skew;

use super::{fixture, random_design, rng, small_train_config};

pub type Check = fn() -> Result<(), String>;

pub const ALL: &[(&str, Check)] = &[
    ("net delay is an exact sum", net_delay_exact),
    ("stage assembly is exact", stage_exact),
    ("path delay is an exact sum", path_exact),
    ("FSI pairs contribute nothing", fsi_zero),
    ("skew is antisymmetric", skew_antisymmetric),
    ("features are translation invariant", translation_invariant),
    ("generation is seed deterministic", generation_deterministic),
    ("training is deterministic across pools", training_deterministic),
    ("saved models predict identically", save_load_identical),
    ("trees ignore monotone rescaling", monotone_rescaling),
    ("R² matches brute force", r2_brute_force),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&s, f).map_err(|e| e.to_string())
}

fn ps() -> impl Strategy<Value = f64> {
    -50.0f64..500.0
}

pub fn net_delay_exact() -> Result<(), String> {
    let s = prop::collection::vec((0.0f64..500.0, prop::option::of(ps())), 0..40);
    run(256, s, |segs| {
        let taus: Vec<f64> = segs.iter().map(|x| x.0).collect();
        let deltas: Vec<Option<f64>> = segs.iter().map(|x| x.1).collect();
        let mut want = 0.0;
        for (t, d) in &segs {
            want += t;
            if let Some(d) = d {
                want += d;
            }
        }
        prop_assert_eq!(net_delay(&taus, &deltas).unwrap().to_bits(), want.to_bits());
        prop_assert!(net_delay(&taus, &deltas[..deltas.len().saturating_sub(1)]).is_err() || taus.is_empty());
        Ok(())
    })
}

pub fn stage_exact() -> Result<(), String> {
    let s = (0.0f64..300.0, prop::collection::vec((0.0f64..500.0, prop::option::of(ps())), 1..20));
    run(256, s, |(d_driver, segs)| {
        let ids: Vec<u32> = (1..=segs.len() as u32).collect();
        let taus: Vec<f64> = segs.iter().map(|x| x.0).collect();
        let deltas: Vec<Option<f64>> = segs.iter().map(|x| x.1).collect();
        let st = StageDelay::assemble(7, d_driver, &ids, &taus, &deltas).unwrap();
        prop_assert_eq!(st.d_stage.to_bits(), (d_driver + net_delay(&taus, &deltas).unwrap()).to_bits());
        let mut dt = 0.0;
        for d in deltas.iter().flatten() {
            dt += d;
        }
        prop_assert_eq!(st.delta_total.to_bits(), dt.to_bits());
        prop_assert_eq!(st.segments.iter().filter(|s| s.tsi).count(), deltas.iter().flatten().count());
        Ok(())
    })
}

pub fn path_exact() -> Result<(), String> {
    let s = prop::collection::vec((0.0f64..300.0, 0.0f64..2000.0), 1..30);
    run(256, s, |stages| {
        let built: Vec<StageDelay> = stages
            .iter()
            .enumerate()
            .map(|(i, &(drv, net))| StageDelay::assemble(i as u32, drv, &[1], &[net], &[None]).unwrap())
            .collect();
        let mut want = 0.0;
        for s in &built {
            want += s.d_stage;
        }
        let p = path_delay(built.clone()).unwrap();
        prop_assert_eq!(p.d_path.to_bits(), want.to_bits());
        prop_assert_eq!(p.stages, built);
        Ok(())
    })
}

/// Dropping the pairs the classifier filters out leaves every predicted
/// delay bit-identical.
pub fn fsi_zero() -> Result<(), String> {
    let (labeled, model) = fixture();
    let l = &labeled[2];
    let pairs = &l.oracle.pairs;
    let ctx = FeatureContext::new(&l.design, pairs, l.oracle.summary.w_max);
    let by_victim = pairs_by_victim(pairs);
    let nets: Vec<u32> = l.design.nets().iter().map(|n| n.id).collect();
    let mut dropped = 0usize;
    for &id in &nets {
        let inputs = segment_inputs(&ctx, id, &by_victim);
        let kept: Vec<SegmentInput> = inputs
            .iter()
            .map(|s| SegmentInput {
                pairs: s.pairs.iter().filter(|(_, f)| model.is_tsi(f)).cloned().collect(),
                ..s.clone()
            })
            .collect();
        dropped += inputs.iter().map(|s| s.pairs.len()).sum::<usize>() - kept.iter().map(|s| s.pairs.len()).sum::<usize>();
        let d_driver = ctx.timing(id).d_driver;
        let a = predict_stage(d_driver, &inputs, model);
        let b = predict_stage(d_driver, &kept, model);
        if a.d_net.to_bits() != b.d_net.to_bits() || a.d_stage.to_bits() != b.d_stage.to_bits() {
            return Err(format!("net {id}: {} with FSI pairs, {} without", a.d_stage, b.d_stage));
        }
        let sa = StageDelay::from_prediction(id, &a);
        let sb = StageDelay::from_prediction(id, &b);
        if sa != sb {
            return Err(format!("net {id}: stage breakdown changed"));
        }
    }
    if dropped == 0 {
        return Err("no FSI pairs predicted; check is vacuous".into());
    }
    Ok(())
}

pub fn skew_antisymmetric() -> Result<(), String> {
    run(256, (-5000.0f64..5000.0, -5000.0f64..5000.0), |(a, b)| {
        prop_assert_eq!(delta_skew(a, b), -delta_skew(b, a));
        Ok(())
    })?;
    let (labeled, _) = fixture();
    for l in labeled {
        let by: std::collections::HashMap<(u32, u32), f64> = l
            .oracle
            .labels
            .iter()
            .map(|x| ((x.pair.victim_segment_id, x.pair.aggressor_segment_id), x.dskew))
            .collect();
        for (&(v, a), &d) in &by {
            let r = by.get(&(a, v)).ok_or_else(|| format!("pair {v}-{a} has no reverse label"))?;
            if d != -r {
                return Err(format!("pair {v}-{a}: dskew {d} vs reverse {r}"));
            }
        }
    }
    Ok(())
}

pub fn translation_invariant() -> Result<(), String> {
    run(32, (any::<u64>(), -400i32..400, -400i32..400), |(seed, dx, dy)| {
        let d = random_design(&mut rng(seed), 120);
        let (dx, dy) = (dx as f64 * 0.25, dy as f64 * 0.25);
        let moved = d.map_points(|p| Point::new(p.x + dx, p.y + dy));
        let w = d.default_w_max();
        let a = extract_features(&d, &extract_coupling_pairs(&d, w), w);
        let b = extract_features(&moved, &extract_coupling_pairs(&moved, w), w);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.trace, &y.trace);
            for (p, q) in x.features.to_array().iter().zip(y.features.to_array()) {
                prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0), "{:?} vs {:?}", x.features, y.features);
            }
        }
        Ok(())
    })
}

pub fn generation_deterministic() -> Result<(), String> {
    run(8, any::<u64>(), |seed| {
        let cfg = GenConfig {
            net_count: 120,
            seed,
            ..Default::default()
        };
        let a = design_to_string(&generate(&cfg).unwrap());
        let b = design_to_string(&generate(&cfg).unwrap());
        prop_assert!(a == b);
        Ok(())
    })
}

fn small_dataset() -> Dataset {
    let (labeled, _) = fixture();
    Dataset::new(labeled[..2].iter().flat_map(|l| l.samples.clone()).collect()).split(0.7, 9).unwrap().normalize().unwrap()
}

/// Same seed, same bytes, whatever the thread count.
pub fn training_deterministic() -> Result<(), String> {
    let ds = small_dataset();
    let cfg = small_train_config();
    let train = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| model_to_bytes(&train_two_step(&ds, &cfg).unwrap().0))
    };
    let one = train(1);
    if one != train(1) {
        return Err("two single-threaded runs differ".into());
    }
    if one != train(3) {
        return Err("1 and 3 threads differ".into());
    }
    Ok(())
}

pub fn save_load_identical() -> Result<(), String> {
    let (labeled, model) = fixture();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.model");
    save_model(model, &path).map_err(|e| e.to_string())?;
    let back = load_model(&path).map_err(|e| e.to_string())?;
    if model_to_bytes(&back) != model_to_bytes(model) {
        return Err("model bytes changed on reload".into());
    }
    let l = &labeled[2];
    let pairs = &l.oracle.pairs;
    let ctx = FeatureContext::new(&l.design, pairs, l.oracle.summary.w_max);
    let by_victim = pairs_by_victim(pairs);
    for n in l.design.nets() {
        let inputs = segment_inputs(&ctx, n.id, &by_victim);
        let d = ctx.timing(n.id).d_driver;
        if predict_stage(d, &inputs, model) != predict_stage(d, &inputs, &back) {
            return Err(format!("net {}: predictions differ after reload", n.id));
        }
    }
    Ok(())
}

/// Split thresholds are training values chosen by rank, so a strictly
/// increasing map of every feature yields the same predictions.
pub fn monotone_rescaling() -> Result<(), String> {
    let ds = small_dataset();
    let warp = |s: &Sample| {
        let mut s = s.clone();
        let a = s.features.to_array().map(|x| x * x * x + 3.0 * x);
        s.features = xtalk::features::FeatureVector::from_array(a);
        s
    };
    let warped = Dataset::new(ds.samples().iter().map(warp).collect())
        .split(0.7, 9)
        .unwrap()
        .normalize()
        .unwrap();
    let cfg = small_train_config();
    let (c1, _) = train_classifier(&ds, &cfg.classifier).map_err(|e| e.to_string())?;
    let (c2, _) = train_classifier(&warped, &cfg.classifier).map_err(|e| e.to_string())?;
    let (r1, _) = train_regressor(&ds, &cfg.regressor).map_err(|e| e.to_string())?;
    let (r2, _) = train_regressor(&warped, &cfg.regressor).map_err(|e| e.to_string())?;
    let (s1, s2) = (ds.stats().unwrap(), warped.stats().unwrap());
    for (a, b) in ds.samples().iter().zip(warped.samples()) {
        let (za, zb) = (s1.apply(&a.features), s2.apply(&b.features));
        if c1.vote(&za) != c2.vote(&zb) || r1.predict(&za).to_bits() != r2.predict(&zb).to_bits() {
            return Err(format!("{:?}: predictions differ under rescaling", a.trace));
        }
    }
    Ok(())
}

pub fn r2_brute_force() -> Result<(), String> {
    let s = prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..60);
    run(256, s, |rows| {
        let pred: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let gold: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let mean = gold.iter().sum::<f64>() / gold.len() as f64;
        let mut ss_tot = 0.0;
        let mut ss_res = 0.0;
        for (p, g) in pred.iter().zip(&gold) {
            ss_tot += (g - mean) * (g - mean);
            ss_res += (g - p) * (g - p);
        }
        let want = 1.0 - ss_res / ss_tot;
        prop_assert!((r_squared(&pred, &gold) - want).abs() <= 1e-9 * want.abs().max(1.0));
        prop_assert_eq!(r_squared(&gold, &gold), 1.0);
        Ok(())
    })
}
