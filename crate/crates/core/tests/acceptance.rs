//! Prints one PASS/FAIL line per acceptance criterion. Exits non-zero on a
//! failure only when `XTALK_ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;

use xtalk::bench::{generate_suite, GenConfig};
use xtalk::features::{attach_labels, extract_features, Dataset, Sample, Split};
use xtalk::layout::{extract_coupling_pairs, Design, Transition};
use xtalk::model::{train_two_step, TrainConfig, TrainReport, TwoStepModel};
use xtalk::oracle::{
    build_network, default_dt, measure_delay, simulate_transient, sweep_skew, Alignment, Drive, RampStimulus,
    RcNetwork, SweepConfig, SweepRow, VDD,
};
use xtalk::sta::build_report;
use xtalk::window::{oracle_label_design, window_labels, LabelConfig, OracleLabels};

use common::{brute_force_pairs, props, random_design, rng, same_pairs};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, name, pass, detail }
}

fn lumped_rc() -> Outcome {
    let t = Instant::now();
    let mut net = RcNetwork::with_nodes(1);
    net.ground_cap[0] = 100.0;
    let step = RampStimulus {
        t0: 10.0,
        transition: 0.0,
        direction: Transition::Rise,
        v_low: 0.0,
        v_high: VDD,
    };
    net.add_source(0, 1000.0, Drive::Ramp(step));
    let exact = std::f64::consts::LN_2 * 100.0;
    let dt = default_dt(&net);
    let r = simulate_transient(&net, dt, 1000.0).and_then(|w| measure_delay(&w, 0, 0, VDD));
    let secs = t.elapsed().as_secs_f64();
    match r {
        Ok(m) => {
            let delay = m.t_out - step.t0;
            let err = (delay - exact) / exact;
            outcome(
                1,
                "lumped RC delay",
                err.abs() < 0.01 && secs < 1.0,
                format!("{delay:.3} ps vs {exact:.3} ps ({:+.3}%), dt {dt:.3} ps, {secs:.2} s", 100.0 * err),
            )
        }
        Err(e) => outcome(1, "lumped RC delay", false, e.to_string()),
    }
}

/// The step the oracle would pick for the two-net configuration.
fn sweep_dt(cfg: &SweepConfig, aggressor_at: f64) -> f64 {
    let d = cfg.design(aggressor_at).unwrap();
    let pairs = cfg.pairs();
    let mut b = build_network(d.net(1), &[d.net(2)], &pairs, &d, cfg.segments_per_wire).unwrap();
    for n in &b.nets {
        let drv = d.driver(n.net);
        b.network.sources[n.source].drive = Drive::Ramp(RampStimulus::centered(100.0, drv.s_in, drv.direction));
    }
    default_dt(&b.network)
}

fn max_rel(a: &[SweepRow], b: &[SweepRow]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| [(x.d_net_v, y.d_net_v), (x.d_net_a, y.d_net_a)])
        .map(|(x, y)| ((x - y) / x).abs())
        .fold(0.0, f64::max)
}

fn convergence() -> Outcome {
    let t = Instant::now();
    let run = || -> Result<(f64, f64), String> {
        let mut worst_spw = 0.0f64;
        let mut worst_dt = 0.0f64;
        for alignment in [Alignment::Opposite, Alignment::Same] {
            for at in [60.0, 90.0, 100.0, 110.0, 140.0] {
                let base = SweepConfig {
                    alignment,
                    ..Default::default()
                };
                let fine = SweepConfig {
                    segments_per_wire: 16,
                    ..base.clone()
                };
                let dt = sweep_dt(&base, at);
                let half = SweepConfig {
                    dt: Some(dt / 2.0),
                    ..base.clone()
                };
                let full = SweepConfig { dt: Some(dt), ..base.clone() };
                let s = |c: &SweepConfig| sweep_skew(c, at, at, 1.0).map_err(|e| e.to_string());
                worst_spw = worst_spw.max(max_rel(&s(&base)?, &s(&fine)?));
                worst_dt = worst_dt.max(max_rel(&s(&full)?, &s(&half)?));
            }
        }
        Ok((worst_spw, worst_dt))
    };
    let secs = |t: Instant| t.elapsed().as_secs_f64();
    match run() {
        Ok((spw, dt)) => {
            let s = secs(t);
            outcome(
                2,
                "discretization convergence",
                spw < 0.01 && dt < 0.002 && s < 10.0,
                format!("8→16 sections {:.4}%, dt/2 {:.4}%, {s:.1} s", 100.0 * spw, 100.0 * dt),
            )
        }
        Err(e) => outcome(2, "discretization convergence", false, e),
    }
}

fn skew_sensitivity() -> Outcome {
    let t = Instant::now();
    let opp = SweepConfig::default();
    let same = SweepConfig {
        alignment: Alignment::Same,
        ..Default::default()
    };
    let (a, b) = match (sweep_skew(&opp, 0.0, 200.0, 5.0), sweep_skew(&same, 0.0, 200.0, 5.0)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(3, "skew sensitivity", false, e.to_string()),
    };
    let peak = a.iter().max_by(|x, y| x.delta.abs().total_cmp(&y.delta.abs())).unwrap();
    let ok_a = peak.delta > 0.0 && peak.dskew.abs() <= opp.s_in;
    let zero = b.iter().min_by(|x, y| x.dskew.abs().total_cmp(&y.dskew.abs())).unwrap();
    let ok_b = zero.delta < 0.0;
    let ends = [a[0].delta.abs(), a[a.len() - 1].delta.abs()];
    let ok_c = ends.iter().all(|&e| e <= 0.1 * peak.delta.abs());
    let tail = ends[0].min(ends[1]);
    let range = peak.delta.abs() - tail;
    let mut steepest = 0.0f64;
    for (i, x) in a.iter().enumerate() {
        for y in &a[i + 1..] {
            if (x.dskew - y.dskew).abs() <= 15.0 + 1e-9 {
                steepest = steepest.max((x.delta.abs() - y.delta.abs()).abs());
            }
        }
    }
    let ok_d = steepest >= 0.5 * range;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        3,
        "skew sensitivity sweep",
        ok_a && ok_b && ok_c && ok_d && secs < 60.0,
        format!(
            "(a) peak {:.2} ps at Δskew {:.1} ps {}; (b) same-direction {:.2} ps at Δskew {:.1} ps {}; \
             (c) ends {:.2}/{:.2} ps {}; (d) 15 ps change {:.0}% of range {}; {secs:.1} s",
            peak.delta,
            peak.dskew,
            mark(ok_a),
            zero.delta,
            zero.dskew,
            mark(ok_b),
            ends[0],
            ends[1],
            mark(ok_c),
            100.0 * steepest / range,
            mark(ok_d),
        ),
    )
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

struct Suite {
    designs: Vec<Design>,
    oracle: Vec<OracleLabels>,
    label_secs: f64,
    ds: Dataset,
    model: TwoStepModel,
    report: TrainReport,
    train_secs: f64,
}

fn build_suite() -> Result<Suite, String> {
    let t = Instant::now();
    let base = GenConfig {
        net_count: 2000,
        name: "acc".into(),
        ..Default::default()
    };
    let (designs, _) = generate_suite(&base, 30, 11).map_err(|e| e.to_string())?;
    let oracle: Vec<OracleLabels> = designs
        .par_iter()
        .map(|d| oracle_label_design(d, &LabelConfig::default()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut samples: Vec<Sample> = Vec::new();
    for (d, o) in designs.iter().zip(&oracle) {
        let mut s = extract_features(d, &o.pairs, o.summary.w_max);
        attach_labels(&mut s, &o.labels, &o.summary).map_err(|e| e.to_string())?;
        samples.extend(s);
    }
    let label_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let ds = Dataset::new(samples)
        .split_by_design(0.7, 1)
        .and_then(|d| d.normalize())
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        onestep: true,
        ..Default::default()
    };
    let (model, report) = train_two_step(&ds, &cfg).map_err(|e| e.to_string())?;
    Ok(Suite {
        designs,
        oracle,
        label_secs,
        ds,
        model,
        report,
        train_secs: t.elapsed().as_secs_f64(),
    })
}

fn classification(s: &Suite) -> Outcome {
    let pairs: usize = s.oracle.iter().map(|o| o.labels.len()).sum();
    let mut agree = 0usize;
    for (d, o) in s.designs.iter().zip(&s.oracle) {
        let w = window_labels(d, &o.pairs, 0.0);
        agree += w.iter().zip(&o.labels).filter(|(w, o)| w.classification == o.classification).count();
    }
    let agreement = agree as f64 / pairs as f64;
    let acc = s.report.classifier.classification.as_ref().map(|c| c.accuracy).unwrap_or(0.0);
    let secs = s.label_secs + s.train_secs;
    outcome(
        4,
        "step-1 classification",
        pairs >= 50_000 && acc >= 0.99 && agreement >= 0.99 && secs < 300.0,
        format!(
            "accuracy {acc:.4}, window agreement {agreement:.4}, {pairs} labeled pairs, \
             labeling {:.0} s + training {:.0} s",
            s.label_secs, s.train_secs
        ),
    )
}

fn regression(s: &Suite) -> Outcome {
    let si = s.report.regressor.r2.unwrap_or(f64::NAN);
    let nosi = s.report.nosi.r2.unwrap_or(f64::NAN);
    outcome(
        5,
        "step-2 regression",
        si >= 0.95 && nosi >= 0.97,
        format!(
            "delta R² {si:.4} on {} TSI samples, quiet-delay R² {nosi:.4} on {} samples",
            s.report.regressor.samples, s.report.nosi.samples
        ),
    )
}

fn two_vs_one(s: &Suite) -> Outcome {
    let r = &s.report;
    let two = r.two_step.r2.unwrap_or(f64::NAN);
    let two_tsi = r.two_step_tsi.r2.unwrap_or(f64::NAN);
    let one = r.onestep.as_ref().and_then(|m| m.r2).unwrap_or(f64::NAN);
    let one_tsi = r.onestep_tsi.as_ref().and_then(|m| m.r2).unwrap_or(f64::NAN);
    outcome(
        6,
        "two-step vs one-step",
        two >= one && two_tsi - one_tsi >= 0.01,
        format!(
            "total R² two-step {two:.4} vs one-step {one:.4}; TSI subset {two_tsi:.4} vs {one_tsi:.4} (gap {:+.4}, need ≥ 0.01)",
            two_tsi - one_tsi
        ),
    )
}

fn end_to_end(s: &Suite) -> Outcome {
    let held: BTreeSet<&str> = s.ds.subset(Split::Test).iter().map(|x| x.trace.design.as_str()).collect();
    let mut ratios = Vec::new();
    for (d, o) in s.designs.iter().zip(&s.oracle) {
        if !held.contains(d.name()) {
            continue;
        }
        match build_report(d, &s.model, Some(&o.labels), Some(&o.summary)) {
            Ok(r) => ratios.extend(r.totals.accuracy_ratio),
            Err(e) => return outcome(7, "end-to-end accuracy ratio", false, e.to_string()),
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    outcome(
        7,
        "end-to-end accuracy ratio",
        !ratios.is_empty() && (0.97..=1.03).contains(&mean),
        format!("mean {mean:.4} over {} held-out designs (range {lo:.4}..{hi:.4})", ratios.len()),
    )
}

fn structural() -> Outcome {
    let t = Instant::now();
    let failed: Vec<String> = props::ALL
        .iter()
        .filter_map(|(name, check)| check().err().map(|e| format!("{name}: {e}")))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        8,
        "structural invariants",
        failed.is_empty() && secs < 60.0,
        if failed.is_empty() {
            format!("{} properties hold, {secs:.1} s", props::ALL.len())
        } else {
            failed.join("; ")
        },
    )
}

fn extraction() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2024);
    let mut bad = Vec::new();
    let mut pairs = 0usize;
    for i in 0..100 {
        let n = 1 + (i * 37) % 200;
        let d = random_design(&mut r, n);
        let w = d.default_w_max();
        let fast = extract_coupling_pairs(&d, w);
        pairs += fast.len();
        if let Err(e) = same_pairs(&fast, &brute_force_pairs(&d, w), 0.0) {
            bad.push(format!("design {i}: {e}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        9,
        "coupling extraction",
        bad.is_empty() && secs < 30.0,
        if bad.is_empty() {
            format!("100 designs, {pairs} pairs identical to brute force, {secs:.2} s")
        } else {
            bad.join("; ")
        },
    )
}

fn main() {
    let mut out = vec![lumped_rc(), convergence(), skew_sensitivity()];
    match build_suite() {
        Ok(s) => {
            out.push(classification(&s));
            out.push(regression(&s));
            out.push(two_vs_one(&s));
            out.push(end_to_end(&s));
        }
        Err(e) => {
            for (id, name) in [
                (4, "step-1 classification"),
                (5, "step-2 regression"),
                (6, "two-step vs one-step"),
                (7, "end-to-end accuracy ratio"),
            ] {
                out.push(outcome(id, name, false, format!("suite failed: {e}")));
            }
        }
    }
    out.push(structural());
    out.push(extraction());
    let passed = out.iter().filter(|o| o.pass).count();
    for o in &out {
        println!("{} {}. {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    println!("{passed}/{} criteria pass", out.len());
    if passed < out.len() && std::env::var_os("XTALK_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
