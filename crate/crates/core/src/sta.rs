//! Net, stage and path delay assembly from predicted components, and the
//! per-design crosstalk report.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::StaError;
use crate::features::{pairs_by_victim, strongest, FeatureContext};
use crate::layout::{extract_coupling_pairs, Design, NetId, SegmentId};
use crate::model::{predict_stage, r_squared, Confusion, SegmentInput, StagePrediction, TwoStepModel};
use crate::window::{OracleSummary, PairClass, PairLabel};

/// Sum of quiet segment delays plus the deltas present, left to right.
pub fn net_delay(taus_nosi: &[f64], deltas: &[Option<f64>]) -> Result<f64, StaError> {
    if taus_nosi.len() != deltas.len() {
        return Err(StaError::LengthMismatch {
            taus: taus_nosi.len(),
            deltas: deltas.len(),
        });
    }
    let mut d = 0.0;
    for (t, x) in taus_nosi.iter().zip(deltas) {
        d += t;
        if let Some(x) = x {
            d += x;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentBreakdown {
    pub segment_id: SegmentId,
    pub tau_nosi: f64,
    /// Summed delta of the segment's TSI pairs (ps).
    pub delta: f64,
    pub tsi: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDelay {
    pub net_id: NetId,
    pub d_driver: f64,
    pub d_net: f64,
    pub delta_total: f64,
    pub d_stage: f64,
    pub segments: Vec<SegmentBreakdown>,
}

impl StageDelay {
    /// Assembles a stage from per-segment components; `deltas[i]` is
    /// present only for TSI segments.
    pub fn assemble(
        net_id: NetId,
        d_driver: f64,
        segments: &[SegmentId],
        taus_nosi: &[f64],
        deltas: &[Option<f64>],
    ) -> Result<Self, StaError> {
        let d_net = net_delay(taus_nosi, deltas)?;
        if segments.len() != taus_nosi.len() {
            return Err(StaError::LengthMismatch {
                taus: taus_nosi.len(),
                deltas: segments.len(),
            });
        }
        let mut delta_total = 0.0;
        let segments = segments
            .iter()
            .zip(taus_nosi.iter().zip(deltas))
            .map(|(&s, (&t, &x))| {
                delta_total += x.unwrap_or(0.0);
                SegmentBreakdown {
                    segment_id: s,
                    tau_nosi: t,
                    delta: x.unwrap_or(0.0),
                    tsi: x.is_some(),
                }
            })
            .collect();
        Ok(Self {
            net_id,
            d_driver,
            d_net,
            delta_total,
            d_stage: d_driver + d_net,
            segments,
        })
    }

    pub fn from_prediction(net_id: NetId, p: &StagePrediction) -> Self {
        let ids: Vec<SegmentId> = p.segments.iter().map(|s| s.segment_id).collect();
        let taus: Vec<f64> = p.segments.iter().map(|s| s.tau_nosi).collect();
        let deltas: Vec<Option<f64>> = p
            .segments
            .iter()
            .map(|s| s.pairs.iter().any(|x| x.tsi).then_some(s.delta))
            .collect();
        Self::assemble(net_id, p.d_driver, &ids, &taus, &deltas).expect("lists built together")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathDelay {
    pub stages: Vec<StageDelay>,
    pub d_path: f64,
}

/// Sum of stage delays in order.
pub fn path_delay(stages: Vec<StageDelay>) -> Result<PathDelay, StaError> {
    if stages.is_empty() {
        return Err(StaError::EmptyPath);
    }
    let mut d_path = 0.0;
    for s in &stages {
        d_path += s.d_stage;
    }
    Ok(PathDelay { stages, d_path })
}

/// Delta delay relative to stage delay; negative for a speedup.
pub fn compute_ddr(delta_total: f64, d_stage: f64) -> Result<f64, StaError> {
    if !(d_stage > 0.0) {
        return Err(StaError::NonPositiveStage(d_stage));
    }
    Ok(delta_total / d_stage)
}

/// Oracle columns for one net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldenNet {
    pub d_net_nosi: f64,
    /// Net delay with every coupled neighbor switching (ps).
    pub d_net: f64,
    pub d_stage: f64,
    /// Predicted over golden stage delay.
    pub ratio: f64,
    /// `d_net − d_net_nosi` (ps).
    pub delta: f64,
    /// Sum of this net's per-pair oracle deltas (ps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_delta_sum: Option<f64>,
    /// `pair_delta_sum − delta`: the cost of adding pairs up (ps).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub additivity_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetReport {
    pub stage: StageDelay,
    pub ddr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<GoldenNet>,
}

/// One directed pair with its predicted class and delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub victim_net: NetId,
    pub victim_segment_id: SegmentId,
    pub aggressor_net: NetId,
    pub aggressor_segment_id: SegmentId,
    pub class: PairClass,
    pub vote: f64,
    pub delta: f64,
    /// Delta over the victim's stage delay.
    pub ddr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_class: Option<PairClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub nets: usize,
    pub pairs: usize,
    pub tsi: usize,
    pub fsi: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_ddr_net: Option<NetId>,
    pub worst_ddr: f64,
    /// Nets whose predicted delta is negative.
    pub speedups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_r2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_additivity_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_additivity_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_confusion: Option<Confusion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkReport {
    pub design: String,
    pub w_max: f64,
    pub nets: Vec<NetReport>,
    pub pairs: Vec<PairReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<PathDelay>,
    pub totals: Totals,
}

impl CrosstalkReport {
    pub fn net(&self, id: NetId) -> Option<&NetReport> {
        self.nets.iter().find(|n| n.stage.net_id == id)
    }

    /// Path through the given nets, in order.
    pub fn path(&self, nets: &[NetId]) -> Result<PathDelay, StaError> {
        let stages = nets
            .iter()
            .map(|&n| {
                self.net(n)
                    .map(|r| r.stage.clone())
                    .ok_or(StaError::UnknownNet(n))
            })
            .collect::<Result<Vec<_>, _>>()?;
        path_delay(stages)
    }
}

/// Feature inputs for every segment of `net`: the segment's own sample
/// vector (through its strongest aggressor) and one vector per aggressor.
pub fn segment_inputs(ctx: &FeatureContext<'_>, net: NetId, by_victim: &std::collections::BTreeMap<SegmentId, Vec<crate::layout::CouplingPair>>) -> Vec<SegmentInput> {
    ctx.design()
        .net(net)
        .segments
        .iter()
        .map(|&s| {
            let ps = by_victim.get(&s).map(Vec::as_slice).unwrap_or(&[]);
            SegmentInput {
                segment_id: s,
                features: ctx.features(s, strongest(ctx.design(), ps)),
                pairs: ps.iter().map(|p| (p.aggressor_segment_id, ctx.features(s, Some(p)))).collect(),
            }
        })
        .collect()
}

/// Predicts every net of `design` with all of its pairs added up. With
/// oracle results the report also carries golden columns and the
/// additivity error of summing per-pair deltas.
pub fn build_report(
    design: &Design,
    model: &TwoStepModel,
    labels: Option<&[PairLabel]>,
    oracle: Option<&OracleSummary>,
) -> Result<CrosstalkReport, StaError> {
    let w_max = oracle.map(|o| o.w_max).unwrap_or_else(|| design.default_w_max());
    let pairs = extract_coupling_pairs(design, w_max);
    let ctx = FeatureContext::new(design, &pairs, w_max);
    let by_victim = pairs_by_victim(&pairs);
    let seg_net = |s: SegmentId| design.segment(s).net_id;

    let label_map: HashMap<(SegmentId, SegmentId), &PairLabel> = labels
        .unwrap_or(&[])
        .iter()
        .map(|l| ((l.pair.victim_segment_id, l.pair.aggressor_segment_id), l))
        .collect();
    let golden_map: HashMap<NetId, &crate::window::NetOracle> =
        oracle.map(|o| o.nets.iter().map(|n| (n.net_id, n)).collect()).unwrap_or_default();

    let per_net: Vec<(NetReport, Vec<PairReport>)> = design
        .nets()
        .par_iter()
        .map(|net| {
            let inputs = segment_inputs(&ctx, net.id, &by_victim);
            let pred = predict_stage(ctx.timing(net.id).d_driver, &inputs, model);
            let stage = StageDelay::from_prediction(net.id, &pred);
            let ddr = if stage.d_stage > 0.0 { stage.delta_total / stage.d_stage } else { 0.0 };
            let mut rows = Vec::new();
            let mut oracle_sum: Option<f64> = None;
            for sp in &pred.segments {
                for pp in &sp.pairs {
                    let l = label_map.get(&(sp.segment_id, pp.aggressor_segment_id));
                    if let Some(d) = l.and_then(|l| l.oracle_delta) {
                        *oracle_sum.get_or_insert(0.0) += d;
                    }
                    rows.push(PairReport {
                        victim_net: net.id,
                        victim_segment_id: sp.segment_id,
                        aggressor_net: seg_net(pp.aggressor_segment_id),
                        aggressor_segment_id: pp.aggressor_segment_id,
                        class: if pp.tsi { PairClass::Tsi } else { PairClass::Fsi },
                        vote: pp.vote,
                        delta: pp.delta,
                        ddr: if stage.d_stage > 0.0 { pp.delta / stage.d_stage } else { 0.0 },
                        oracle_class: l.map(|l| l.classification),
                        oracle_delta: l.and_then(|l| l.oracle_delta),
                    });
                }
            }
            let golden = golden_map.get(&net.id).map(|g| {
                let d_net = g.d_net_golden.unwrap_or(g.d_net_nosi);
                let d_stage = g.d_driver + d_net;
                let delta = d_net - g.d_net_nosi;
                let pair_delta_sum = if rows.is_empty() { Some(0.0) } else { oracle_sum };
                GoldenNet {
                    d_net_nosi: g.d_net_nosi,
                    d_net,
                    d_stage,
                    ratio: stage.d_stage / d_stage,
                    delta,
                    pair_delta_sum,
                    additivity_error: g.d_net_golden.and(pair_delta_sum).map(|s| s - delta),
                }
            });
            (NetReport { stage, ddr, golden }, rows)
        })
        .collect();

    let mut nets = Vec::with_capacity(per_net.len());
    let mut pairs_out = Vec::new();
    for (n, p) in per_net {
        nets.push(n);
        pairs_out.extend(p);
    }
    nets.sort_by_key(|n| n.stage.net_id);
    pairs_out.sort_by_key(|p| (p.victim_segment_id, p.aggressor_segment_id));
    let totals = totals(&nets, &pairs_out);
    Ok(CrosstalkReport {
        design: design.name().to_string(),
        w_max,
        nets,
        pairs: pairs_out,
        paths: Vec::new(),
        totals,
    })
}

fn totals(nets: &[NetReport], pairs: &[PairReport]) -> Totals {
    let tsi = pairs.iter().filter(|p| p.class == PairClass::Tsi).count();
    let worst = nets
        .iter()
        .filter(|n| n.stage.delta_total != 0.0)
        .max_by(|a, b| a.ddr.abs().total_cmp(&b.ddr.abs()).then(b.stage.net_id.cmp(&a.stage.net_id)));
    let golden: Vec<(&StageDelay, &GoldenNet)> = nets.iter().filter_map(|n| n.golden.as_ref().map(|g| (&n.stage, g))).collect();
    let (accuracy_ratio, stage_r2) = if golden.is_empty() {
        (None, None)
    } else {
        let pred: Vec<f64> = golden.iter().map(|(s, _)| s.d_stage).collect();
        let gold: Vec<f64> = golden.iter().map(|(_, g)| g.d_stage).collect();
        (crate::model::accuracy_ratio(&pred, &gold), Some(r_squared(&pred, &gold)))
    };
    let add: Vec<f64> = golden.iter().filter_map(|(_, g)| g.additivity_error).map(f64::abs).collect();
    let pair_confusion = pairs.iter().any(|p| p.oracle_class.is_some()).then(|| {
        let mut c = Confusion::default();
        for p in pairs {
            if let Some(o) = p.oracle_class {
                c.add(p.class == PairClass::Tsi, o == PairClass::Tsi);
            }
        }
        c
    });
    Totals {
        nets: nets.len(),
        pairs: pairs.len(),
        tsi,
        fsi: pairs.len() - tsi,
        worst_ddr_net: worst.map(|n| n.stage.net_id),
        worst_ddr: worst.map(|n| n.ddr).unwrap_or(0.0),
        speedups: nets.iter().filter(|n| n.stage.delta_total < 0.0).count(),
        accuracy_ratio,
        stage_r2,
        mean_abs_additivity_error: (!add.is_empty()).then(|| add.iter().sum::<f64>() / add.len() as f64),
        max_abs_additivity_error: add.iter().copied().reduce(f64::max),
        pair_confusion,
    }
}

/// Scores an existing report against oracle results: stage-delay R² and
/// accuracy ratio over nets, and the pair classification confusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportScore {
    pub nets: usize,
    pub stage_r2: f64,
    pub accuracy_ratio: Option<f64>,
    pub confusion: Confusion,
    pub pair_accuracy: f64,
}

pub fn score_report(report: &CrosstalkReport, labels: &[PairLabel], oracle: &OracleSummary) -> Result<ReportScore, StaError> {
    let golden: HashMap<NetId, f64> = oracle
        .nets
        .iter()
        .map(|n| (n.net_id, n.d_driver + n.d_net_golden.unwrap_or(n.d_net_nosi)))
        .collect();
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for n in &report.nets {
        let g = *golden.get(&n.stage.net_id).ok_or(StaError::UnknownNet(n.stage.net_id))?;
        pred.push(n.stage.d_stage);
        gold.push(g);
    }
    if pred.is_empty() {
        return Err(StaError::EmptyPath);
    }
    let by_pair: HashMap<(SegmentId, SegmentId), PairClass> = report
        .pairs
        .iter()
        .map(|p| ((p.victim_segment_id, p.aggressor_segment_id), p.class))
        .collect();
    let mut c = Confusion::default();
    for l in labels {
        let key = (l.pair.victim_segment_id, l.pair.aggressor_segment_id);
        let p = by_pair.get(&key).copied().unwrap_or(PairClass::Fsi);
        c.add(p == PairClass::Tsi, l.classification == PairClass::Tsi);
    }
    let total = c.total().max(1) as f64;
    Ok(ReportScore {
        nets: pred.len(),
        stage_r2: r_squared(&pred, &gold),
        accuracy_ratio: crate::model::accuracy_ratio(&pred, &gold),
        pair_accuracy: (c.tp + c.tn) as f64 / total,
        confusion: c,
    })
}

/// Fixed-width table of per-net results followed by the totals.
///
/// Columns: net, d_driver, d_net, delta, d_stage (ps), DDR (%), TSI and FSI
/// pair counts, and with oracle data the golden stage delay, the
/// predicted/golden ratio and the additivity error (ps).
pub fn write_table(report: &CrosstalkReport, mut out: impl Write) -> std::io::Result<()> {
    let golden = report.nets.iter().any(|n| n.golden.is_some());
    let mut counts: HashMap<NetId, (usize, usize)> = HashMap::new();
    for p in &report.pairs {
        let e = counts.entry(p.victim_net).or_default();
        if p.class == PairClass::Tsi {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    write!(
        out,
        "{:>8} {:>10} {:>10} {:>9} {:>10} {:>8} {:>4} {:>4}",
        "net", "d_driver", "d_net", "delta", "d_stage", "ddr%", "tsi", "fsi"
    )?;
    if golden {
        write!(out, " {:>10} {:>7} {:>9}", "golden", "ratio", "add_err")?;
    }
    writeln!(out)?;
    for n in &report.nets {
        let s = &n.stage;
        let (t, f) = counts.get(&s.net_id).copied().unwrap_or_default();
        let flag = if s.delta_total < 0.0 { "*" } else { " " };
        write!(
            out,
            "{:>8} {:>10.3} {:>10.3} {:>9.3} {:>10.3} {:>7.2}{flag} {:>4} {:>4}",
            s.net_id,
            s.d_driver,
            s.d_net,
            s.delta_total,
            s.d_stage,
            100.0 * n.ddr,
            t,
            f
        )?;
        if let Some(g) = &n.golden {
            write!(out, " {:>10.3} {:>7.4}", g.d_stage, g.ratio)?;
            match g.additivity_error {
                Some(e) => write!(out, " {:>9.3}", e)?,
                None => write!(out, " {:>9}", "-")?,
            }
        }
        writeln!(out)?;
    }
    let t = &report.totals;
    writeln!(out, "design {}: {} nets, {} pairs ({} TSI, {} FSI)", report.design, t.nets, t.pairs, t.tsi, t.fsi)?;
    match t.worst_ddr_net {
        Some(n) => writeln!(out, "worst DDR: net {n} at {:.2}%", 100.0 * t.worst_ddr)?,
        None => writeln!(out, "worst DDR: none")?,
    }
    if t.speedups > 0 {
        writeln!(out, "{} net(s) with negative delta, marked *", t.speedups)?;
    }
    if let (Some(a), Some(r2)) = (t.accuracy_ratio, t.stage_r2) {
        writeln!(out, "stage delay vs oracle: accuracy ratio {a:.4}, R² {r2:.4}")?;
    }
    if let (Some(m), Some(x)) = (t.mean_abs_additivity_error, t.max_abs_additivity_error) {
        writeln!(out, "additivity error |Σ pair deltas − joint delta|: mean {m:.3} ps, max {x:.3} ps")?;
    }
    for p in &report.paths {
        let ids: Vec<String> = p.stages.iter().map(|s| s.net_id.to_string()).collect();
        writeln!(out, "path {}: {:.3} ps", ids.join(" -> "), p.d_path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_net_delay() {
        let taus = [10.0, 12.0, 8.0, 11.0];
        assert_eq!(net_delay(&taus, &[None, None, Some(4.0), None]).unwrap(), 45.0);
        assert_eq!(net_delay(&taus, &[None; 4]).unwrap(), 41.0);
        assert!(matches!(net_delay(&taus, &[None]), Err(StaError::LengthMismatch { .. })));
    }

    #[test]
    fn paths_and_ddr() {
        let st = |id| StageDelay::assemble(id, 40.0, &[1], &[60.0], &[None]).unwrap();
        let p = path_delay(vec![st(1), st(2), st(3)]).unwrap();
        assert_eq!(p.d_path, 300.0);
        assert!(matches!(path_delay(vec![]), Err(StaError::EmptyPath)));
        assert_eq!(compute_ddr(28.15, 100.0).unwrap(), 0.2815);
        assert_eq!(compute_ddr(0.0, 100.0).unwrap(), 0.0);
        assert!(compute_ddr(-3.0, 100.0).unwrap() < 0.0);
        assert!(compute_ddr(1.0, 0.0).is_err());
    }
}
