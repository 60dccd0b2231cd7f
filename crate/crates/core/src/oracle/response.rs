//! Superposition of single-source responses.
//!
//! The network is linear and starts at DC, so any combination of quiet and
//! switching sources is the DC state plus a weighted sum of each source's
//! response to its own ramp. Each response is integrated once on the common
//! grid (same dt, same ramp placement as a direct run) and kept only while
//! it is still moving; re-weighting then costs no further integration.

use super::network::assemble;
use super::sim::Modal;
use super::{
    crossings, default_dt, Alignment, BuiltNetwork, Crossing, DelayResult, Drive, RampStimulus,
    RcNetwork, VDD,
};
use crate::error::OracleError;
use crate::layout::{CouplingPair, Design, NetId};

/// Responses below this (V per V of source swing) count as settled.
const SETTLE_TOL: f64 = 1e-9;

/// A source switching once, placed on the grid that starts at t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceEvent {
    pub source: usize,
    pub ramp: RampStimulus,
}

#[derive(Debug, Clone)]
struct Response {
    /// Grid step of the first stored sample; the response is zero there.
    start: usize,
    /// Row-major, one row of probe values per step.
    samples: Vec<f64>,
}

/// Unit-swing probe responses of each source in a network.
#[derive(Debug, Clone)]
pub struct ResponseSet {
    pub dt: f64,
    pub probes: Vec<usize>,
    /// Per source: DC probe voltages per volt at the source.
    dc: Vec<Vec<f64>>,
    responses: Vec<Option<Response>>,
}

/// How a source behaves in one superposed evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceState {
    pub initial: f64,
    /// Final minus initial voltage; zero holds the source quiet.
    pub swing: f64,
}

impl SourceState {
    pub fn quiet(v: f64) -> Self {
        Self { initial: v, swing: 0.0 }
    }

    pub fn switching(ramp: &RampStimulus) -> Self {
        let initial = ramp.initial();
        Self {
            initial,
            swing: ramp.value(f64::INFINITY) - initial,
        }
    }
}

impl ResponseSet {
    /// Integrates each event's unit ramp response. Events must start at or
    /// after t = 0.
    pub fn compute(
        net: &RcNetwork,
        events: &[SourceEvent],
        probes: &[usize],
        dt: f64,
    ) -> Result<Self, OracleError> {
        net.validate()?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(OracleError::InvalidParameter(format!("need dt > 0, got {dt}")));
        }
        if let Some(&p) = probes.iter().find(|&&p| p >= net.node_count()) {
            return Err(OracleError::InvalidParameter(format!("probe node {p} does not exist")));
        }
        let sys = Modal::new(net, dt)?;
        let rows: Vec<Vec<f64>> = probes.iter().map(|&p| sys.out_row(p)).collect();
        let weight: Vec<f64> = (0..sys.n)
            .map(|i| rows.iter().map(|r| r[i].abs()).fold(0.0, f64::max))
            .collect();
        let dc: Vec<Vec<f64>> = sys
            .dc_gain
            .iter()
            .map(|g| probes.iter().map(|&p| g[p]).collect())
            .collect();
        let mut responses = vec![None; net.sources.len()];
        for ev in events {
            if ev.source >= net.sources.len() {
                return Err(OracleError::InvalidParameter(format!("no source {}", ev.source)));
            }
            if ev.ramp.t0 < 0.0 {
                return Err(OracleError::InvalidParameter(format!(
                    "event on source {} starts before t = 0",
                    ev.source
                )));
            }
            responses[ev.source] = Some(integrate(&sys, &rows, &weight, &dc[ev.source], ev, dt));
        }
        Ok(Self {
            dt,
            probes: probes.to_vec(),
            dc,
            responses,
        })
    }

    fn column(&self, node: usize) -> Result<usize, OracleError> {
        self.probes
            .iter()
            .position(|&p| p == node)
            .ok_or_else(|| OracleError::InvalidParameter(format!("node {node} is not a probe")))
    }

    /// Crossings of `level` at `node` with each source in the given state.
    /// Sources without a computed response must be quiet.
    pub fn crossings(
        &self,
        node: usize,
        states: &[SourceState],
        level: f64,
    ) -> Result<Vec<Crossing>, OracleError> {
        let c = self.column(node)?;
        let p = self.probes.len();
        if states.len() != self.dc.len() {
            return Err(OracleError::InvalidParameter(format!(
                "need {} source states, got {}",
                self.dc.len(),
                states.len()
            )));
        }
        let base: f64 = states.iter().zip(&self.dc).map(|(s, g)| s.initial * g[c]).sum();
        let mut active: Vec<(&Response, f64, f64)> = Vec::new();
        for (k, s) in states.iter().enumerate() {
            if s.swing == 0.0 {
                continue;
            }
            match &self.responses[k] {
                Some(r) => active.push((r, s.swing, self.dc[k][c])),
                None => {
                    return Err(OracleError::InvalidParameter(format!(
                        "source {k} switches but has no response"
                    )))
                }
            }
        }
        let value = |k: usize| -> f64 {
            let mut v = base;
            for (r, swing, settled) in &active {
                let len = r.samples.len() / p;
                let u = if k < r.start {
                    0.0
                } else if k - r.start < len {
                    r.samples[(k - r.start) * p + c]
                } else {
                    *settled
                };
                v += swing * u;
            }
            v
        };
        let mut ranges: Vec<(usize, usize)> = active
            .iter()
            .map(|(r, _, _)| (r.start, r.start + r.samples.len() / p))
            .collect();
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (a, b) in ranges {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        // Past every range the waveform sits at its settled value.
        if let Some(last) = merged.last_mut() {
            last.1 += 1;
        }

        let mut out = Vec::new();
        let mut prev: Option<(usize, f64)> = None;
        let mut push = |k0: usize, v0: f64, v1: f64| {
            for x in crossings(&[v0, v1], k0 as f64 * self.dt, self.dt, level) {
                out.push(x);
            }
        };
        for (a, b) in merged {
            for k in a..b {
                let v = value(k);
                if let Some((pk, pv)) = prev {
                    push(k.max(pk + 1) - 1, pv, v);
                }
                prev = Some((k, v));
            }
        }
        Ok(out)
    }

    /// Time of the last crossing of `level` at `node`.
    pub fn last_crossing(
        &self,
        node: usize,
        states: &[SourceState],
        level: f64,
    ) -> Result<f64, OracleError> {
        self.crossings(node, states, level)?
            .last()
            .map(|c| c.time)
            .ok_or(OracleError::NoCrossing { node, level })
    }
}

fn integrate(
    sys: &Modal,
    rows: &[Vec<f64>],
    weight: &[f64],
    settled: &[f64],
    ev: &SourceEvent,
    dt: f64,
) -> Response {
    let unit = |t: f64| {
        let r = &ev.ramp;
        (r.value(t) - r.initial()) / (r.value(f64::INFINITY) - r.initial())
    };
    let h = &sys.gain[ev.source];
    let kinks = [ev.ramp.t0, ev.ramp.end()];
    let mut k = ((ev.ramp.t0 / dt).floor() as usize).max(1);
    while unit(k as f64 * dt) <= 0.0 {
        k += 1;
    }
    let start = k - 1;
    let p = rows.len();
    let mut samples = vec![0.0; p];
    let mut z = vec![0.0; sys.n];
    // Ramp phase: every mode is driven.
    loop {
        let t = k as f64 * dt;
        let u = unit(t);
        sys.step(&mut z, h, unit, t, &kinks, true);
        for r in rows {
            samples.push(r.iter().zip(&z).map(|(a, b)| a * b).sum());
        }
        k += 1;
        if u >= 1.0 && t >= ev.ramp.end() {
            break;
        }
    }
    // Relaxation: each mode decays geometrically toward its steady value.
    let mut modes: Vec<(usize, f64)> = (0..sys.n)
        .map(|i| (i, z[i] - h[i]))
        .filter(|(i, e)| e.abs() * weight[*i] > SETTLE_TOL * 1e-4)
        .collect();
    loop {
        let total: f64 = modes.iter().map(|(i, e)| e.abs() * weight[*i]).sum();
        if total < SETTLE_TOL {
            break;
        }
        for (i, e) in modes.iter_mut() {
            *e *= sys.decay[*i];
        }
        modes.retain(|(i, e)| e.abs() * weight[*i] > SETTLE_TOL * 1e-4);
        for (c, r) in rows.iter().enumerate() {
            samples.push(settled[c] + modes.iter().map(|(i, e)| r[*i] * e).sum::<f64>());
        }
    }
    Response { start, samples }
}

/// A set of nets built into one network, with every driver's response
/// integrated once at its design arrival time.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub built: BuiltNetwork,
    pub responses: ResponseSet,
    ramps: Vec<RampStimulus>,
}

impl CoupledRun {
    /// `floating` pairs couple nets in `nets`; `grounded` pairs load them.
    /// Every driver ramps in its design direction at its design input
    /// arrival; all ramps are shifted together so the earliest starts at 0.
    /// `dt` overrides the default step.
    pub fn new(
        design: &Design,
        nets: &[NetId],
        floating: &[CouplingPair],
        grounded: &[CouplingPair],
        segments_per_wire: usize,
        dt: Option<f64>,
    ) -> Result<Self, OracleError> {
        let refs: Vec<_> = nets.iter().map(|&id| design.net(id)).collect();
        let mut built = assemble(&refs, floating, grounded, design, segments_per_wire)?;
        let ramps: Vec<RampStimulus> = built
            .nets
            .iter()
            .map(|n| match built.network.sources[n.source].drive {
                Drive::Ramp(r) => r,
                Drive::Hold(_) => unreachable!("assemble drives every source with a ramp"),
            })
            .collect();
        let shift = -ramps.iter().map(|r| r.t0).fold(f64::INFINITY, f64::min);
        let mut events = Vec::with_capacity(ramps.len());
        for (n, r) in built.nets.iter().zip(&ramps) {
            let ramp = RampStimulus { t0: r.t0 + shift, ..*r };
            built.network.sources[n.source].drive = Drive::Ramp(ramp);
            events.push(SourceEvent { source: n.source, ramp });
        }
        let dt = dt.unwrap_or_else(|| default_dt(&built.network));
        let probes = built.probe_nodes();
        let responses = ResponseSet::compute(&built.network, &events, &probes, dt)?;
        let ramps = events.iter().map(|e| e.ramp).collect();
        Ok(Self {
            built,
            responses,
            ramps,
        })
    }

    /// States with net `victim` (index into the run's nets) switching in its
    /// design direction, nets in `switching` moving per `alignment`, and the
    /// rest held at the rail they would start from.
    fn states(&self, victim: usize, switching: &[usize], alignment: Alignment) -> Vec<SourceState> {
        let vdir = self.ramps[victim].direction;
        let mut states = vec![SourceState::quiet(0.0); self.built.network.sources.len()];
        for (k, n) in self.built.nets.iter().enumerate() {
            let dir = if k == victim { vdir } else { alignment.apply(vdir) };
            let ramp = RampStimulus {
                direction: dir,
                ..self.ramps[k]
            };
            states[n.source] = if k == victim || switching.contains(&k) {
                SourceState::switching(&ramp)
            } else {
                SourceState::quiet(ramp.initial())
            };
        }
        states
    }

    fn boundary_times(&self, net: usize, states: &[SourceState]) -> Result<Vec<f64>, OracleError> {
        self.built.nets[net]
            .boundaries()
            .iter()
            .map(|&b| self.responses.last_crossing(b, states, 0.5 * VDD))
            .collect()
    }

    /// Victim 50% crossing time at each segment boundary, driver output
    /// first and sink last.
    pub fn victim_crossings(
        &self,
        victim: usize,
        switching: &[usize],
        alignment: Alignment,
    ) -> Result<Vec<f64>, OracleError> {
        self.boundary_times(victim, &self.states(victim, switching, alignment))
    }

    /// Victim net delay with the other nets quiet, then with `switching`
    /// nets moving.
    pub fn delays(
        &self,
        victim: usize,
        switching: &[usize],
        alignment: Alignment,
    ) -> Result<DelayResult, OracleError> {
        let quiet = self.victim_crossings(victim, &[], alignment)?;
        let states = self.states(victim, switching, alignment);
        let si = self.boundary_times(victim, &states)?;
        let net_delay = |t: &[f64]| t[t.len() - 1] - t[0];
        let mut aggressor_delays = Vec::new();
        for &k in switching {
            let t = self.boundary_times(k, &states)?;
            aggressor_delays.push(net_delay(&t));
        }
        let d_nosi = net_delay(&quiet);
        let d_si = si[si.len() - 1] - quiet[0];
        Ok(DelayResult {
            d_nosi,
            d_si,
            delta: d_si - d_nosi,
            aggressor_delays,
        })
    }
}
