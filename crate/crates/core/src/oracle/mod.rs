//! Coupled-RC golden reference.
//!
//! Wires become π-section ladders, drivers become ramps behind a Thevenin
//! resistance, and coupling pairs become floating capacitors. Transients are
//! integrated on a fixed grid, exactly for the piecewise-linear drives;
//! delays are 50% crossings.
//!
//! Units: resistance in Ω on the network, capacitance in fF, time in ps.
//! Internally conductances are kept in 1/kΩ so that C/G comes out in ps.

mod network;
mod response;
mod sim;
mod sweep;

pub use network::{build_network, build_quiet_network, BuiltNetwork, NetNodes};
pub use response::{CoupledRun, ResponseSet, SourceEvent, SourceState};
pub use sim::{
    crossings, default_dt, default_t_end, measure_delay, simulate_transient, simulate_probes,
    Crossing, DelayMeasurement, Waveforms,
};
pub use sweep::{sweep_skew, write_sweep_table, SweepConfig, SweepRow};

use serde::{Deserialize, Serialize};

use crate::error::OracleError;
use crate::layout::{CouplingPair, Design, DelayTable, Net, Transition};

/// Supply voltage of every driver (V).
pub const VDD: f64 = 0.8;

/// Fixed step is the smaller of the fastest input transition and the fastest
/// net time constant, divided by this.
pub const DT_DIVISOR: f64 = 50.0;

/// Simulations run until this many of the slowest time constants have passed
/// after the last stimulus edge.
pub const SETTLE_TAUS: f64 = 8.0;

/// 10–90% transition time is mapped onto a full-swing linear ramp.
pub const SLEW_TO_RAMP: f64 = 1.0 / 0.8;

/// Linear ramp between two rails. A zero transition time is an ideal step
/// taking effect just after `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampStimulus {
    /// Ramp start (ps).
    pub t0: f64,
    /// 10–90% transition time (ps).
    pub transition: f64,
    pub direction: Transition,
    pub v_low: f64,
    pub v_high: f64,
}

impl RampStimulus {
    /// Ramp whose 50% point falls at `t50`.
    pub fn centered(t50: f64, transition: f64, direction: Transition) -> Self {
        Self {
            t0: t50 - 0.5 * transition * SLEW_TO_RAMP,
            transition,
            direction,
            v_low: 0.0,
            v_high: VDD,
        }
    }

    pub fn duration(&self) -> f64 {
        self.transition * SLEW_TO_RAMP
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.duration()
    }

    pub fn t50(&self) -> f64 {
        self.t0 + 0.5 * self.duration()
    }

    pub fn initial(&self) -> f64 {
        match self.direction {
            Transition::Rise => self.v_low,
            Transition::Fall => self.v_high,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let frac = if self.transition == 0.0 {
            if t > self.t0 {
                1.0
            } else {
                0.0
            }
        } else {
            ((t - self.t0) / self.duration()).clamp(0.0, 1.0)
        };
        let swing = self.v_high - self.v_low;
        match self.direction {
            Transition::Rise => self.v_low + frac * swing,
            Transition::Fall => self.v_high - frac * swing,
        }
    }

    fn check(&self) -> Result<(), OracleError> {
        if !(self.transition >= 0.0) || !self.t0.is_finite() {
            return Err(OracleError::InvalidParameter(format!(
                "ramp needs finite t0 and transition >= 0, got t0={} transition={}",
                self.t0, self.transition
            )));
        }
        if self.v_low == self.v_high {
            return Err(OracleError::InvalidParameter("ramp rails must differ".into()));
        }
        Ok(())
    }
}

/// What a source does during a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Drive {
    Ramp(RampStimulus),
    Hold(f64),
}

impl Drive {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Drive::Ramp(r) => r.value(t),
            Drive::Hold(v) => *v,
        }
    }

    pub fn initial(&self) -> f64 {
        match self {
            Drive::Ramp(r) => r.initial(),
            Drive::Hold(v) => *v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resistor {
    pub a: usize,
    pub b: usize,
    pub ohms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingCap {
    pub a: usize,
    pub b: usize,
    pub ff: f64,
}

/// Voltage source behind a series resistance, attached to `node`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub node: usize,
    pub ohms: f64,
    pub drive: Drive,
}

/// Linear RC network with grounded and floating capacitors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RcNetwork {
    /// Grounded capacitance per node (fF).
    pub ground_cap: Vec<f64>,
    pub resistors: Vec<Resistor>,
    pub couplings: Vec<CouplingCap>,
    pub sources: Vec<Source>,
}

impl RcNetwork {
    pub fn with_nodes(n: usize) -> Self {
        Self {
            ground_cap: vec![0.0; n],
            ..Default::default()
        }
    }

    pub fn node_count(&self) -> usize {
        self.ground_cap.len()
    }

    pub fn add_node(&mut self, cap: f64) -> usize {
        self.ground_cap.push(cap);
        self.ground_cap.len() - 1
    }

    pub fn add_resistor(&mut self, a: usize, b: usize, ohms: f64) {
        self.resistors.push(Resistor { a, b, ohms });
    }

    pub fn add_coupling(&mut self, a: usize, b: usize, ff: f64) {
        self.couplings.push(CouplingCap { a, b, ff });
    }

    pub fn add_source(&mut self, node: usize, ohms: f64, drive: Drive) -> usize {
        self.sources.push(Source { node, ohms, drive });
        self.sources.len() - 1
    }

    /// Checks element values and that every node reaches a source through
    /// resistors.
    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.node_count();
        let bad = |m: String| Err(OracleError::InvalidNetwork(m));
        if let Some((i, c)) = self
            .ground_cap
            .iter()
            .enumerate()
            .find(|(_, c)| !(**c >= 0.0) || !c.is_finite())
        {
            return bad(format!("node {i} has capacitance {c}"));
        }
        for r in &self.resistors {
            if r.a >= n || r.b >= n {
                return bad(format!("resistor {}-{} references a missing node", r.a, r.b));
            }
            if !(r.ohms > 0.0) || !r.ohms.is_finite() {
                return bad(format!("resistor {}-{} has resistance {}", r.a, r.b, r.ohms));
            }
        }
        for c in &self.couplings {
            if c.a >= n || c.b >= n || c.a == c.b {
                return bad(format!("coupling capacitor {}-{} is malformed", c.a, c.b));
            }
            if !(c.ff >= 0.0) || !c.ff.is_finite() {
                return bad(format!("coupling capacitor {}-{} has value {}", c.a, c.b, c.ff));
            }
        }
        for s in &self.sources {
            if s.node >= n {
                return bad(format!("source references missing node {}", s.node));
            }
            if !(s.ohms > 0.0) {
                return bad(format!("source at node {} has resistance {}", s.node, s.ohms));
            }
            if let Drive::Ramp(r) = &s.drive {
                r.check()?;
            }
        }
        let comp = self.components();
        let mut fed = vec![false; n];
        for s in &self.sources {
            fed[comp[s.node]] = true;
        }
        if let Some(node) = (0..n).find(|&i| !fed[comp[i]]) {
            return Err(OracleError::Disconnected { node });
        }
        Ok(())
    }

    /// Resistive connected-component representative of each node.
    fn components(&self) -> Vec<usize> {
        let n = self.node_count();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for r in &self.resistors {
            let (a, b) = (find(&mut parent, r.a), find(&mut parent, r.b));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        (0..n).map(|i| find(&mut parent, i)).collect()
    }

    /// Upper-bound time constant for each source: its resistance plus all wire
    /// resistance in its component, times all capacitance touching that
    /// component (ps).
    pub fn source_time_constants(&self) -> Vec<f64> {
        let comp = self.components();
        let n = self.node_count();
        let mut cap = vec![0.0; n];
        let mut res = vec![0.0; n];
        for (i, c) in self.ground_cap.iter().enumerate() {
            cap[comp[i]] += c;
        }
        for c in &self.couplings {
            cap[comp[c.a]] += c.ff;
            cap[comp[c.b]] += c.ff;
        }
        for r in &self.resistors {
            res[comp[r.a]] += r.ohms;
        }
        self.sources
            .iter()
            .map(|s| {
                let k = comp[s.node];
                (s.ohms + res[k]) * 1e-3 * cap[k]
            })
            .collect()
    }
}

/// Driver arrival and slew predicted from its characterization table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverTiming {
    /// Total capacitive load used for the lookup (fF).
    pub load: f64,
    /// Cell delay (ps).
    pub d_driver: f64,
    /// Output transition (ps).
    pub s_out: f64,
    /// Arrival at the driver output: `at_in + d_driver` (ps).
    pub at_out: f64,
    pub clamped: bool,
}

/// Table-based driver timing for `net`, loading it with the wire, sink, and
/// every coupling capacitor in `pairs` that touches it.
pub fn driver_timing(design: &Design, net: &Net, pairs: &[CouplingPair]) -> DriverTiming {
    let d = design.driver(net.id);
    let load = design.net_load(net.id, pairs);
    let cell = d.delay_table.lookup(d.s_in, load);
    DriverTiming {
        load,
        d_driver: cell.delay,
        s_out: cell.output_slew,
        at_out: d.at_in + cell.delay,
        clamped: cell.clamped,
    }
}

/// Relative switching direction of an aggressor with respect to its victim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Opposite,
    Same,
}

impl Alignment {
    pub fn apply(self, victim: Transition) -> Transition {
        match self {
            Alignment::Opposite => victim.opposite(),
            Alignment::Same => victim,
        }
    }
}

/// Victim delay with aggressors quiet and switching.
///
/// Victim delays run from the driver-output 50% crossing of the quiet run to
/// the sink 50% crossing, so `delta` is the shift of the sink crossing.
/// Aggressor delays are driver output to sink within the switching run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayResult {
    pub d_nosi: f64,
    pub d_si: f64,
    pub delta: f64,
    pub aggressor_delays: Vec<f64>,
}

/// Simulates the victim with aggressors held at their initial rail and again
/// with them switching, and reports the change in victim net delay.
///
/// `skews[k]` is the arrival offset `AT_out(victim) − AT_out(aggressor k)`;
/// aggressor inputs are placed so their table-predicted output arrival
/// matches it. Net delay is measured from the driver output node to the sink.
pub fn delta_delay(
    victim: &Net,
    aggressors: &[&Net],
    pairs: &[CouplingPair],
    design: &Design,
    skews: &[f64],
    alignments: &[Alignment],
    segments_per_wire: usize,
) -> Result<DelayResult, OracleError> {
    delta_delay_at(victim, aggressors, pairs, design, skews, alignments, segments_per_wire, None)
}

/// [`delta_delay`] with an optional fixed step in place of the default.
#[allow(clippy::too_many_arguments)]
pub fn delta_delay_at(
    victim: &Net,
    aggressors: &[&Net],
    pairs: &[CouplingPair],
    design: &Design,
    skews: &[f64],
    alignments: &[Alignment],
    segments_per_wire: usize,
    dt: Option<f64>,
) -> Result<DelayResult, OracleError> {
    if skews.len() != aggressors.len() || alignments.len() != aggressors.len() {
        return Err(OracleError::InvalidParameter(
            "need one skew and one alignment per aggressor".into(),
        ));
    }
    let built = build_network(victim, aggressors, pairs, design, segments_per_wire)?;
    let vt = driver_timing(design, victim, pairs);
    let vdrv = design.driver(victim.id);
    let v_ramp = RampStimulus::centered(vdrv.at_in, vdrv.s_in, vdrv.direction);

    let mut a_ramps = Vec::with_capacity(aggressors.len());
    for (k, a) in aggressors.iter().enumerate() {
        let at = driver_timing(design, a, pairs);
        let at_in = vt.at_out - skews[k] - at.d_driver;
        let dir = alignments[k].apply(vdrv.direction);
        a_ramps.push(RampStimulus::centered(at_in, design.driver(a.id).s_in, dir));
    }

    // Shift so every ramp starts at or after t = 0.
    let earliest = a_ramps.iter().map(|r| r.t0).fold(v_ramp.t0, f64::min);
    let shift = -earliest;
    let shifted = |r: &RampStimulus| RampStimulus { t0: r.t0 + shift, ..*r };

    let mut quiet = built.network.clone();
    let mut switching = built.network.clone();
    let vs = built.nets[0].source;
    quiet.sources[vs].drive = Drive::Ramp(shifted(&v_ramp));
    switching.sources[vs].drive = Drive::Ramp(shifted(&v_ramp));
    for (k, r) in a_ramps.iter().enumerate() {
        let s = built.nets[k + 1].source;
        quiet.sources[s].drive = Drive::Hold(r.initial());
        switching.sources[s].drive = Drive::Ramp(shifted(r));
    }

    let dt = dt.unwrap_or_else(|| default_dt(&switching));
    let t_end = default_t_end(&switching);
    let probes = built.probe_nodes();
    let wq = simulate_probes(&quiet, dt, t_end, &probes)?;
    let ws = simulate_probes(&switching, dt, t_end, &probes)?;
    let v = &built.nets[0];
    // Both delays start at the quiet driver-output crossing, so the whole
    // shift of the sink crossing is booked on the net.
    let quiet_m = measure_delay(&wq, v.driver_node, v.sink_node, VDD)?;
    let d_nosi = quiet_m.delay;
    let d_si = measure_delay(&ws, v.sink_node, v.sink_node, VDD)?.t_out - quiet_m.t_in;
    let aggressor_delays = built.nets[1..]
        .iter()
        .map(|a| measure_delay(&ws, a.driver_node, a.sink_node, VDD).map(|m| m.delay))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DelayResult {
        d_nosi,
        d_si,
        delta: d_si - d_nosi,
        aggressor_delays,
    })
}

/// Builds a delay table for a ramp-behind-resistor driver by simulating it
/// into each lumped load on the grid.
pub fn characterize_driver(
    r_drive_kohm: f64,
    slews: &[f64],
    loads: &[f64],
) -> Result<DelayTable, OracleError> {
    let mut delay = Vec::with_capacity(slews.len());
    let mut output_slew = Vec::with_capacity(slews.len());
    for &s in slews {
        let mut drow = Vec::with_capacity(loads.len());
        let mut srow = Vec::with_capacity(loads.len());
        for &c in loads {
            let ramp = RampStimulus::centered(0.0, s, Transition::Rise);
            let ramp = RampStimulus { t0: 0.0, ..ramp };
            let mut net = RcNetwork::with_nodes(1);
            net.ground_cap[0] = c;
            net.add_source(0, r_drive_kohm * 1e3, Drive::Ramp(ramp));
            let dt = default_dt(&net);
            let w = simulate_transient(&net, dt, default_t_end(&net))?;
            let series = w.series(0);
            let cross = |frac: f64| -> Result<f64, OracleError> {
                crossings(&series, w.t0, w.dt, frac * VDD)
                    .last()
                    .map(|c| c.time)
                    .ok_or(OracleError::NoCrossing { node: 0, level: frac * VDD })
            };
            drow.push(cross(0.5)? - ramp.t50());
            srow.push(cross(0.9)? - cross(0.1)?);
        }
        delay.push(drow);
        output_slew.push(srow);
    }
    Ok(DelayTable {
        input_slew: slews.to_vec(),
        load: loads.to_vec(),
        delay,
        output_slew,
    })
}
