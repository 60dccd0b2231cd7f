use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{characterize_driver, delta_delay_at, driver_timing, Alignment};
use crate::error::OracleError;
use crate::layout::{
    CouplingPair, Design, DesignFile, Driver, Layer, Meta, Net, Point, RouteDirection, Segment,
    Transition,
};

/// Two identical parallel nets on adjacent tracks, each a single wire from an
/// inverter-like driver to a sink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub layer: Layer,
    /// Wire length of both nets (µm).
    pub length: f64,
    /// Edge-to-edge spacing (µm).
    pub spacing: f64,
    /// Driver resistance (kΩ).
    pub r_drive: f64,
    /// Driver input transition (ps).
    pub s_in: f64,
    /// Sink load (fF).
    pub sink_load: f64,
    /// Victim input arrival (ps).
    pub victim_at: f64,
    pub victim_direction: Transition,
    pub alignment: Alignment,
    /// Without coupling the two nets only share a timeline.
    pub coupled: bool,
    pub segments_per_wire: usize,
    /// Fixed step override (ps).
    pub dt: Option<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layer: Layer {
                id: 1,
                direction: RouteDirection::Horizontal,
                m_w: 0.064,
                m_t: 0.128,
                m_h: 0.1,
                m_eps0: 3.0,
                r_sheet: 0.3,
                c_area: 0.1,
                c_coup_unit: 0.005,
            },
            length: 150.0,
            spacing: 0.064,
            r_drive: 0.5,
            s_in: 20.0,
            sink_load: 2.0,
            victim_at: 100.0,
            victim_direction: Transition::Rise,
            alignment: Alignment::Opposite,
            coupled: true,
            segments_per_wire: 8,
            dt: None,
        }
    }
}

impl SweepConfig {
    /// Victim is net 1 (segment 1), aggressor net 2 (segment 2). The
    /// aggressor input arrival is set to `aggressor_at`.
    pub fn design(&self, aggressor_at: f64) -> Result<Design, OracleError> {
        let slews = [2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0];
        let loads = [1.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0];
        let table = characterize_driver(self.r_drive, &slews, &loads)?;
        let pitch = self.layer.m_w + self.spacing;
        let seg = |id: u32, y: f64| Segment {
            id,
            net_id: id,
            layer_id: 1,
            start: Point::new(0.0, y),
            end: Point::new(self.length, y),
            width: None,
        };
        let net = |id: u32, name: &str| Net {
            id,
            name: name.into(),
            segments: vec![id],
            sink_load: self.sink_load,
        };
        let driver = |id: u32, at: f64, dir: Transition| Driver {
            net_id: id,
            r_drive: self.r_drive,
            s_in: self.s_in,
            direction: dir,
            at_in: at,
            delay_table: table.clone(),
        };
        let file = DesignFile {
            layers: vec![self.layer.clone()],
            nets: vec![net(1, "victim"), net(2, "aggressor")],
            segments: vec![seg(1, 0.0), seg(2, pitch)],
            drivers: vec![
                driver(1, self.victim_at, self.victim_direction),
                driver(2, aggressor_at, self.alignment.apply(self.victim_direction)),
            ],
            meta: Meta {
                name: "two-net".into(),
                seed: None,
                origin: Some("sweep".into()),
            },
        };
        Design::new(file).map_err(|e| OracleError::InvalidParameter(e.to_string()))
    }

    pub fn pairs(&self) -> Vec<CouplingPair> {
        if self.coupled {
            vec![CouplingPair {
                victim_segment_id: 1,
                aggressor_segment_id: 2,
                l_si: self.length,
                w_si: self.spacing,
            }]
        } else {
            Vec::new()
        }
    }
}

/// One point of a skew sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Victim minus aggressor driver-output arrival (ps).
    pub dskew: f64,
    /// Victim net delay with the aggressor switching (ps).
    pub d_net_v: f64,
    /// Aggressor net delay (ps).
    pub d_net_a: f64,
    /// Victim delay change caused by the aggressor (ps).
    pub delta: f64,
}

/// Sweeps the aggressor input arrival from `at_min` to `at_max` in steps of
/// `step` with the victim fixed at `config.victim_at`. Both ends are
/// included.
pub fn sweep_skew(
    config: &SweepConfig,
    at_min: f64,
    at_max: f64,
    step: f64,
) -> Result<Vec<SweepRow>, OracleError> {
    if !(step > 0.0) || !(at_max >= at_min) {
        return Err(OracleError::InvalidParameter(format!(
            "need step > 0 and max >= min, got step={step} range=[{at_min}, {at_max}]"
        )));
    }
    let count = ((at_max - at_min) / step + 1e-9).floor() as usize + 1;
    let pairs = config.pairs();
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let at = at_min + i as f64 * step;
        let design = config.design(at)?;
        let victim = design.net(1);
        let aggressor = design.net(2);
        let dskew =
            driver_timing(&design, victim, &pairs).at_out - driver_timing(&design, aggressor, &pairs).at_out;
        let r = delta_delay_at(
            victim,
            &[aggressor],
            &pairs,
            &design,
            &[dskew],
            &[config.alignment],
            config.segments_per_wire,
            config.dt,
        )?;
        rows.push(SweepRow {
            dskew,
            d_net_v: r.d_si,
            d_net_a: r.aggressor_delays[0],
            delta: r.delta,
        });
    }
    Ok(rows)
}

/// Writes the sweep as a comma-separated table with four decimals.
pub fn write_sweep_table(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "dskew_ps,d_netV_ps,d_netA_ps,delta_ps")?;
    for r in rows {
        writeln!(out, "{:.4},{:.4},{:.4},{:.4}", r.dskew, r.d_net_v, r.d_net_a, r.delta)?;
    }
    Ok(())
}
