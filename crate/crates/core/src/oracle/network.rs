use std::collections::HashMap;

use super::{Drive, RampStimulus, RcNetwork};
use crate::error::OracleError;
use crate::layout::{
    coupling_capacitance, overlap_midpoint, CouplingPair, Design, Net, NetId, SegmentId,
};

/// Where one net landed in a built network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetNodes {
    pub net: NetId,
    /// Index into `RcNetwork::sources`.
    pub source: usize,
    /// Driver output, i.e. the start of the first segment.
    pub driver_node: usize,
    pub sink_node: usize,
    pub segments: Vec<SegmentId>,
    /// `segment_nodes[i]` runs from the start to the end of segment `i`.
    pub segment_nodes: Vec<Vec<usize>>,
}

impl NetNodes {
    /// Start node of every segment followed by the sink.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.segment_nodes.iter().map(|s| s[0]).collect();
        b.push(self.sink_node);
        b
    }

    fn node_near(&self, seg: SegmentId, fraction: f64) -> Option<usize> {
        let i = self.segments.iter().position(|&s| s == seg)?;
        let nodes = &self.segment_nodes[i];
        let k = (fraction * (nodes.len() - 1) as f64).round() as usize;
        Some(nodes[k.min(nodes.len() - 1)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltNetwork {
    pub network: RcNetwork,
    /// Victim first, then aggressors in the order given.
    pub nets: Vec<NetNodes>,
}

impl BuiltNetwork {
    /// Segment boundaries of every net, sorted and deduplicated.
    pub fn probe_nodes(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.nets.iter().flat_map(|n| n.boundaries()).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn net_nodes(&self, id: NetId) -> Option<&NetNodes> {
        self.nets.iter().find(|n| n.net == id)
    }
}

/// Builds the coupled network of `victim` and `aggressors`.
///
/// Each wire is a ladder of `segments_per_wire` π-sections; each pair's
/// coupling capacitor joins the ladder nodes nearest the middle of its
/// overlap. Drivers become ramps behind `r_drive`, centered on their input
/// arrival; callers normally replace the drives before simulating.
pub fn build_network(
    victim: &Net,
    aggressors: &[&Net],
    pairs: &[CouplingPair],
    design: &Design,
    segments_per_wire: usize,
) -> Result<BuiltNetwork, OracleError> {
    let mut nets = vec![victim];
    nets.extend_from_slice(aggressors);
    assemble(&nets, pairs, &[], design, segments_per_wire)
}

/// Single-net network with every coupling capacitor touching the net
/// connected to ground instead of to its neighbor. Pairs not touching the
/// net are ignored.
pub fn build_quiet_network(
    net: &Net,
    pairs: &[CouplingPair],
    design: &Design,
    segments_per_wire: usize,
) -> Result<BuiltNetwork, OracleError> {
    assemble(&[net], &[], pairs, design, segments_per_wire)
}

/// General form: `floating` pairs must lie entirely within `nets`; each
/// `grounded` pair adds its capacitance to ground on whichever of its
/// segments belongs to `nets`.
pub(crate) fn assemble(
    nets: &[&Net],
    floating: &[CouplingPair],
    grounded: &[CouplingPair],
    design: &Design,
    segments_per_wire: usize,
) -> Result<BuiltNetwork, OracleError> {
    if segments_per_wire == 0 {
        return Err(OracleError::InvalidParameter("segments_per_wire must be >= 1".into()));
    }
    let spw = segments_per_wire;
    let mut network = RcNetwork::default();
    let mut built = Vec::with_capacity(nets.len());
    for net in nets {
        let driver = design.driver(net.id);
        let driver_node = network.add_node(0.0);
        let mut at = driver_node;
        let mut segment_nodes = Vec::with_capacity(net.segments.len());
        for &sid in &net.segments {
            let seg = design.segment(sid);
            let r = design.segment_resistance(seg) / spw as f64;
            let c = design.segment_capacitance(seg) / spw as f64;
            let mut nodes = Vec::with_capacity(spw + 1);
            nodes.push(at);
            for _ in 0..spw {
                let next = network.add_node(0.0);
                network.ground_cap[at] += 0.5 * c;
                network.ground_cap[next] += 0.5 * c;
                network.add_resistor(at, next, r);
                nodes.push(next);
                at = next;
            }
            segment_nodes.push(nodes);
        }
        network.ground_cap[at] += net.sink_load;
        let ramp = RampStimulus::centered(driver.at_in, driver.s_in, driver.direction);
        let source = network.add_source(driver_node, driver.r_drive * 1e3, Drive::Ramp(ramp));
        built.push(NetNodes {
            net: net.id,
            source,
            driver_node,
            sink_node: at,
            segments: net.segments.clone(),
            segment_nodes,
        });
    }

    let owner: HashMap<SegmentId, usize> = built
        .iter()
        .enumerate()
        .flat_map(|(k, n)| n.segments.iter().map(move |&s| (s, k)))
        .collect();
    let locate = |seg: SegmentId, pair: &CouplingPair| -> Option<usize> {
        let &k = owner.get(&seg)?;
        let s = design.segment(seg);
        let frac = s.fraction_at(overlap_midpoint(design, pair));
        built[k].node_near(seg, frac)
    };
    let value = |p: &CouplingPair| coupling_capacitance(p, design.layer(design.segment(p.victim_segment_id).layer_id));

    for p in floating {
        let foreign = |seg| OracleError::ForeignSegment {
            pair: p.to_string(),
            segment: seg,
        };
        let a = locate(p.victim_segment_id, p).ok_or_else(|| foreign(p.victim_segment_id))?;
        let b = locate(p.aggressor_segment_id, p).ok_or_else(|| foreign(p.aggressor_segment_id))?;
        network.add_coupling(a, b, value(p));
    }
    for p in grounded {
        for seg in [p.victim_segment_id, p.aggressor_segment_id] {
            if design.try_segment(seg).is_none() {
                return Err(OracleError::ForeignSegment {
                    pair: p.to_string(),
                    segment: seg,
                });
            }
            if let Some(node) = locate(seg, p) {
                network.ground_cap[node] += value(p);
            }
        }
    }
    Ok(BuiltNetwork {
        network,
        nets: built,
    })
}
