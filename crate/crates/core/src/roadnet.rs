//! Dual-graph road network: intersections, directed segments, the link-wise
//! adjacency used for routing, and the JSON file format.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type EdgeId = usize;

/// Number of distinct relation labels after the 4-class road-type collapse.
pub const NUM_RELATIONS: usize = 16;

/// Tolerance (meters) when pairing a segment with its reverse twin.
const TWIN_LENGTH_TOLERANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeTag {
    TrafficSignal,
    Crossing,
    Stop,
    SpeedCamera,
    TurnCircle,
    BusStop,
    None,
}

impl NodeTag {
    pub const ALL: [NodeTag; 7] = [
        NodeTag::TrafficSignal,
        NodeTag::Crossing,
        NodeTag::Stop,
        NodeTag::SpeedCamera,
        NodeTag::TurnCircle,
        NodeTag::BusStop,
        NodeTag::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeTag::TrafficSignal => "traffic_signal",
            NodeTag::Crossing => "crossing",
            NodeTag::Stop => "stop",
            NodeTag::SpeedCamera => "speed_camera",
            NodeTag::TurnCircle => "turn_circle",
            NodeTag::BusStop => "bus_stop",
            NodeTag::None => "none",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap()
    }
}

impl FromStr for NodeTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown node tag {s:?}"))
    }
}

impl fmt::Display for NodeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoadType {
    Trunk,
    TrunkLink,
    FreewayLink,
    Primary,
    PrimaryLink,
    Secondary,
    SecondaryLink,
    Tertiary,
    TertiaryLink,
}

/// Coarse road class used to build relation labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RoadClass {
    Major = 0,
    MajorLink = 1,
    Minor = 2,
    MinorLink = 3,
}

impl RoadType {
    pub const ALL: [RoadType; 9] = [
        RoadType::Trunk,
        RoadType::TrunkLink,
        RoadType::FreewayLink,
        RoadType::Primary,
        RoadType::PrimaryLink,
        RoadType::Secondary,
        RoadType::SecondaryLink,
        RoadType::Tertiary,
        RoadType::TertiaryLink,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoadType::Trunk => "trunk",
            RoadType::TrunkLink => "trunk_link",
            RoadType::FreewayLink => "freeway_link",
            RoadType::Primary => "primary",
            RoadType::PrimaryLink => "primary_link",
            RoadType::Secondary => "secondary",
            RoadType::SecondaryLink => "secondary_link",
            RoadType::Tertiary => "tertiary",
            RoadType::TertiaryLink => "tertiary_link",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|t| *t == self).unwrap()
    }

    pub fn class(self) -> RoadClass {
        match self {
            RoadType::Trunk | RoadType::FreewayLink | RoadType::Primary => RoadClass::Major,
            RoadType::TrunkLink | RoadType::PrimaryLink => RoadClass::MajorLink,
            RoadType::Secondary | RoadType::Tertiary => RoadClass::Minor,
            RoadType::SecondaryLink | RoadType::TertiaryLink => RoadClass::MinorLink,
        }
    }
}

impl FromStr for RoadType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown road type {s:?}"))
    }
}

impl fmt::Display for RoadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Label of a connection between two road types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u8);

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// `class(from) * 4 + class(to)`.
pub fn relation_of(from: RoadType, to: RoadType) -> RelationId {
    RelationId(from.class() as u8 * 4 + to.class() as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    pub id: NodeId,
    pub lat: f64,
    pub lon: f64,
    pub tag: NodeTag,
    pub street_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSegment {
    pub id: EdgeId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    pub road_type: RoadType,
    pub length: f64,
    pub lanes: usize,
    pub one_way: bool,
    pub speed_limit: f64,
}

impl RoadSegment {
    /// Travel time at the speed limit, in seconds.
    pub fn free_flow_secs(&self) -> f64 {
        self.length / (self.speed_limit / 3.6)
    }
}

/// Link-wise adjacency derived from a validated set of segments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkAdjacency {
    pub out_links: Vec<Vec<EdgeId>>,
    /// Parallel to `out_links`: label of each listed pair.
    pub relation_label: Vec<Vec<RelationId>>,
}

/// Validated road network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    intersections: Vec<Intersection>,
    segments: Vec<RoadSegment>,
    twin: Vec<Option<EdgeId>>,
    adjacency: LinkAdjacency,
    in_links: Vec<Vec<(EdgeId, RelationId)>>,
    node_relation: Vec<RelationId>,
}

impl RoadNetwork {
    /// Validates the parts and derives all adjacency structures.
    pub fn new(mut intersections: Vec<Intersection>, mut segments: Vec<RoadSegment>) -> Result<Self> {
        intersections.sort_by_key(|n| n.id);
        segments.sort_by_key(|s| s.id);
        if intersections.is_empty() {
            return Err(Error::validation("network has no intersections"));
        }
        if segments.is_empty() {
            return Err(Error::validation("network has no segments"));
        }
        for (i, node) in intersections.iter().enumerate() {
            if node.id != i {
                return Err(Error::validation(format!(
                    "node ids must be dense and unique: expected id {i}, found node {}",
                    node.id
                )));
            }
            if node.street_count < 1 {
                return Err(Error::validation(format!("node {}: street_count must be >= 1", node.id)));
            }
            if !node.lat.is_finite() || !node.lon.is_finite() {
                return Err(Error::validation(format!("node {}: non-finite coordinate", node.id)));
            }
        }
        let n_nodes = intersections.len();
        for (i, seg) in segments.iter().enumerate() {
            if seg.id != i {
                return Err(Error::validation(format!(
                    "edge ids must be dense and unique: expected id {i}, found edge {}",
                    seg.id
                )));
            }
            for endpoint in [seg.from_node, seg.to_node] {
                if endpoint >= n_nodes {
                    return Err(Error::validation(format!(
                        "edge {}: references node {endpoint} but network has {n_nodes} nodes",
                        seg.id
                    )));
                }
            }
            if seg.from_node == seg.to_node {
                return Err(Error::validation(format!("edge {}: self loop on node {}", seg.id, seg.from_node)));
            }
            if !(seg.length > 0.0 && seg.length.is_finite()) {
                return Err(Error::validation(format!("edge {}: length must be > 0, got {}", seg.id, seg.length)));
            }
            if !(seg.speed_limit > 0.0 && seg.speed_limit.is_finite()) {
                return Err(Error::validation(format!(
                    "edge {}: speed limit must be > 0, got {}",
                    seg.id, seg.speed_limit
                )));
            }
            if seg.lanes < 1 {
                return Err(Error::validation(format!("edge {}: lanes must be >= 1", seg.id)));
            }
        }

        let twin = match_twins(&segments);
        let counts = street_counts(n_nodes, &segments, &twin);
        for node in &intersections {
            if node.street_count != counts[node.id] {
                return Err(Error::validation(format!(
                    "node {}: street_count {} does not match {} incident streets",
                    node.id, node.street_count, counts[node.id]
                )));
            }
        }
        check_weakly_connected(n_nodes, &segments)?;

        let adjacency = build_link_adjacency(&intersections, &segments, &twin);
        let mut in_links = vec![Vec::new(); segments.len()];
        for (i, (outs, rels)) in adjacency.out_links.iter().zip(&adjacency.relation_label).enumerate() {
            for (&j, &r) in outs.iter().zip(rels) {
                in_links[j].push((i, r));
            }
        }
        let node_relation = node_relations(n_nodes, &segments);
        Ok(Self { intersections, segments, twin, adjacency, in_links, node_relation })
    }

    pub fn intersections(&self) -> &[Intersection] {
        &self.intersections
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn num_nodes(&self) -> usize {
        self.intersections.len()
    }

    pub fn num_edges(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, id: EdgeId) -> &RoadSegment {
        &self.segments[id]
    }

    pub fn reverse_twin(&self, id: EdgeId) -> Option<EdgeId> {
        self.twin[id]
    }

    pub fn out_links(&self, id: EdgeId) -> &[EdgeId] {
        &self.adjacency.out_links[id]
    }

    pub fn out_relations(&self, id: EdgeId) -> &[RelationId] {
        &self.adjacency.relation_label[id]
    }

    /// Predecessors of a segment in the link graph, with the pair label.
    pub fn in_links(&self, id: EdgeId) -> &[(EdgeId, RelationId)] {
        &self.in_links[id]
    }

    pub fn adjacency(&self) -> &LinkAdjacency {
        &self.adjacency
    }

    pub fn is_adjacent(&self, from: EdgeId, to: EdgeId) -> bool {
        self.adjacency.out_links[from].contains(&to)
    }

    /// Relation label of each intersection, derived from its two most major
    /// incident segment types.
    pub fn node_relation(&self, node: NodeId) -> RelationId {
        self.node_relation[node]
    }

    /// In-neighbors of each node in the node-wise graph (deduplicated).
    pub fn node_in_neighbors(&self) -> Vec<Vec<NodeId>> {
        let mut nbrs = vec![Vec::new(); self.num_nodes()];
        for seg in &self.segments {
            if !nbrs[seg.to_node].contains(&seg.from_node) {
                nbrs[seg.to_node].push(seg.from_node);
            }
        }
        for list in &mut nbrs {
            list.sort_unstable();
        }
        nbrs
    }

    pub fn free_flow_secs(&self) -> Vec<f64> {
        self.segments.iter().map(RoadSegment::free_flow_secs).collect()
    }

    /// Canonical JSON text; see [`save_network`].
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"nodes\": [\n");
        for (i, n) in self.intersections.iter().enumerate() {
            let sep = if i + 1 == self.intersections.len() { "" } else { "," };
            let _ = writeln!(
                out,
                "    {{\"id\": {}, \"lat\": {:.6}, \"lon\": {:.6}, \"tag\": \"{}\", \"street_count\": {}}}{sep}",
                n.id, n.lat, n.lon, n.tag, n.street_count
            );
        }
        out.push_str("  ],\n  \"edges\": [\n");
        for (i, s) in self.segments.iter().enumerate() {
            let sep = if i + 1 == self.segments.len() { "" } else { "," };
            let _ = writeln!(
                out,
                "    {{\"id\": {}, \"u\": {}, \"v\": {}, \"type\": \"{}\", \"length_m\": {:.6}, \"lanes\": {}, \"one_way\": {}, \"speed_kph\": {:.6}}}{sep}",
                s.id, s.from_node, s.to_node, s.road_type, s.length, s.lanes, s.one_way, s.speed_limit
            );
        }
        out.push_str("  ]\n}\n");
        out
    }

    /// Parses and validates the network JSON format.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct RawNode {
            id: usize,
            lat: f64,
            lon: f64,
            tag: String,
            street_count: usize,
        }
        #[derive(Deserialize)]
        struct RawEdge {
            id: usize,
            u: usize,
            v: usize,
            #[serde(rename = "type")]
            road_type: String,
            length_m: f64,
            lanes: usize,
            one_way: bool,
            speed_kph: f64,
        }
        #[derive(Deserialize)]
        struct RawNetwork {
            nodes: Vec<RawNode>,
            edges: Vec<RawEdge>,
        }

        let raw: RawNetwork = serde_json::from_str(text).map_err(|e| Error::Parse(format!("network JSON: {e}")))?;
        let intersections = raw
            .nodes
            .into_iter()
            .map(|n| {
                let tag = n.tag.parse().map_err(|e| Error::validation(format!("node {}: {e}", n.id)))?;
                Ok(Intersection { id: n.id, lat: n.lat, lon: n.lon, tag, street_count: n.street_count })
            })
            .collect::<Result<Vec<_>>>()?;
        let segments = raw
            .edges
            .into_iter()
            .map(|e| {
                let road_type = e.road_type.parse().map_err(|m| Error::validation(format!("edge {}: {m}", e.id)))?;
                Ok(RoadSegment {
                    id: e.id,
                    from_node: e.u,
                    to_node: e.v,
                    road_type,
                    length: e.length_m,
                    lanes: e.lanes,
                    one_way: e.one_way,
                    speed_limit: e.speed_kph,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(intersections, segments)
    }

    /// 64-bit FNV-1a of the canonical JSON bytes.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<RoadNetwork> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RoadNetwork::from_json(&text)
}

pub fn save_network(network: &RoadNetwork, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, network.to_json()).map_err(|e| Error::io(path, e))
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Pairs each segment with its reverse twin: reversed endpoints and lengths
/// within one meter. Multi-edges are matched in insertion order.
fn match_twins(segments: &[RoadSegment]) -> Vec<Option<EdgeId>> {
    let mut twin = vec![None; segments.len()];
    for i in 0..segments.len() {
        if twin[i].is_some() {
            continue;
        }
        let a = &segments[i];
        let found = (i + 1..segments.len()).find(|&j| {
            let b = &segments[j];
            twin[j].is_none()
                && b.from_node == a.to_node
                && b.to_node == a.from_node
                && (b.length - a.length).abs() <= TWIN_LENGTH_TOLERANCE
        });
        if let Some(j) = found {
            twin[i] = Some(j);
            twin[j] = Some(i);
        }
    }
    twin
}

/// Distinct incident streets per node, counting a twin pair once.
fn street_counts(n_nodes: usize, segments: &[RoadSegment], twin: &[Option<EdgeId>]) -> Vec<usize> {
    let mut counts = vec![0usize; n_nodes];
    for (i, seg) in segments.iter().enumerate() {
        if matches!(twin[i], Some(t) if t < i) {
            continue;
        }
        counts[seg.from_node] += 1;
        counts[seg.to_node] += 1;
    }
    counts
}

fn check_weakly_connected(n_nodes: usize, segments: &[RoadSegment]) -> Result<()> {
    let mut nbrs = vec![Vec::new(); n_nodes];
    for s in segments {
        nbrs[s.from_node].push(s.to_node);
        nbrs[s.to_node].push(s.from_node);
    }
    let mut seen = vec![false; n_nodes];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &nbrs[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(node) => {
            Err(Error::validation(format!("network is not weakly connected: node {node} is unreachable from node 0")))
        }
        None => Ok(()),
    }
}

fn build_link_adjacency(
    intersections: &[Intersection],
    segments: &[RoadSegment],
    twin: &[Option<EdgeId>],
) -> LinkAdjacency {
    let mut leaving = vec![Vec::new(); intersections.len()];
    for s in segments {
        leaving[s.from_node].push(s.id);
    }
    let mut out_links = Vec::with_capacity(segments.len());
    let mut relation_label = Vec::with_capacity(segments.len());
    for (i, seg) in segments.iter().enumerate() {
        let outs: Vec<EdgeId> =
            leaving[seg.to_node].iter().copied().filter(|&j| j != i && Some(j) != twin[i]).collect();
        relation_label.push(outs.iter().map(|&j| relation_of(seg.road_type, segments[j].road_type)).collect());
        out_links.push(outs);
    }
    LinkAdjacency { out_links, relation_label }
}

/// Derives the link-wise adjacency for a validated network.
pub fn build_link_adjacency_for(network: &RoadNetwork) -> LinkAdjacency {
    build_link_adjacency(&network.intersections, &network.segments, &network.twin)
}

fn node_relations(n_nodes: usize, segments: &[RoadSegment]) -> Vec<RelationId> {
    let mut incident: Vec<Vec<RoadType>> = vec![Vec::new(); n_nodes];
    for s in segments {
        incident[s.from_node].push(s.road_type);
        incident[s.to_node].push(s.road_type);
    }
    incident
        .into_iter()
        .map(|mut types| {
            types.sort_by_key(|t| (t.class(), t.index()));
            match types.as_slice() {
                [] => RelationId(0),
                [only] => relation_of(*only, *only),
                [first, rest @ ..] => {
                    // Through-pair: the most major type and the next segment
                    // of a different street, which for a twin pair is the
                    // same type again.
                    let second = rest.iter().find(|t| *t != first).unwrap_or(first);
                    relation_of(*first, *second)
                }
            }
        })
        .collect()
}

/// Small hand-built networks for tests and self-checks.
pub mod fixtures {
    use super::*;

    pub fn node(id: usize, street_count: usize) -> Intersection {
        Intersection {
            id,
            lat: 34.0 + id as f64 * 0.001,
            lon: 108.0 + (id % 3) as f64 * 0.001,
            tag: NodeTag::None,
            street_count,
        }
    }

    pub fn seg(id: usize, u: usize, v: usize, road_type: RoadType, length: f64) -> RoadSegment {
        RoadSegment { id, from_node: u, to_node: v, road_type, length, lanes: 2, one_way: false, speed_limit: 50.0 }
    }

    /// Two-way streets along the given node pairs, twins at ids 2k and 2k+1.
    pub fn two_way(n_nodes: usize, streets: &[(usize, usize, RoadType, f64)]) -> RoadNetwork {
        let mut segments = Vec::new();
        let mut counts = vec![0; n_nodes];
        for &(u, v, t, len) in streets {
            segments.push(seg(segments.len(), u, v, t, len));
            segments.push(seg(segments.len(), v, u, t, len));
            counts[u] += 1;
            counts[v] += 1;
        }
        let nodes = (0..n_nodes).map(|i| node(i, counts[i])).collect();
        RoadNetwork::new(nodes, segments).unwrap()
    }

    /// 4-node ring, 8 directed segments.
    pub fn ring4() -> RoadNetwork {
        two_way(
            4,
            &[
                (0, 1, RoadType::Primary, 100.0),
                (1, 2, RoadType::Secondary, 200.0),
                (2, 3, RoadType::Primary, 150.0),
                (3, 0, RoadType::Tertiary, 120.0),
            ],
        )
    }
}
