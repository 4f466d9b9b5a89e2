//! Candidate route enumeration under a transition model, route scoring and
//! epsilon-greedy route selection.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::roadnet::{EdgeId, NodeId, RoadNetwork};

/// A simple path in the link graph: consecutive segments share a junction
/// and no segment repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    edges: Vec<EdgeId>,
    length: f64,
}

impl Route {
    pub fn new(network: &RoadNetwork, edges: Vec<EdgeId>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::validation("route has no edges"));
        }
        if let Some(&bad) = edges.iter().find(|&&e| e >= network.num_edges()) {
            return Err(Error::validation(format!("route references unknown edge {bad}")));
        }
        for (index, w) in edges.windows(2).enumerate() {
            if !network.is_adjacent(w[0], w[1]) {
                return Err(Error::NotAdjacent { index, from: w[0], to: w[1] });
            }
        }
        let mut seen = vec![false; network.num_edges()];
        for &e in &edges {
            if std::mem::replace(&mut seen[e], true) {
                return Err(Error::validation(format!("route repeats edge {e}")));
            }
        }
        let length = edges.iter().map(|&e| network.segment(e).length).sum();
        Ok(Self { edges, length })
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    /// Total length in meters.
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn origin(&self) -> EdgeId {
        self.edges[0]
    }

    pub fn dest(&self) -> EdgeId {
        *self.edges.last().unwrap()
    }

    /// Junctions strictly inside the route (one per consecutive edge pair).
    pub fn interior_nodes(&self, network: &RoadNetwork) -> Vec<NodeId> {
        self.edges[..self.edges.len() - 1].iter().map(|&e| network.segment(e).to_node).collect()
    }

    /// Free-flow traversal time of the edges, in seconds.
    pub fn free_flow_secs(&self, network: &RoadNetwork) -> f64 {
        self.edges.iter().map(|&e| network.segment(e).free_flow_secs()).sum()
    }

    /// `edge|edge|...` as used by the route CSV files.
    pub fn to_pipe_list(&self) -> String {
        self.edges.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("|")
    }
}

/// Row-stochastic transition probabilities over each segment's out-links,
/// stored flat in the order of `RoadNetwork::out_links`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    offsets: Vec<usize>,
    log_probs: Vec<f64>,
}

impl TransitionModel {
    /// Start offset of each segment's row in the flat pair order, plus the
    /// total number of pairs at the end.
    pub fn pair_offsets(network: &RoadNetwork) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(network.num_edges() + 1);
        offsets.push(0);
        for e in 0..network.num_edges() {
            offsets.push(offsets[e] + network.out_links(e).len());
        }
        offsets
    }

    /// Applies a per-row softmax to logits given in flat pair order.
    pub fn from_logits(network: &RoadNetwork, logits: &[f64]) -> Result<Self> {
        let offsets = Self::pair_offsets(network);
        if logits.len() != *offsets.last().unwrap() {
            return Err(Error::shape(
                "transition logits",
                format!("{} logits for {} adjacent pairs", logits.len(), offsets.last().unwrap()),
            ));
        }
        let mut log_probs = logits.to_vec();
        for w in offsets.windows(2) {
            let row = &mut log_probs[w[0]..w[1]];
            if row.is_empty() {
                continue;
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(Self { offsets, log_probs })
    }

    /// Log-probabilities already normalized per row (e.g. from the model).
    pub fn from_log_probs(network: &RoadNetwork, log_probs: Vec<f64>) -> Result<Self> {
        let offsets = Self::pair_offsets(network);
        if log_probs.len() != *offsets.last().unwrap() {
            return Err(Error::shape("transition log-probs", format!("{} entries", log_probs.len())));
        }
        Ok(Self { offsets, log_probs })
    }

    pub fn uniform(network: &RoadNetwork) -> Self {
        let offsets = Self::pair_offsets(network);
        Self::from_logits(network, &vec![0.0; *offsets.last().unwrap()]).unwrap()
    }

    pub fn num_pairs(&self) -> usize {
        self.log_probs.len()
    }

    /// Probabilities of one segment's row, aligned with its out-links.
    pub fn row(&self, from: EdgeId) -> Vec<f64> {
        self.row_log_probs(from).iter().map(|x| x.exp()).collect()
    }

    pub fn row_log_probs(&self, from: EdgeId) -> &[f64] {
        &self.log_probs[self.offsets[from]..self.offsets[from + 1]]
    }

    /// Flat index of the pair `from -> to`, if adjacent.
    pub fn pair_index(&self, network: &RoadNetwork, from: EdgeId, to: EdgeId) -> Option<usize> {
        network.out_links(from).iter().position(|&j| j == to).map(|p| self.offsets[from] + p)
    }

    pub fn log_prob(&self, network: &RoadNetwork, from: EdgeId, to: EdgeId) -> Option<f64> {
        self.pair_index(network, from, to).map(|k| self.log_probs[k])
    }
}

/// `sum_{i>=1} ln p(e_i | e_{i-1})`; zero for a single-edge route.
pub fn route_log_prob(edges: &[EdgeId], a: &TransitionModel, network: &RoadNetwork) -> Result<f64> {
    edges.windows(2).enumerate().try_fold(0.0, |acc, (index, w)| {
        a.log_prob(network, w[0], w[1]).map(|lp| acc + lp).ok_or(Error::NotAdjacent { index, from: w[0], to: w[1] })
    })
}

/// Mean edge times plus mean times of strictly interior junctions.
pub fn route_mean_time(route: &Route, field: &GaussianField, network: &RoadNetwork) -> f64 {
    field.total_mean(route.edges(), &route.interior_nodes(network))
}

/// Variance counterpart of [`route_mean_time`].
pub fn route_variance(route: &Route, field: &GaussianField, network: &RoadNetwork) -> f64 {
    field.total_variance(route.edges(), &route.interior_nodes(network))
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, EdgeId);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Minimum route length (origin and destination lengths included) from
/// every segment to `dest`, following out-links. `INFINITY` if unreachable.
pub fn lengths_to_dest(network: &RoadNetwork, dest: EdgeId) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; network.num_edges()];
    let mut heap = BinaryHeap::new();
    dist[dest] = network.segment(dest).length;
    heap.push(Reverse(HeapItem(dist[dest], dest)));
    while let Some(Reverse(HeapItem(d, e))) = heap.pop() {
        if d > dist[e] {
            continue;
        }
        for &(p, _) in network.in_links(e) {
            let nd = d + network.segment(p).length;
            if nd < dist[p] {
                dist[p] = nd;
                heap.push(Reverse(HeapItem(nd, p)));
            }
        }
    }
    dist
}

/// Length of the shortest route from `origin` to `dest`, both included.
pub fn shortest_length(network: &RoadNetwork, origin: EdgeId, dest: EdgeId) -> Result<f64> {
    let d = lengths_to_dest(network, dest)[origin];
    if d.is_finite() {
        Ok(d)
    } else {
        Err(Error::Unreachable { origin, dest })
    }
}

/// The shortest route itself; ties go to the lower segment id.
pub fn shortest_route(network: &RoadNetwork, origin: EdgeId, dest: EdgeId) -> Result<Route> {
    let to_dest = lengths_to_dest(network, dest);
    if !to_dest[origin].is_finite() {
        return Err(Error::Unreachable { origin, dest });
    }
    let mut edges = vec![origin];
    let mut at = origin;
    while at != dest {
        at = network
            .out_links(at)
            .iter()
            .copied()
            .min_by(|&a, &b| to_dest[a].total_cmp(&to_dest[b]).then(a.cmp(&b)))
            .expect("finite distance implies a successor");
        edges.push(at);
    }
    Route::new(network, edges)
}

/// Length slack for candidate pruning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthSlack {
    Meters(f64),
    /// Multiple of the shortest route length.
    ShortestFraction(f64),
}

impl LengthSlack {
    pub fn meters(self, shortest: f64) -> f64 {
        match self {
            LengthSlack::Meters(m) => m,
            LengthSlack::ShortestFraction(f) => f * shortest,
        }
    }
}

/// `"0.5x"` is half the shortest length; a bare number is meters.
impl std::str::FromStr for LengthSlack {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (num, frac) = match s.strip_suffix('x') {
            Some(n) => (n, true),
            None => (s.strip_suffix('m').unwrap_or(s), false),
        };
        let v: f64 = num.trim().parse().map_err(|_| format!("bad length slack {s:?}"))?;
        if !(v >= 0.0) {
            return Err(format!("length slack must be >= 0, got {s:?}"));
        }
        Ok(if frac { LengthSlack::ShortestFraction(v) } else { LengthSlack::Meters(v) })
    }
}

impl std::fmt::Display for LengthSlack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LengthSlack::Meters(m) => write!(f, "{m}"),
            LengthSlack::ShortestFraction(x) => write!(f, "{x}x"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub delta_lens: LengthSlack,
    pub delta_probs: f64,
    pub m: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { delta_lens: LengthSlack::ShortestFraction(0.5), delta_probs: 1e-4, m: 8 }
    }
}

impl SearchParams {
    /// No pruning at all; only `m` truncates.
    pub fn unpruned(m: usize) -> Self {
        Self { delta_lens: LengthSlack::Meters(f64::INFINITY), delta_probs: 0.0, m }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub route: Route,
    pub log_prob: f64,
}

/// Up to `m` routes from `origin` to `dest`, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub origin: EdgeId,
    pub dest: EdgeId,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn contains(&self, edges: &[EdgeId]) -> bool {
        self.candidates.iter().any(|c| c.route.edges() == edges)
    }
}

/// Candidate ordering: log-probability descending, then length ascending,
/// then edge ids lexicographically.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.route.length().total_cmp(&b.route.length()))
        .then_with(|| a.route.edges().cmp(b.route.edges()))
}

struct Dfs<'a> {
    network: &'a RoadNetwork,
    a: &'a TransitionModel,
    dest: EdgeId,
    to_dest: Vec<f64>,
    bound: f64,
    log_threshold: f64,
    m: usize,
    path: Vec<EdgeId>,
    on_path: Vec<bool>,
    found: Vec<Candidate>,
    /// Worst log-probability currently in the top-m, once `found` holds m.
    cutoff: f64,
}

impl Dfs<'_> {
    fn visit(&mut self, edge: EdgeId, length: f64, log_prob: f64) {
        if edge == self.dest {
            if length < self.bound {
                let route = Route { edges: self.path.clone(), length };
                self.found.push(Candidate { route, log_prob });
                if self.found.len() >= self.m.max(16).saturating_mul(2) {
                    self.compact();
                }
            }
            return;
        }
        let outs = self.network.out_links(edge);
        let lps = self.a.row_log_probs(edge);
        for (&next, &lp) in outs.iter().zip(lps) {
            if self.on_path[next] {
                continue;
            }
            let next_len = length + self.network.segment(next).length;
            let next_lp = log_prob + lp;
            // Partial length already at the bound (or provably reaching it),
            // running probability at or below the threshold, or unable to
            // enter the current top-m: every completion would be rejected.
            if next_len >= self.bound
                || length + self.to_dest[next] >= self.bound
                || next_lp <= self.log_threshold
                || next_lp < self.cutoff
            {
                continue;
            }
            self.path.push(next);
            self.on_path[next] = true;
            self.visit(next, next_len, next_lp);
            self.on_path[next] = false;
            self.path.pop();
        }
    }

    fn compact(&mut self) {
        self.found.sort_by(candidate_order);
        self.found.truncate(self.m);
        if self.found.len() == self.m {
            self.cutoff = self.found[self.m - 1].log_prob;
        }
    }
}

/// Depth-first enumeration of simple routes from `origin` to `dest` under
/// the length and probability pruning rules, keeping the best `m`.
///
/// An empty candidate set is a valid outcome when the thresholds exclude
/// every route.
pub fn enumerate_candidates(
    network: &RoadNetwork,
    a: &TransitionModel,
    origin: EdgeId,
    dest: EdgeId,
    params: &SearchParams,
) -> Result<CandidateSet> {
    if origin == dest {
        return Err(Error::validation(format!("origin and destination are the same edge {origin}")));
    }
    if !(0.0..1.0).contains(&params.delta_probs) {
        return Err(Error::validation(format!("delta_probs must be in [0, 1), got {}", params.delta_probs)));
    }
    if params.m == 0 {
        return Err(Error::validation("m must be >= 1"));
    }
    let to_dest = lengths_to_dest(network, dest);
    let shortest = to_dest[origin];
    if !shortest.is_finite() {
        return Err(Error::Unreachable { origin, dest });
    }
    let slack = params.delta_lens.meters(shortest);
    if slack.is_nan() || slack < 0.0 {
        return Err(Error::validation(format!("delta_lens must be >= 0, got {slack}")));
    }
    let mut on_path = vec![false; network.num_edges()];
    on_path[origin] = true;
    let mut dfs = Dfs {
        network,
        a,
        dest,
        to_dest,
        bound: shortest + slack,
        log_threshold: params.delta_probs.ln(),
        m: params.m,
        path: vec![origin],
        on_path,
        found: Vec::new(),
        cutoff: f64::NEG_INFINITY,
    };
    let origin_len = network.segment(origin).length;
    if origin_len < dfs.bound {
        dfs.visit(origin, origin_len, 0.0);
    }
    dfs.compact();
    Ok(CandidateSet { origin, dest, candidates: dfs.found })
}

/// Index of the epsilon-greedy choice: with probability `1 - epsilon` the
/// candidate whose mean time is closest to `observed` (first in candidate
/// order on ties), otherwise a uniformly random candidate.
pub fn select_route<R: Rng + ?Sized>(
    candidates: &CandidateSet,
    observed: f64,
    field: &GaussianField,
    network: &RoadNetwork,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    assert!(!candidates.is_empty(), "select_route on an empty candidate set");
    let explore = rng.random::<f64>() < epsilon;
    let pick = rng.random_range(0..candidates.len());
    if explore {
        return pick;
    }
    best_match(candidates, observed, field, network)
}

/// Candidate minimizing `|observed - mean time|`.
pub fn best_match(candidates: &CandidateSet, observed: f64, field: &GaussianField, network: &RoadNetwork) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, c) in candidates.candidates.iter().enumerate() {
        let err = (observed - route_mean_time(&c.route, field, network)).abs();
        if err < best_err {
            best = i;
            best_err = err;
        }
    }
    best
}

/// Exhaustive reference enumeration without pruning, for cross-checking
/// [`enumerate_candidates`] on small graphs.
pub mod oracle {
    use super::*;

    /// Every simple route from `origin` to `dest`, scored and sorted by
    /// [`candidate_order`].
    pub fn all_simple_routes(
        network: &RoadNetwork,
        a: &TransitionModel,
        origin: EdgeId,
        dest: EdgeId,
    ) -> Vec<Candidate> {
        fn walk(network: &RoadNetwork, dest: EdgeId, path: &mut Vec<EdgeId>, out: &mut Vec<Vec<EdgeId>>) {
            let last = *path.last().unwrap();
            if last == dest {
                out.push(path.clone());
                return;
            }
            for &next in network.out_links(last) {
                if !path.contains(&next) {
                    path.push(next);
                    walk(network, dest, path, out);
                    path.pop();
                }
            }
        }
        let mut paths = Vec::new();
        walk(network, dest, &mut vec![origin], &mut paths);
        let mut scored: Vec<Candidate> = paths
            .into_iter()
            .map(|edges| {
                let log_prob = edges
                    .windows(2)
                    .map(|w| {
                        let pos = network.out_links(w[0]).iter().position(|&j| j == w[1]).unwrap();
                        a.row(w[0])[pos].ln()
                    })
                    .sum();
                let length = edges.iter().map(|&e| network.segment(e).length).sum();
                Candidate { route: Route { edges, length }, log_prob }
            })
            .collect();
        scored.sort_by(candidate_order);
        scored
    }
}
