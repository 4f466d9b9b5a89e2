//! Synthetic cities with known travel-time distributions and weakly labeled
//! OD datasets whose true routes are kept aside for evaluation.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Context, ODRecord, TripGroundTruth, NUM_HOLIDAY, NUM_WEATHER};
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::roadnet::{EdgeId, Intersection, NodeTag, RoadClass, RoadNetwork, RoadSegment, RoadType};
use crate::routesearch::{route_mean_time, Route};

const BASE_LAT: f64 = 34.25;
const BASE_LON: f64 = 108.94;
const BLOCK_METERS: f64 = 400.0;
const JITTER_FRACTION: f64 = 0.12;
const METERS_PER_DEG_LAT: f64 = 111_320.0;

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn line_type(index: usize) -> (RoadType, usize, f64) {
    match index % 3 {
        0 => (RoadType::Primary, 3, 80.0),
        1 => (RoadType::Secondary, 2, 50.0),
        _ => (RoadType::Tertiary, 1, 30.0),
    }
}

/// Perturbed `rows x cols` grid with two-way streets on the lattice lines.
/// Every third line is a primary arterial; the rest alternate secondary and
/// tertiary. Coordinates and lengths are rounded to 6 decimals so the
/// in-memory network equals its saved form.
pub fn generate_city(rows: usize, cols: usize, seed: u64) -> Result<RoadNetwork> {
    if rows < 2 || cols < 2 {
        return Err(Error::validation(format!("city must be at least 2x2, got {rows}x{cols}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let meters_per_deg_lon = METERS_PER_DEG_LAT * BASE_LAT.to_radians().cos();
    let jitter = JITTER_FRACTION * BLOCK_METERS;
    let mut xy = Vec::with_capacity(rows * cols);
    let mut nodes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let y = r as f64 * BLOCK_METERS + rng.random_range(-jitter..jitter);
            let x = c as f64 * BLOCK_METERS + rng.random_range(-jitter..jitter);
            let lat = round6(BASE_LAT + y / METERS_PER_DEG_LAT);
            let lon = round6(BASE_LON + x / meters_per_deg_lon);
            xy.push(((lon - BASE_LON) * meters_per_deg_lon, (lat - BASE_LAT) * METERS_PER_DEG_LAT));
            let majors = (r % 3 == 0) as u8 + (c % 3 == 0) as u8;
            let tag = match majors {
                2 => NodeTag::TrafficSignal,
                1 if rng.random_bool(0.5) => NodeTag::TrafficSignal,
                1 => NodeTag::Crossing,
                _ if rng.random_bool(0.3) => NodeTag::Crossing,
                _ => NodeTag::None,
            };
            let street_count = [r > 0, r + 1 < rows, c > 0, c + 1 < cols].iter().filter(|b| **b).count();
            nodes.push(Intersection { id: r * cols + c, lat, lon, tag, street_count });
        }
    }

    let mut segments = Vec::new();
    let mut add_street = |u: usize, v: usize, line: usize| {
        let (road_type, lanes, speed) = line_type(line);
        let length = round6(((xy[u].0 - xy[v].0).powi(2) + (xy[u].1 - xy[v].1).powi(2)).sqrt());
        for (a, b) in [(u, v), (v, u)] {
            segments.push(RoadSegment {
                id: segments.len(),
                from_node: a,
                to_node: b,
                road_type,
                length,
                lanes,
                one_way: false,
                speed_limit: speed,
            });
        }
    };
    for r in 0..rows {
        for c in 0..cols - 1 {
            add_street(r * cols + c, r * cols + c + 1, r);
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            add_street(r * cols + c, (r + 1) * cols + c, c);
        }
    }
    RoadNetwork::new(nodes, segments)
}

/// Congestion shape over the day: 1 within an hour of 08:00 or 18:00,
/// tapering linearly to 0 over the following two hours.
pub fn peak_level(hour: f64) -> f64 {
    let d = (hour - 8.0).abs().min((hour - 18.0).abs());
    if d <= 1.0 {
        1.0
    } else {
        (1.0 - (d - 1.0) / 2.0).max(0.0)
    }
}

pub fn slot_mid_hour(slot: usize, slots: usize) -> f64 {
    (slot as f64 + 0.5) * 24.0 / slots as f64
}

/// Slots whose midpoint falls on a full peak.
pub fn peak_slots(slots: usize) -> Vec<usize> {
    (0..slots).filter(|&s| peak_level(slot_mid_hour(s, slots)) >= 1.0).collect()
}

fn congestion_amplitude(class: RoadClass) -> f64 {
    match class {
        RoadClass::Major | RoadClass::MajorLink => 0.7,
        RoadClass::Minor | RoadClass::MinorLink => 2.0,
    }
}

/// Peak-time mean delay range (seconds) of each intersection tag.
fn tag_delay_range(tag: NodeTag) -> (f64, f64) {
    match tag {
        NodeTag::TrafficSignal => (20.0, 40.0),
        NodeTag::Crossing | NodeTag::Stop => (5.0, 10.0),
        NodeTag::SpeedCamera | NodeTag::TurnCircle | NodeTag::BusStop => (2.0, 5.0),
        NodeTag::None => (0.0, 0.0),
    }
}

pub const EDGE_SIGMA_FRACTION: f64 = 0.15;
pub const NODE_SIGMA_FRACTION: f64 = 0.25;
pub const NODE_SIGMA_FLOOR: f64 = 0.1;

/// True travel-time distributions per segment and intersection per slot,
/// under the neutral context (weather 0, no holiday).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleField {
    /// `[edge, slot]`, seconds.
    pub mu_e: Array2<f64>,
    pub sigma_e: Array2<f64>,
    /// `[node, slot]`, seconds.
    pub mu_v: Array2<f64>,
    pub sigma_v: Array2<f64>,
}

impl OracleField {
    pub fn slots(&self) -> usize {
        self.mu_e.ncols()
    }

    /// Distributions for one slot under a context. The context scales the
    /// congestion above free flow and the intersection delays.
    pub fn field(&self, network: &RoadNetwork, slot: usize, ctx: Context) -> GaussianField {
        let m = ctx.congestion_multiplier();
        let mut f = GaussianField {
            mu_e: Vec::with_capacity(network.num_edges()),
            sigma_e: Vec::with_capacity(network.num_edges()),
            mu_v: Vec::with_capacity(network.num_nodes()),
            sigma_v: Vec::with_capacity(network.num_nodes()),
        };
        for (e, seg) in network.segments().iter().enumerate() {
            let ff = seg.free_flow_secs();
            let base = self.mu_e[[e, slot]];
            let mu = ff + (base - ff) * m;
            f.mu_e.push(mu);
            f.sigma_e.push(if base > 0.0 { self.sigma_e[[e, slot]] * mu / base } else { self.sigma_e[[e, slot]] });
        }
        for v in 0..network.num_nodes() {
            let base = self.mu_v[[v, slot]];
            f.mu_v.push(base * m);
            f.sigma_v.push(if base > 0.0 { self.sigma_v[[v, slot]] * m } else { self.sigma_v[[v, slot]] });
        }
        f
    }

    /// `kind,id,slot,mu,sigma` rows, edges first.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut write =
            |row: [String; 5]| w.write_record(row).map_err(|e| Error::Parse(format!("{}: {e}", path.display())));
        write(["kind", "id", "slot", "mu", "sigma"].map(String::from))?;
        for (kind, mu, sigma) in [("e", &self.mu_e, &self.sigma_e), ("v", &self.mu_v, &self.sigma_v)] {
            for ((id, slot), m) in mu.indexed_iter() {
                write([
                    kind.to_string(),
                    id.to_string(),
                    slot.to_string(),
                    format!("{m:.6}"),
                    format!("{:.6}", sigma[[id, slot]]),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, network: &RoadNetwork) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| Error::Parse(format!("{}: {msg}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let mut rows = Vec::new();
        for row in r.records() {
            let row = row.map_err(|e| err(e.to_string()))?;
            let get = |i: usize| row.get(i).ok_or_else(|| err(format!("short row {row:?}")));
            let kind = get(0)?.to_string();
            let id: usize = get(1)?.parse().map_err(|_| err(format!("bad id in {row:?}")))?;
            let slot: usize = get(2)?.parse().map_err(|_| err(format!("bad slot in {row:?}")))?;
            let mu: f64 = get(3)?.parse().map_err(|_| err(format!("bad mu in {row:?}")))?;
            let sigma: f64 = get(4)?.parse().map_err(|_| err(format!("bad sigma in {row:?}")))?;
            rows.push((kind, id, slot, mu, sigma));
        }
        let slots = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
        let (ne, nv) = (network.num_edges(), network.num_nodes());
        let mut f = OracleField {
            mu_e: Array2::from_elem((ne, slots), f64::NAN),
            sigma_e: Array2::from_elem((ne, slots), f64::NAN),
            mu_v: Array2::from_elem((nv, slots), f64::NAN),
            sigma_v: Array2::from_elem((nv, slots), f64::NAN),
        };
        for (kind, id, slot, mu, sigma) in rows {
            let (m, s, n) = match kind.as_str() {
                "e" => (&mut f.mu_e, &mut f.sigma_e, ne),
                "v" => (&mut f.mu_v, &mut f.sigma_v, nv),
                other => return Err(err(format!("unknown kind {other:?}"))),
            };
            if id >= n {
                return Err(err(format!("{kind} id {id} out of range")));
            }
            m[[id, slot]] = mu;
            s[[id, slot]] = sigma;
        }
        if f.mu_e.iter().chain(f.mu_v.iter()).any(|x| x.is_nan()) {
            return Err(err("oracle file does not cover every entity and slot".into()));
        }
        Ok(f)
    }
}

/// Draws the oracle: edge means are free-flow time times a congestion
/// factor in `[1, 4]` that peaks in the morning and evening, with
/// `sigma = 0.15 mu`; intersection delays depend on the tag with
/// `sigma = 0.25 mu` floored at 0.1 s.
pub fn assign_oracle(network: &RoadNetwork, slots: usize, seed: u64) -> Result<OracleField> {
    if slots == 0 {
        return Err(Error::validation("slots must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edge_factor: Vec<f64> = (0..network.num_edges()).map(|_| rng.random_range(0.9..1.1)).collect();
    let node_delay: Vec<f64> = network
        .intersections()
        .iter()
        .map(|n| {
            let (lo, hi) = tag_delay_range(n.tag);
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect();
    let (ne, nv) = (network.num_edges(), network.num_nodes());
    let mut f = OracleField {
        mu_e: Array2::zeros((ne, slots)),
        sigma_e: Array2::zeros((ne, slots)),
        mu_v: Array2::zeros((nv, slots)),
        sigma_v: Array2::zeros((nv, slots)),
    };
    for s in 0..slots {
        let peak = peak_level(slot_mid_hour(s, slots));
        for (e, seg) in network.segments().iter().enumerate() {
            let congestion =
                (1.0 + congestion_amplitude(seg.road_type.class()) * peak * edge_factor[e]).clamp(1.0, 4.0);
            let mu = round6(seg.free_flow_secs() * congestion);
            f.mu_e[[e, s]] = mu;
            f.sigma_e[[e, s]] = round6(EDGE_SIGMA_FRACTION * mu);
        }
        for v in 0..nv {
            let mu = round6(node_delay[v] * (0.5 + 0.5 * peak));
            f.mu_v[[v, s]] = mu;
            f.sigma_v[[v, s]] = round6((NODE_SIGMA_FRACTION * mu).max(NODE_SIGMA_FLOOR));
        }
    }
    Ok(f)
}

/// Number of transitions on the fewest-edge route from `origin` to each edge.
pub fn hop_distances(network: &RoadNetwork, origin: EdgeId) -> Vec<Option<usize>> {
    let mut hops = vec![None; network.num_edges()];
    hops[origin] = Some(0);
    let mut queue = VecDeque::from([origin]);
    while let Some(e) = queue.pop_front() {
        let h = hops[e].unwrap();
        for &n in network.out_links(e) {
            if hops[n].is_none() {
                hops[n] = Some(h + 1);
                queue.push_back(n);
            }
        }
    }
    hops
}

/// Cheapest route under the field's mean times, avoiding banned edges and
/// banned transitions.
fn cheapest_route(
    network: &RoadNetwork,
    field: &GaussianField,
    origin: EdgeId,
    dest: EdgeId,
    banned_edges: &[bool],
    banned_pairs: &HashSet<(EdgeId, EdgeId)>,
) -> Option<Vec<EdgeId>> {
    let n = network.num_edges();
    let mut cost = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    cost[origin] = field.mu_e[origin];
    heap.push(Reverse((ordered(cost[origin]), origin)));
    while let Some(Reverse((c, e))) = heap.pop() {
        let c = c.0;
        if c > cost[e] {
            continue;
        }
        if e == dest {
            break;
        }
        let junction = network.segment(e).to_node;
        for &next in network.out_links(e) {
            if banned_edges[next] || banned_pairs.contains(&(e, next)) {
                continue;
            }
            let nc = c + field.mu_v[junction] + field.mu_e[next];
            if nc < cost[next] {
                cost[next] = nc;
                prev[next] = e;
                heap.push(Reverse((ordered(nc), next)));
            }
        }
    }
    if !cost[dest].is_finite() {
        return None;
    }
    let mut path = vec![dest];
    while *path.last().unwrap() != origin {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    Some(path)
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct Ordered(f64);

impl Eq for Ordered {}

impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn ordered(x: f64) -> Ordered {
    Ordered(x)
}

/// Up to `k` lowest-mean-time simple routes (Yen's algorithm), fastest first.
pub fn k_fastest_routes(
    network: &RoadNetwork,
    field: &GaussianField,
    origin: EdgeId,
    dest: EdgeId,
    k: usize,
) -> Vec<(f64, Route)> {
    let mean_of = |edges: &[EdgeId]| {
        let interior: Vec<_> = edges[..edges.len() - 1].iter().map(|&e| network.segment(e).to_node).collect();
        field.total_mean(edges, &interior)
    };
    let none_banned = vec![false; network.num_edges()];
    let Some(first) = cheapest_route(network, field, origin, dest, &none_banned, &HashSet::new()) else {
        return Vec::new();
    };
    let mut accepted: Vec<(f64, Vec<EdgeId>)> = vec![(mean_of(&first), first)];
    let mut pending: Vec<(f64, Vec<EdgeId>)> = Vec::new();
    while accepted.len() < k {
        let last = accepted.last().unwrap().1.clone();
        for i in 0..last.len() - 1 {
            let root = &last[..=i];
            let banned_pairs: HashSet<_> = accepted
                .iter()
                .filter(|(_, p)| p.len() > i + 1 && &p[..=i] == root)
                .map(|(_, p)| (p[i], p[i + 1]))
                .collect();
            let mut banned = none_banned.clone();
            for &e in &root[..i] {
                banned[e] = true;
            }
            if let Some(spur) = cheapest_route(network, field, last[i], dest, &banned, &banned_pairs) {
                let mut total = root[..i].to_vec();
                total.extend(spur);
                if !accepted.iter().any(|(_, p)| *p == total) && !pending.iter().any(|(_, p)| *p == total) {
                    pending.push((mean_of(&total), total));
                }
            }
        }
        if pending.is_empty() {
            break;
        }
        let best = (0..pending.len())
            .min_by(|&a, &b| pending[a].0.total_cmp(&pending[b].0).then_with(|| pending[a].1.cmp(&pending[b].1)))
            .unwrap();
        accepted.push(pending.swap_remove(best));
    }
    accepted
        .into_iter()
        .map(|(t, edges)| (t, Route::new(network, edges).expect("Yen routes are simple and connected")))
        .collect()
}

/// One draw of the route's total time: each edge and interior junction
/// time sampled independently from its Gaussian. Not clamped.
pub fn draw_route_time<R: Rng + ?Sized>(
    route: &Route,
    field: &GaussianField,
    network: &RoadNetwork,
    rng: &mut R,
) -> f64 {
    let mut draw = |mu: f64, sigma: f64| {
        if sigma > 0.0 {
            Normal::new(mu, sigma).unwrap().sample(rng)
        } else {
            mu
        }
    };
    let edges = route.edges();
    let mut total = 0.0;
    for (i, &e) in edges.iter().enumerate() {
        total += draw(field.mu_e[e], field.sigma_e[e]);
        if i + 1 < edges.len() {
            let v = network.segment(e).to_node;
            total += draw(field.mu_v[v], field.sigma_v[v]);
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripConfig {
    /// Routes considered by the simulated driver.
    pub k_routes: usize,
    /// Route-choice softmax temperature in seconds; 0 picks the fastest.
    pub tau_choice: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Observed times are floored at this fraction of route free-flow time.
    pub clamp_fraction: f64,
    pub max_retries: usize,
    pub first_record_index: usize,
    /// Fixed context; drawn from the seed when `None`.
    pub context: Option<Context>,
}

impl Default for TripConfig {
    fn default() -> Self {
        Self {
            k_routes: 8,
            tau_choice: 60.0,
            min_hops: 3,
            max_hops: 25,
            clamp_fraction: 0.5,
            max_retries: 1000,
            first_record_index: 0,
            context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripSample {
    pub context: Context,
    pub records: Vec<ODRecord>,
    pub truths: Vec<TripGroundTruth>,
}

fn trip_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples `n` trips in one slot. Each trip draws an OD pair uniformly
/// among pairs at an allowed hop distance, lets the driver pick one of the
/// `k` fastest routes by a softmax over negative mean time, and observes
/// the sum of independent Gaussian component times.
///
/// Trip `i` uses its own random stream derived from `(seed, i)`, so the
/// output does not depend on how the work is split across threads.
pub fn sample_trips(
    network: &RoadNetwork,
    oracle: &OracleField,
    n: usize,
    slot: usize,
    seed: u64,
    config: &TripConfig,
) -> Result<TripSample> {
    if n == 0 {
        return Err(Error::validation("n must be >= 1"));
    }
    if slot >= oracle.slots() {
        return Err(Error::validation(format!("slot {slot} >= {}", oracle.slots())));
    }
    let context = config.context.unwrap_or_else(|| {
        let mut rng = trip_rng(seed, 0);
        Context { weather: rng.random_range(0..NUM_WEATHER), holiday: rng.random_range(0..NUM_HOLIDAY) }
    });
    let field = oracle.field(network, slot, context);
    let trips: Vec<(ODRecord, TripGroundTruth)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trip_rng(seed, i as u64 + 1);
            let record_index = config.first_record_index + i;
            let ne = network.num_edges();
            let (origin, dest) = (0..config.max_retries)
                .find_map(|_| {
                    let o = rng.random_range(0..ne);
                    let d = rng.random_range(0..ne);
                    let hops = hop_distances(network, o)[d]?;
                    (o != d && (config.min_hops..=config.max_hops).contains(&hops)).then_some((o, d))
                })
                .ok_or_else(|| {
                    Error::validation(format!(
                        "trip {record_index}: no reachable OD pair within {} draws",
                        config.max_retries
                    ))
                })?;
            let routes = k_fastest_routes(network, &field, origin, dest, config.k_routes);
            let chosen = choose_route(&routes, config.tau_choice, &mut rng);
            let route = &routes[chosen].1;
            let floor = config.clamp_fraction * route.free_flow_secs(network);
            let observed = round6(draw_route_time(route, &field, network, &mut rng).max(floor));
            let record = ODRecord {
                record_index,
                origin_edge: origin,
                dest_edge: dest,
                slot,
                weather: context.weather,
                holiday: context.holiday,
                observed_t: observed,
            };
            Ok((record, TripGroundTruth { record_index, edges: route.edges().to_vec() }))
        })
        .collect::<Result<_>>()?;
    let (records, truths) = trips.into_iter().unzip();
    Ok(TripSample { context, records, truths })
}

/// Driver's probability of taking each of `routes` (fastest first): a
/// softmax over negative mean time at temperature `tau` seconds.
pub fn route_choice_probs(routes: &[(f64, Route)], tau: f64) -> Vec<f64> {
    if tau <= 0.0 || routes.len() == 1 {
        let mut p = vec![0.0; routes.len()];
        p[0] = 1.0;
        return p;
    }
    let best = routes[0].0;
    let weights: Vec<f64> = routes.iter().map(|(t, _)| (-(t - best) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn choose_route<R: Rng + ?Sized>(routes: &[(f64, Route)], tau: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in route_choice_probs(routes, tau).into_iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    routes.len() - 1
}

/// Mean times and driver choice probabilities of the `k` fastest routes
/// between two segments.
pub fn od_route_choices(
    network: &RoadNetwork,
    field: &GaussianField,
    origin: EdgeId,
    dest: EdgeId,
    config: &TripConfig,
) -> Result<Vec<(f64, f64)>> {
    let routes = k_fastest_routes(network, field, origin, dest, config.k_routes);
    if routes.is_empty() {
        return Err(Error::Unreachable { origin, dest });
    }
    Ok(route_choice_probs(&routes, config.tau_choice).into_iter().zip(routes).map(|(p, (t, _))| (p, t)).collect())
}

/// Expected absolute percentage error of predicting `observed` by the mean
/// time of a route drawn from the driver's own choice distribution.
pub fn replicate_ape(choices: &[(f64, f64)], observed: f64) -> f64 {
    choices.iter().map(|(p, t)| p * (observed - t).abs() / observed).sum()
}

/// Oracle mean time of a route under one slot and context.
pub fn oracle_route_mean(oracle: &OracleField, network: &RoadNetwork, route: &Route, slot: usize, ctx: Context) -> f64 {
    route_mean_time(route, &oracle.field(network, slot, ctx), network)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routesearch::oracle::all_simple_routes;
    use crate::routesearch::TransitionModel;

    #[test]
    fn smallest_city() {
        let net = generate_city(2, 2, 7).unwrap();
        assert_eq!(net.num_nodes(), 4);
        assert_eq!(net.num_edges(), 8);
        assert!(generate_city(1, 5, 7).is_err());
    }

    #[test]
    fn ten_by_ten_structure() {
        let net = generate_city(10, 10, 1).unwrap();
        assert_eq!(net.num_nodes(), 100);
        assert_eq!(net.num_edges(), 2 * (10 * 9 * 2));
        assert!(net.intersections().iter().all(|n| n.street_count >= 2));
        // Loading validates weak connectivity and street counts.
        let back = RoadNetwork::from_json(&net.to_json()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn city_is_deterministic() {
        assert_eq!(generate_city(5, 4, 3).unwrap(), generate_city(5, 4, 3).unwrap());
        assert_ne!(generate_city(5, 4, 3).unwrap(), generate_city(5, 4, 4).unwrap());
    }

    #[test]
    fn oracle_rules() {
        let net = generate_city(6, 6, 2).unwrap();
        let slots = 24;
        let o = assign_oracle(&net, slots, 5).unwrap();
        for (v, node) in net.intersections().iter().enumerate() {
            for s in 0..slots {
                assert!(o.sigma_v[[v, s]] > 0.0);
                if node.tag == NodeTag::None {
                    assert_eq!(o.mu_v[[v, s]], 0.0);
                }
            }
        }
        let peak = peak_slots(slots)[0];
        let off = 3; // 03:30
        assert_eq!(peak_level(slot_mid_hour(off, slots)), 0.0);
        for (e, seg) in net.segments().iter().enumerate() {
            let ff = seg.free_flow_secs();
            assert!(o.mu_e[[e, off]] >= round6(ff) - 1e-6);
            assert!(o.sigma_e[[e, off]] > 0.0);
            if seg.road_type.class() == RoadClass::Major {
                let ratio = o.mu_e[[e, peak]] / o.mu_e[[e, off]];
                assert!((1.5..=4.0).contains(&ratio), "{ratio}");
            }
        }
    }

    #[test]
    fn traffic_signal_delay_at_peak() {
        let net = generate_city(6, 6, 2).unwrap();
        let o = assign_oracle(&net, 24, 5).unwrap();
        let peak = peak_slots(24)[0];
        for (v, node) in net.intersections().iter().enumerate() {
            match node.tag {
                NodeTag::TrafficSignal => assert!((20.0..=40.0).contains(&o.mu_v[[v, peak]])),
                NodeTag::Crossing => assert!((5.0..=10.0).contains(&o.mu_v[[v, peak]])),
                _ => {}
            }
        }
    }

    #[test]
    fn oracle_csv_round_trip() {
        let net = generate_city(3, 3, 1).unwrap();
        let o = assign_oracle(&net, 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("oracle.csv");
        o.write_csv(&p).unwrap();
        assert_eq!(OracleField::read_csv(&p, &net).unwrap(), o);
    }

    #[test]
    fn yen_matches_brute_force_on_small_city() {
        let net = generate_city(3, 3, 4).unwrap();
        let o = assign_oracle(&net, 24, 1).unwrap();
        let field = o.field(&net, 8, Context::default());
        let uniform = TransitionModel::uniform(&net);
        for (origin, dest) in [(0, 17), (5, 22), (12, 3)] {
            let got = k_fastest_routes(&net, &field, origin, dest, 8);
            let mut all: Vec<(f64, Vec<EdgeId>)> = all_simple_routes(&net, &uniform, origin, dest)
                .into_iter()
                .map(|c| (route_mean_time(&c.route, &field, &net), c.route.edges().to_vec()))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            assert_eq!(got.len(), 8.min(all.len()));
            for ((t, r), (want_t, _)) in got.iter().zip(&all) {
                assert!((t - want_t).abs() < 1e-9, "{origin}->{dest}: {t} vs {want_t}");
                assert_eq!(r.origin(), origin);
                assert_eq!(r.dest(), dest);
            }
        }
    }

    #[test]
    fn noiseless_fastest_choice_reproduces_oracle_mean() {
        let net = generate_city(5, 5, 3).unwrap();
        let mut o = assign_oracle(&net, 4, 3).unwrap();
        o.sigma_e.fill(0.0);
        o.sigma_v.fill(0.0);
        let cfg = TripConfig { tau_choice: 0.0, ..Default::default() };
        let sample = sample_trips(&net, &o, 50, 1, 8, &cfg).unwrap();
        let field = o.field(&net, 1, sample.context);
        for (rec, truth) in sample.records.iter().zip(&sample.truths) {
            let fastest = &k_fastest_routes(&net, &field, rec.origin_edge, rec.dest_edge, 1)[0];
            assert_eq!(truth.edges, fastest.1.edges());
            assert!((rec.observed_t - round6(fastest.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn trips_are_valid_and_reproducible() {
        let net = generate_city(6, 6, 1).unwrap();
        let o = assign_oracle(&net, 4, 1).unwrap();
        let cfg = TripConfig { first_record_index: 100, ..Default::default() };
        let a = sample_trips(&net, &o, 40, 1, 17, &cfg).unwrap();
        let b = sample_trips(&net, &o, 40, 1, 17, &cfg).unwrap();
        assert_eq!(a, b);
        for (rec, truth) in a.records.iter().zip(&a.truths) {
            assert_eq!(rec.record_index, truth.record_index);
            assert!(rec.record_index >= 100);
            rec.validate(net.num_edges(), 4).unwrap();
            let route = Route::new(&net, truth.edges.clone()).unwrap();
            assert_eq!(route.origin(), rec.origin_edge);
            assert_eq!(route.dest(), rec.dest_edge);
            assert!(rec.observed_t >= 0.5 * route.free_flow_secs(&net) - 1e-6);
        }
    }

    #[test]
    fn sharded_sampling_matches_single_thread() {
        let net = generate_city(5, 5, 2).unwrap();
        let o = assign_oracle(&net, 4, 2).unwrap();
        let cfg = TripConfig::default();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_trips(&net, &o, 60, 2, 5, &cfg).unwrap());
        let b = four.install(|| sample_trips(&net, &o, 60, 2, 5, &cfg).unwrap());
        assert_eq!(a, b);
    }
}
