//! Built-in self-check suites: gradient checks, exhaustive route
//! enumeration, stochastic transition rows and KL nonnegativity.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckOptions, Graph};
use crate::dataset::Context;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Topology};
use crate::roadnet::fixtures::{node, ring4, seg};
use crate::roadnet::{RoadNetwork, RoadType};
use crate::routesearch::{
    enumerate_candidates, oracle, route_mean_time, route_variance, Candidate, Route, SearchParams, TransitionModel,
};
use crate::simulator::{assign_oracle, draw_route_time, generate_city, k_fastest_routes, peak_slots};
use crate::training::{kl_target, loss_aggregate, loss_kl, loss_transition, CandidateBatch, RouteBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quick" => Ok(Level::Quick),
            "full" => Ok(Level::Full),
            _ => Err(format!("unknown level {s:?} (expected quick or full)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} {:>8.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Runs every suite of the given level on the calling thread.
pub fn run(level: Level) -> Vec<CheckResult> {
    let suites: [(&'static str, fn(Level) -> Result<(bool, String)>); 5] = [
        ("gradient", gradient_suite),
        ("route-enumeration", enumeration_suite),
        ("stochastic-rows", stochastic_suite),
        ("kl-nonnegative", kl_suite),
        ("aggregation-law", aggregation_suite),
    ];
    suites
        .into_iter()
        .map(|(name, suite)| {
            let start = Instant::now();
            let (passed, detail) = suite(level).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult { name, passed, detail, elapsed: start.elapsed() }
        })
        .collect()
}

/// Narrow model used by the suites so they stay fast.
pub fn small_model(network: &RoadNetwork, slots: usize, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        edge_id_dim: 4,
        road_type_dim: 2,
        lanes_dim: 2,
        one_way_dim: 2,
        node_id_dim: 3,
        tag_dim: 2,
        street_count_dim: 2,
        weather_dim: 2,
        holiday_dim: 2,
        hidden: 4,
        d_out: 3,
        mlp_hidden: 3,
        ..ModelConfig::for_network(network, slots)
    };
    Model::new(cfg, seed)
}

/// Worst relative error of the full forward pass plus all three losses on
/// the 8-segment ring, over `samples` parameter entries.
pub fn full_gradient_error(seed: u64, samples: usize) -> Result<f64> {
    let net = ring4();
    let topo = Topology::new(&net)?;
    let model = small_model(&net, 2, seed)?;
    let route = [0usize, 2, 4];
    let cands = vec![
        Candidate { route: Route::new(&net, vec![0, 2, 4])?, log_prob: 0.0 },
        Candidate { route: Route::new(&net, vec![0, 2])?, log_prob: 0.0 },
    ];
    let cb = CandidateBatch::new(&net, &topo, &[&cands])?;
    let rb = RouteBatch::new(&net, &topo, &[&route])?;
    let log_q = kl_target(&[90.0, 60.0], 80.0, 30.0);
    let ctx = Context { weather: 1, holiday: 1 };
    let report = grad_check(
        &mut model.params.clone(),
        |g, store| {
            let m = model.with_params(store.clone());
            let enc = m.encode(g, &topo)?;
            let lp = m.transition(g, &topo, enc)?;
            let h = m.heads(g, &topo, enc, 1, ctx)?;
            let a = loss_aggregate(g, &h, &rb, &[80.0])?;
            let t = loss_transition(g, lp, &rb)?;
            let k = loss_kl(g, lp, &cb, &log_q)?;
            let a = g.scale(a, 0.8);
            let t = g.scale(t, 0.1);
            let k = g.scale(k, 0.1);
            let s = g.add(a, t)?;
            let s = g.add(s, k)?;
            Ok(g.sum(s))
        },
        GradCheckOptions { samples, seed, ..Default::default() },
    )?;
    Ok(report.max_relative_error)
}

fn gradient_suite(level: Level) -> Result<(bool, String)> {
    let seeds = if level == Level::Quick { 1 } else { 3 };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        worst = worst.max(full_gradient_error(seed, 250)?);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over {seeds}x250 entries")))
}

/// Random strongly connected network with at most `max_edges` directed
/// segments: a directed ring plus random extra links, some two-way.
pub fn random_network(seed: u64, max_edges: usize) -> Result<RoadNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodes = rng.random_range(3..=(max_edges / 2).clamp(3, 5));
    let mut pairs: Vec<(usize, usize)> = (0..n_nodes).map(|i| (i, (i + 1) % n_nodes)).collect();
    let mut all: Vec<(usize, usize)> =
        (0..n_nodes).flat_map(|u| (0..n_nodes).map(move |v| (u, v))).filter(|(u, v)| u != v).collect();
    all.shuffle(&mut rng);
    for p in all {
        if pairs.len() >= max_edges {
            break;
        }
        if !pairs.contains(&p) && rng.random::<f64>() < 0.6 {
            pairs.push(p);
        }
    }
    let types = [RoadType::Primary, RoadType::Secondary, RoadType::Tertiary, RoadType::Trunk];
    let mut counts = vec![0; n_nodes];
    for &(u, v) in &pairs {
        if u < v || !pairs.contains(&(v, u)) {
            counts[u] += 1;
            counts[v] += 1;
        }
    }
    let segments = pairs
        .iter()
        .enumerate()
        .map(|(id, &(u, v))| {
            let key = (u.min(v), u.max(v));
            let length = 50.0 + (key.0 * 7 + key.1 * 13 + seed as usize) as f64 % 350.0;
            let mut s = seg(id, u, v, types[rng.random_range(0..types.len())], length);
            s.one_way = !pairs.contains(&(v, u));
            s
        })
        .collect();
    let nodes = (0..n_nodes).map(|i| node(i, counts[i])).collect();
    RoadNetwork::new(nodes, segments)
}

fn enumeration_suite(level: Level) -> Result<(bool, String)> {
    let graphs = if level == Level::Quick { 20 } else { 100 };
    let mut pairs = 0;
    for seed in 0..graphs {
        let net = random_network(seed, 12)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let logits: Vec<f64> =
            (0..TransitionModel::pair_offsets(&net)[net.num_edges()]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = TransitionModel::from_logits(&net, &logits)?;
        for o in 0..net.num_edges() {
            for d in 0..net.num_edges() {
                if o == d {
                    continue;
                }
                let all = oracle::all_simple_routes(&net, &a, o, d);
                let same = match enumerate_candidates(&net, &a, o, d, &SearchParams::unpruned(usize::MAX)) {
                    Ok(got) => {
                        got.candidates.len() == all.len()
                            && got.candidates.iter().zip(&all).all(|(g, w)| g.route.edges() == w.route.edges())
                    }
                    Err(Error::Unreachable { .. }) => all.is_empty(),
                    Err(e) => return Err(e),
                };
                if !same {
                    return Ok((false, format!("graph {seed}: mismatch for {o} -> {d}")));
                }
                pairs += 1;
            }
        }
    }
    Ok((true, format!("{graphs} graphs, {pairs} OD pairs identical")))
}

fn stochastic_suite(level: Level) -> Result<(bool, String)> {
    let net = generate_city(3, 3, 5)?;
    let topo = Topology::new(&net)?;
    let seeds = if level == Level::Quick { 100 } else { 300 };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = small_model(&net, 2, seed)?;
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &topo)?;
        let lp = model.transition(&mut g, &topo, enc)?;
        let a = TransitionModel::from_log_probs(&net, g.value(lp).iter().copied().collect())?;
        for e in 0..net.num_edges() {
            let row = a.row(e);
            if !row.is_empty() {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok((worst <= 1e-9, format!("{seeds} seeds, worst |row sum - 1| = {worst:.1e}")))
}

fn kl_suite(level: Level) -> Result<(bool, String)> {
    let net = generate_city(3, 3, 6)?;
    let topo = Topology::new(&net)?;
    let sets = if level == Level::Quick { 1000 } else { 5000 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut min_kl = f64::INFINITY;
    let mut max_self = 0.0f64;
    let mut done = 0;
    let mut model_seed = 0;
    while done < sets {
        let model = small_model(&net, 2, model_seed)?;
        model_seed += 1;
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &topo)?;
        let lp_var = model.transition(&mut g, &topo, enc)?;
        let lp = g.constant(g.value(lp_var).clone());
        let a = TransitionModel::from_log_probs(&net, g.value(lp).iter().copied().collect())?;
        for _ in 0..50 {
            let o = rng.random_range(0..net.num_edges());
            let d = rng.random_range(0..net.num_edges());
            if o == d {
                continue;
            }
            let m = rng.random_range(1..=8);
            let set = enumerate_candidates(&net, &a, o, d, &SearchParams::unpruned(m))?;
            if set.candidates.is_empty() {
                continue;
            }
            let cb = CandidateBatch::new(&net, &topo, &[&set.candidates])?;
            let means: Vec<f64> = set.candidates.iter().map(|_| rng.random_range(60.0..900.0)).collect();
            let log_q = kl_target(&means, rng.random_range(60.0..900.0), 30.0);
            let kl = loss_kl(&mut g, lp, &cb, &log_q)?;
            min_kl = min_kl.min(g.scalar(kl));
            // Target equal to the model's own candidate distribution.
            let lps: Vec<f64> = set.candidates.iter().map(|c| c.log_prob).collect();
            let max = lps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + lps.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let own: Vec<f64> = lps.iter().map(|x| x - lse).collect();
            let kl = loss_kl(&mut g, lp, &cb, &own)?;
            max_self = max_self.max(g.scalar(kl).abs());
            done += 1;
        }
    }
    let passed = min_kl >= -1e-12 && max_self <= 1e-12;
    Ok((passed, format!("{done} sets, min KL {min_kl:.2e}, max |KL(P,P)| {max_self:.1e}")))
}

/// Sample mean and variance of `draws` total times on one fixed route of
/// the 10x10 city at a peak slot, next to the summed component means and
/// variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationCheck {
    pub draws: usize,
    pub route_edges: usize,
    pub sample_mean: f64,
    pub sample_var: f64,
    pub sum_mu: f64,
    pub sum_var: f64,
}

impl AggregationCheck {
    /// Mean within three standard errors and variance within 10%.
    pub fn passed(&self) -> bool {
        let se = (self.sum_var / self.draws as f64).sqrt();
        (self.sample_mean - self.sum_mu).abs() <= 3.0 * se && (self.sample_var / self.sum_var - 1.0).abs() < 0.1
    }
}

pub fn aggregation_law(draws: usize, seed: u64) -> Result<AggregationCheck> {
    let net = generate_city(10, 10, seed)?;
    let oracle = assign_oracle(&net, 24, seed)?;
    let field = oracle.field(&net, peak_slots(24)[0], Context { weather: 0, holiday: 0 });
    let (origin, dest) = (0, net.num_edges() - 1);
    let routes = k_fastest_routes(&net, &field, origin, dest, 1);
    let route = &routes.first().ok_or(Error::Unreachable { origin, dest })?.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let totals: Vec<f64> = (0..draws).map(|_| draw_route_time(route, &field, &net, &mut rng)).collect();
    let n = draws as f64;
    let sample_mean = totals.iter().sum::<f64>() / n;
    let sample_var = totals.iter().map(|t| (t - sample_mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(AggregationCheck {
        draws,
        route_edges: route.edges().len(),
        sample_mean,
        sample_var,
        sum_mu: route_mean_time(route, &field, &net),
        sum_var: route_variance(route, &field, &net),
    })
}

fn aggregation_suite(level: Level) -> Result<(bool, String)> {
    let draws = if level == Level::Quick { 100_000 } else { 1_000_000 };
    let c = aggregation_law(draws, 3)?;
    Ok((
        c.passed(),
        format!(
            "{} draws on {} edges: mean {:.2} vs {:.2}, variance {:.1} vs {:.1}",
            c.draws, c.route_edges, c.sample_mean, c.sum_mu, c.sample_var, c.sum_var
        ),
    ))
}
