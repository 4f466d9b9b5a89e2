//! Multi-task loss (aggregate likelihood, transition NLL, candidate KL) and
//! the training loop alternating candidate refresh with gradient steps.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{AdamConfig, Csr, Graph, Var};
use crate::dataset::{is_train_record, Context, ODRecord};
use crate::error::{Error, Result};
use crate::eval::{route_accuracy, tte_metrics, TteMetrics};
use crate::field::GaussianField;
use crate::model::{HeadVars, Model, Topology};
use crate::roadnet::{EdgeId, RoadNetwork};
use crate::routesearch::{
    enumerate_candidates, route_log_prob, route_mean_time, select_route, shortest_route, Candidate, CandidateSet,
    LengthSlack, Route, SearchParams, TransitionModel,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub m: usize,
    pub delta_lens: LengthSlack,
    pub delta_probs: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seconds.
    pub kl_temperature: f64,
    pub seed: u64,
    pub patience: usize,
    pub train_fraction: f64,
    /// Re-enumerate candidates before every batch instead of once per epoch.
    pub per_batch_refresh: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.1,
            epsilon: 0.2,
            epsilon_decay: 0.9,
            epsilon_floor: 0.01,
            m: 8,
            delta_lens: LengthSlack::ShortestFraction(0.5),
            delta_probs: 1e-4,
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 50,
            batch_size: 64,
            kl_temperature: 30.0,
            seed: 0,
            patience: 10,
            train_fraction: 0.8,
            per_batch_refresh: false,
        }
    }
}

const CONFIG_KEYS: [&str; 18] = [
    "alpha",
    "beta",
    "epsilon",
    "epsilon_decay",
    "epsilon_floor",
    "m",
    "delta_lens",
    "delta_probs",
    "lr",
    "beta1",
    "beta2",
    "epochs",
    "batch_size",
    "kl_temperature",
    "seed",
    "patience",
    "train_fraction",
    "per_batch_refresh",
];

impl TrainingConfig {
    /// Parses `key = value` lines; `#` starts a comment. Keys not given keep
    /// their defaults. Every problem is reported, not just the first.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected key=value, got {line:?}", n + 1));
                continue;
            };
            if let Err(e) = c.set(key.trim(), value.trim()) {
                problems.push(format!("line {}: {e}", n + 1));
            }
        }
        if let Err(Error::Config(msg)) = c.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "epsilon_decay" => self.epsilon_decay = num(key, value)?,
            "epsilon_floor" => self.epsilon_floor = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "delta_lens" => self.delta_lens = value.parse().map_err(|e| format!("delta_lens: {e}"))?,
            "delta_probs" => self.delta_probs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "kl_temperature" => self.kl_temperature = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "per_batch_refresh" => self.per_batch_refresh = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every field, one `key = value` line each, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let v = match key {
                "alpha" => self.alpha.to_string(),
                "beta" => self.beta.to_string(),
                "epsilon" => self.epsilon.to_string(),
                "epsilon_decay" => self.epsilon_decay.to_string(),
                "epsilon_floor" => self.epsilon_floor.to_string(),
                "m" => self.m.to_string(),
                "delta_lens" => self.delta_lens.to_string(),
                "delta_probs" => self.delta_probs.to_string(),
                "lr" => self.lr.to_string(),
                "beta1" => self.beta1.to_string(),
                "beta2" => self.beta2.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "kl_temperature" => self.kl_temperature.to_string(),
                "seed" => self.seed.to_string(),
                "patience" => self.patience.to_string(),
                "train_fraction" => self.train_fraction.to_string(),
                _ => self.per_batch_refresh.to_string(),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.alpha) {
            bad.push(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !unit(self.beta) {
            bad.push(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if self.alpha + self.beta > 1.0 + 1e-12 {
            bad.push(format!("alpha + beta must be <= 1, got {}", self.alpha + self.beta));
        }
        for (name, v) in
            [("epsilon", self.epsilon), ("epsilon_decay", self.epsilon_decay), ("epsilon_floor", self.epsilon_floor)]
        {
            if !unit(v) {
                bad.push(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.m == 0 {
            bad.push("m must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.delta_probs) {
            bad.push(format!("delta_probs must be in [0, 1), got {}", self.delta_probs));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be > 0, got {}", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if !(self.kl_temperature > 0.0) {
            bad.push(format!("kl_temperature must be > 0, got {}", self.kl_temperature));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bad.push(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn search(&self) -> SearchParams {
        SearchParams { delta_lens: self.delta_lens, delta_probs: self.delta_probs, m: self.m }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// Exploration rate used during `epoch` (1-based).
    pub fn epsilon_at(&self, epoch: usize) -> f64 {
        (self.epsilon * self.epsilon_decay.powi(epoch.saturating_sub(1) as i32))
            .max(self.epsilon_floor.min(self.epsilon))
    }
}

fn pair_index(topo: &Topology, network: &RoadNetwork, from: EdgeId, to: EdgeId, at: usize) -> Result<usize> {
    network
        .out_links(from)
        .iter()
        .position(|&j| j == to)
        .map(|p| topo.pair_offsets()[from] + p)
        .ok_or(Error::NotAdjacent { index: at, from, to })
}

/// Sparse maps from model outputs onto a batch of routes: row `b` counts the
/// segments, interior intersections and adjacent pairs of route `b`.
#[derive(Debug, Clone)]
pub struct RouteBatch {
    edges: Rc<Csr>,
    nodes: Rc<Csr>,
    pairs: Rc<Csr>,
}

impl RouteBatch {
    pub fn new(network: &RoadNetwork, topo: &Topology, routes: &[&[EdgeId]]) -> Result<Self> {
        let (mut te, mut tv, mut tp) = (Vec::new(), Vec::new(), Vec::new());
        for (b, edges) in routes.iter().enumerate() {
            for (k, &e) in edges.iter().enumerate() {
                te.push((b, e, 1.0));
                if k + 1 < edges.len() {
                    tv.push((b, network.segment(e).to_node, 1.0));
                    tp.push((b, pair_index(topo, network, e, edges[k + 1], k)?, 1.0));
                }
            }
        }
        let n = routes.len();
        Ok(Self {
            edges: Rc::new(Csr::from_triplets(n, network.num_edges(), &te)),
            nodes: Rc::new(Csr::from_triplets(n, network.num_nodes(), &tv)),
            pairs: Rc::new(Csr::from_triplets(n, topo.num_pairs(), &tp)),
        })
    }
}

/// Per-route Gaussian negative log-likelihood of the observed totals,
/// `(T - Q)^2 / (2 S) + ln(2 pi S) / 2` with `Q` the summed means and `S`
/// the summed variances. Returns a column with one entry per route.
pub fn loss_aggregate(g: &mut Graph, heads: &HeadVars, batch: &RouteBatch, observed: &[f64]) -> Result<Var> {
    let qe = g.sp_matmul(batch.edges.clone(), heads.mu_e)?;
    let qv = g.sp_matmul(batch.nodes.clone(), heads.mu_v)?;
    let q = g.add(qe, qv)?;
    let ve = g.square(heads.sigma_e);
    let vv = g.square(heads.sigma_v);
    let se = g.sp_matmul(batch.edges.clone(), ve)?;
    let sv = g.sp_matmul(batch.nodes.clone(), vv)?;
    let s = g.add(se, sv)?;
    let t = g.constant(crate::autodiff::Matrix::from_shape_fn((observed.len(), 1), |(i, _)| observed[i]));
    let r = g.sub(t, q)?;
    let r2 = g.square(r);
    let two_s = g.scale(s, 2.0);
    let fit = g.div(r2, two_s)?;
    let tau_s = g.scale(s, std::f64::consts::TAU);
    let log_s = g.log(tau_s);
    let norm = g.scale(log_s, 0.5);
    g.add(fit, norm)
}

/// Negative route log-probability under the transition log-probabilities
/// `log_probs` (flat pair order), one entry per route.
pub fn loss_transition(g: &mut Graph, log_probs: Var, batch: &RouteBatch) -> Result<Var> {
    let lp = g.sp_matmul(batch.pairs.clone(), log_probs)?;
    Ok(g.scale(lp, -1.0))
}

/// Candidate sets of a batch laid out for [`loss_kl`].
#[derive(Debug, Clone)]
pub struct CandidateBatch {
    /// `K x pairs`: pair counts of each candidate.
    pairs: Rc<Csr>,
    /// Candidate offsets per record, `B + 1` entries.
    offsets: Rc<[usize]>,
    /// `B x K` group membership.
    group: Rc<Csr>,
}

impl CandidateBatch {
    pub fn new(network: &RoadNetwork, topo: &Topology, sets: &[&[Candidate]]) -> Result<Self> {
        let mut offsets = vec![0];
        let mut trip = Vec::new();
        let mut group = Vec::new();
        let mut k = 0;
        for (b, set) in sets.iter().enumerate() {
            for c in set.iter() {
                let edges = c.route.edges();
                for (i, w) in edges.windows(2).enumerate() {
                    trip.push((k, pair_index(topo, network, w[0], w[1], i + 1)?, 1.0));
                }
                group.push((b, k, 1.0));
                k += 1;
            }
            offsets.push(k);
        }
        Ok(Self {
            pairs: Rc::new(Csr::from_triplets(k, topo.num_pairs(), &trip)),
            offsets: offsets.into(),
            group: Rc::new(Csr::from_triplets(sets.len(), k, &group)),
        })
    }
}

/// Log of the target distribution over candidates: a softmax of the
/// negative absolute error between each candidate's mean time and `observed`.
pub fn kl_target(candidate_means: &[f64], observed: f64, temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = candidate_means.iter().map(|m| -(observed - m).abs() / temperature).collect();
    let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.into_iter().map(|x| x - lse).collect()
}

/// `KL(P || Q)` per record, where `P` is the softmax of the candidates'
/// route log-probabilities and `log_q` holds the constant target
/// log-probabilities in candidate order.
pub fn loss_kl(g: &mut Graph, log_probs: Var, cands: &CandidateBatch, log_q: &[f64]) -> Result<Var> {
    let route_lp = g.sp_matmul(cands.pairs.clone(), log_probs)?;
    let log_p = g.group_log_softmax(route_lp, cands.offsets.clone())?;
    let p = g.exp(log_p);
    let q = g.constant(crate::autodiff::Matrix::from_shape_fn((log_q.len(), 1), |(i, _)| log_q[i]));
    let diff = g.sub(log_p, q)?;
    let terms = g.mul(p, diff)?;
    g.sp_matmul(cands.group.clone(), terms)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_agg: f64,
    pub loss_tp: f64,
    pub loss_kl: f64,
    pub val: TteMetrics,
    pub route_acc_on_val: Option<f64>,
    pub epsilon: f64,
}

pub const LOG_HEADER: &str =
    "epoch,loss_total,loss_agg,loss_tp,loss_kl,val_rmse,val_mae,val_mape,route_acc_on_val,epsilon";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.epoch,
            self.loss_total,
            self.loss_agg,
            self.loss_tp,
            self.loss_kl,
            self.val.rmse,
            self.val.mae,
            self.val.mape,
            self.route_acc_on_val.map_or(String::new(), |a| format!("{a:.6}")),
            self.epsilon
        )
    }
}

/// Recovered route and predicted time of one OD pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub route: Route,
    pub log_prob: f64,
    pub predicted_t: f64,
    /// `(is_edge, id, mean seconds)` in travel order.
    pub breakdown: Vec<(bool, usize, f64)>,
    /// True when pruning left no candidate and the shortest route was used.
    pub fallback: bool,
}

/// Candidate set, falling back to the shortest route when the thresholds
/// remove every route.
pub fn candidates_or_shortest(
    network: &RoadNetwork,
    a: &TransitionModel,
    origin: EdgeId,
    dest: EdgeId,
    search: &SearchParams,
) -> Result<(CandidateSet, bool)> {
    let set = enumerate_candidates(network, a, origin, dest, search)?;
    if !set.is_empty() {
        return Ok((set, false));
    }
    let route = shortest_route(network, origin, dest)?;
    let log_prob = route_log_prob(route.edges(), a, network)?;
    Ok((CandidateSet { origin, dest, candidates: vec![Candidate { route, log_prob }] }, true))
}

/// Most probable candidate route with its mean time under `field`.
pub fn infer_with(
    network: &RoadNetwork,
    field: &GaussianField,
    a: &TransitionModel,
    origin: EdgeId,
    dest: EdgeId,
    search: &SearchParams,
) -> Result<Inference> {
    let (set, fallback) = candidates_or_shortest(network, a, origin, dest, search)?;
    let best = set.candidates.into_iter().next().unwrap();
    let edges = best.route.edges();
    let mut breakdown = Vec::with_capacity(2 * edges.len());
    for (k, &e) in edges.iter().enumerate() {
        breakdown.push((true, e, field.mu_e[e]));
        if k + 1 < edges.len() {
            let v = network.segment(e).to_node;
            breakdown.push((false, v, field.mu_v[v]));
        }
    }
    let predicted_t = route_mean_time(&best.route, field, network);
    Ok(Inference { route: best.route, log_prob: best.log_prob, predicted_t, breakdown, fallback })
}

/// Prediction for one OD pair with a trained model.
pub fn infer(
    network: &RoadNetwork,
    model: &Model,
    topo: &Topology,
    od: &ODRecord,
    search: &SearchParams,
) -> Result<Inference> {
    let (field, a) = model.forward(network, topo, od.slot, od.context())?;
    infer_with(network, &field, &a, od.origin_edge, od.dest_edge, search)
}

type Key = (usize, Context);

/// Fields for every distinct `(slot, context)` of `records` and the shared
/// transition model.
pub struct Snapshot {
    pub fields: BTreeMap<Key, GaussianField>,
    pub transition: TransitionModel,
}

impl Snapshot {
    pub fn of_model(model: &Model, network: &RoadNetwork, topo: &Topology, records: &[&ODRecord]) -> Result<Self> {
        let keys: Vec<Key> = records
            .iter()
            .map(|r| (r.slot, r.context()))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let (fields, transition) = model.snapshot(network, topo, &keys)?;
        Ok(Self { fields: keys.into_iter().zip(fields).collect(), transition })
    }

    pub fn field(&self, r: &ODRecord) -> &GaussianField {
        &self.fields[&(r.slot, r.context())]
    }
}

/// Predictions for a set of records. Runs in parallel; output order follows
/// `records`.
pub fn infer_all(
    network: &RoadNetwork,
    snapshot: &Snapshot,
    records: &[&ODRecord],
    search: &SearchParams,
) -> Result<Vec<Inference>> {
    records
        .par_iter()
        .map(|r| infer_with(network, snapshot.field(r), &snapshot.transition, r.origin_edge, r.dest_edge, search))
        .collect()
}

/// Travel-time metrics and (with ground truth) mean route accuracy.
pub fn score(
    network: &RoadNetwork,
    records: &[&ODRecord],
    inferred: &[Inference],
    truths: Option<&HashMap<usize, Vec<EdgeId>>>,
) -> Result<(TteMetrics, Option<f64>)> {
    let pred: Vec<f64> = inferred.iter().map(|i| i.predicted_t).collect();
    let truth: Vec<f64> = records.iter().map(|r| r.observed_t).collect();
    let metrics = tte_metrics(&pred, &truth)?;
    let acc = truths.map(|gt| {
        let accs: Vec<f64> = records
            .iter()
            .zip(inferred)
            .filter_map(|(r, inf)| gt.get(&r.record_index).map(|t| route_accuracy(network, t, inf.route.edges())))
            .collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    });
    Ok((metrics, acc))
}

/// Fraction of records with a known true route whose route is in the
/// candidate set under `a`. `None` when no record has a known route.
pub fn candidate_coverage(
    network: &RoadNetwork,
    a: &TransitionModel,
    records: &[&ODRecord],
    truths: &HashMap<usize, Vec<EdgeId>>,
    search: &SearchParams,
) -> Result<Option<f64>> {
    let hits: Vec<bool> = records
        .par_iter()
        .filter_map(|r| truths.get(&r.record_index).map(|t| (r, t)))
        .map(|(r, t)| match enumerate_candidates(network, a, r.origin_edge, r.dest_edge, search) {
            Ok(set) => Ok(set.contains(t)),
            Err(Error::Unreachable { .. }) => Ok(false),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok((!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64))
}

/// Result of [`train`]: the parameters with the best validation MAPE, the
/// final parameters, and the per-epoch log.
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub last_epoch: usize,
    /// Validation metrics of the starting parameters.
    pub baseline: TteMetrics,
    pub log: Vec<EpochLog>,
}

fn record_rng(seed: u64, epoch: usize, record_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(record_index as u64);
    rng
}

struct BatchLosses {
    total: f64,
    agg: f64,
    tp: f64,
    kl: f64,
}

fn train_batch(
    model: &mut Model,
    network: &RoadNetwork,
    topo: &Topology,
    config: &TrainingConfig,
    batch: &[(&ODRecord, &CandidateSet, usize)],
) -> Result<BatchLosses> {
    let mut g = Graph::new();
    let enc = model.encode(&mut g, topo)?;
    let log_probs = model.transition(&mut g, topo, enc)?;
    let n = batch.len() as f64;

    let mut groups: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (i, (r, _, _)) in batch.iter().enumerate() {
        groups.entry((r.slot, r.context())).or_default().push(i);
    }
    let mut agg_parts = Vec::new();
    let mut log_q = vec![Vec::new(); batch.len()];
    for (&(slot, ctx), members) in &groups {
        let heads = model.heads(&mut g, topo, enc, slot, ctx)?;
        let field = heads.to_field(&g);
        let routes: Vec<&[EdgeId]> = members.iter().map(|&i| batch[i].1.candidates[batch[i].2].route.edges()).collect();
        let observed: Vec<f64> = members.iter().map(|&i| batch[i].0.observed_t).collect();
        let rb = RouteBatch::new(network, topo, &routes)?;
        let per = loss_aggregate(&mut g, &heads, &rb, &observed)?;
        agg_parts.push(g.sum(per));
        for &i in members {
            let (r, set, _) = batch[i];
            let means: Vec<f64> = set.candidates.iter().map(|c| route_mean_time(&c.route, &field, network)).collect();
            log_q[i] = kl_target(&means, r.observed_t, config.kl_temperature);
        }
    }
    let mut agg = agg_parts[0];
    for &p in &agg_parts[1..] {
        agg = g.add(agg, p)?;
    }
    let agg = g.scale(agg, 1.0 / n);

    let routes: Vec<&[EdgeId]> = batch.iter().map(|(_, set, k)| set.candidates[*k].route.edges()).collect();
    let rb = RouteBatch::new(network, topo, &routes)?;
    let tp_per = loss_transition(&mut g, log_probs, &rb)?;
    let tp_sum = g.sum(tp_per);
    let tp = g.scale(tp_sum, 1.0 / n);

    let sets: Vec<&[Candidate]> = batch.iter().map(|(_, set, _)| set.candidates.as_slice()).collect();
    let cb = CandidateBatch::new(network, topo, &sets)?;
    let flat_q: Vec<f64> = log_q.into_iter().flatten().collect();
    let kl_per = loss_kl(&mut g, log_probs, &cb, &flat_q)?;
    let kl_sum = g.sum(kl_per);
    let kl = g.scale(kl_sum, 1.0 / n);

    let wa = g.scale(agg, config.alpha);
    let wt = g.scale(tp, config.beta);
    let wk = g.scale(kl, 1.0 - config.alpha - config.beta);
    let s = g.add(wa, wt)?;
    let total = g.add(s, wk)?;

    let losses = BatchLosses { total: g.scalar(total), agg: g.scalar(agg), tp: g.scalar(tp), kl: g.scalar(kl) };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} (agg {}, tp {}, kl {})",
            losses.total, losses.agg, losses.tp, losses.kl
        )));
    }
    model.params.zero_grads();
    g.backward(total, &mut model.params)?;
    model.params.adam_step(&config.adam())?;
    Ok(losses)
}

fn refresh(
    network: &RoadNetwork,
    snapshot: &Snapshot,
    records: &[&ODRecord],
    search: &SearchParams,
    epsilon: f64,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(CandidateSet, usize)>> {
    records
        .par_iter()
        .map(|r| {
            let (set, _) = candidates_or_shortest(network, &snapshot.transition, r.origin_edge, r.dest_edge, search)?;
            let mut rng = record_rng(seed, epoch, r.record_index);
            let k = select_route(&set, r.observed_t, snapshot.field(r), network, epsilon, &mut rng);
            Ok((set, k))
        })
        .collect()
}

/// Trains `model` on the training split of `records`, validating on the
/// rest after every epoch. Ground-truth routes, when given, are used only
/// for the `route_acc_on_val` log column. Training resumes after
/// `start_epoch` (0 for a fresh model). `on_epoch` sees every log row as it
/// is produced.
pub fn train(
    network: &RoadNetwork,
    records: &[ODRecord],
    truths: Option<&HashMap<usize, Vec<EdgeId>>>,
    config: &TrainingConfig,
    mut model: Model,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::validation("no training records"));
    }
    model.check_network(network)?;
    for r in records {
        r.validate(network.num_edges(), model.config.slots)?;
    }
    let topo = Topology::new(network)?;
    let search = config.search();
    let (train_set, mut val_set): (Vec<&ODRecord>, Vec<&ODRecord>) =
        records.iter().partition(|r| is_train_record(r.record_index, config.train_fraction));
    if val_set.is_empty() {
        val_set = train_set.clone();
    }
    if train_set.is_empty() {
        return Err(Error::validation("training split is empty"));
    }

    let validate = |model: &Model| -> Result<(TteMetrics, Option<f64>)> {
        let snap = Snapshot::of_model(model, network, &topo, &val_set)?;
        let inferred = infer_all(network, &snap, &val_set, &search)?;
        score(network, &val_set, &inferred, truths)
    };

    let (baseline, _) = validate(&model)?;
    let mut best = (model.clone(), start_epoch, baseline.mape);
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut epoch = start_epoch;
    while epoch < config.epochs {
        epoch += 1;
        let epsilon = config.epsilon_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));

        let mut selections = if config.per_batch_refresh {
            Vec::new()
        } else {
            let snap = Snapshot::of_model(&model, network, &topo, &train_set)?;
            refresh(network, &snap, &train_set, &search, epsilon, config.seed, epoch)?
        };
        let (mut tot, mut agg, mut tp, mut kl) = (0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch_records: Vec<&ODRecord> = chunk.iter().map(|&i| train_set[i]).collect();
            let fresh;
            let picks: Vec<(&CandidateSet, usize)> = if config.per_batch_refresh {
                let snap = Snapshot::of_model(&model, network, &topo, &batch_records)?;
                fresh = refresh(network, &snap, &batch_records, &search, epsilon, config.seed, epoch)?;
                fresh.iter().map(|(s, k)| (s, *k)).collect()
            } else {
                chunk.iter().map(|&i| (&selections[i].0, selections[i].1)).collect()
            };
            let batch: Vec<_> = batch_records.iter().zip(picks).map(|(r, (s, k))| (*r, s, k)).collect();
            let losses = train_batch(&mut model, network, &topo, config, &batch).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} batch {b}: {msg}")),
                other => other,
            })?;
            let w = chunk.len() as f64;
            tot += losses.total * w;
            agg += losses.agg * w;
            tp += losses.tp * w;
            kl += losses.kl * w;
        }
        selections.clear();
        let n = train_set.len() as f64;
        let (val, route_acc) = validate(&model)?;
        let row = EpochLog {
            epoch,
            loss_total: tot / n,
            loss_agg: agg / n,
            loss_tp: tp / n,
            loss_kl: kl / n,
            val,
            route_acc_on_val: route_acc,
            epsilon,
        };
        log::info!("{}", row.csv_row());
        on_epoch(&row);
        log.push(row);
        if val.mape < best.2 {
            best = (model.clone(), epoch, val.mape);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome { best: best.0, best_epoch: best.1, last: model, last_epoch: epoch, baseline, log })
}
