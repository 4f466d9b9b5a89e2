//! The estimation network: attribute embeddings, stacked relational graph
//! convolutions with recurrent gating on the link-wise and node-wise
//! graphs, Gaussian heads modulated by a per-slot time embedding, and an
//! MLP transition head over adjacent segment pairs.

use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Csr, Graph, Matrix, ParamId, ParamStore, Var};
use crate::dataset::{Context, NUM_HOLIDAY, NUM_WEATHER};
use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::roadnet::{RoadNetwork, RoadType, NUM_RELATIONS};
use crate::routesearch::TransitionModel;

/// Lane counts `1..=MAX_LANES` have embeddings.
pub const MAX_LANES: usize = 8;
/// Street counts `0..MAX_STREET_COUNT` have embeddings.
pub const MAX_STREET_COUNT: usize = 8;
/// Seconds per unit of the node mean/deviation heads.
pub const NODE_SCALE: f64 = 10.0;
pub const SIGMA_FLOOR: f64 = 1e-3;

const CLASS_NAMES: [&str; 4] = ["major", "major_link", "minor", "minor_link"];

/// Names of the relation vocabulary, indexed by relation id.
pub fn relation_names() -> Vec<String> {
    CLASS_NAMES.iter().flat_map(|a| CLASS_NAMES.iter().map(move |b| format!("{a}->{b}"))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_edges: usize,
    pub num_nodes: usize,
    pub slots: usize,
    pub edge_id_dim: usize,
    pub road_type_dim: usize,
    pub lanes_dim: usize,
    pub one_way_dim: usize,
    pub node_id_dim: usize,
    pub tag_dim: usize,
    pub street_count_dim: usize,
    pub weather_dim: usize,
    pub holiday_dim: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    pub fn for_network(network: &RoadNetwork, slots: usize) -> Self {
        Self {
            num_edges: network.num_edges(),
            num_nodes: network.num_nodes(),
            slots,
            edge_id_dim: 32,
            road_type_dim: 8,
            lanes_dim: 4,
            one_way_dim: 2,
            node_id_dim: 24,
            tag_dim: 2,
            street_count_dim: 2,
            weather_dim: 8,
            holiday_dim: 4,
            hidden: 32,
            d_out: 16,
            layers: 3,
            mlp_hidden: 32,
        }
    }

    /// Width of a segment feature row: embeddings plus scaled length.
    pub fn edge_feature_dim(&self) -> usize {
        self.edge_id_dim + self.road_type_dim + self.lanes_dim + self.one_way_dim + 1
    }

    /// Width of an intersection feature row: embeddings plus lat/lon.
    pub fn node_feature_dim(&self) -> usize {
        self.node_id_dim + self.tag_dim + self.street_count_dim + 2
    }

    fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.slots < 1 || self.hidden < 1 || self.d_out < 1 || self.mlp_hidden < 1 {
            return Err(Error::Config(format!("degenerate model widths: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct GraphParams {
    /// Projection after each concatenated layer input (layers >= 1).
    proj: Vec<Option<ParamId>>,
    w_rel: Vec<Vec<ParamId>>,
    w_self: Vec<ParamId>,
    /// Gate input weights per recurrent step, `[o, q, h]`.
    gru_w: Vec<[ParamId; 3]>,
    gru_o: [ParamId; 3],
    gru_b: [ParamId; 3],
}

#[derive(Debug, Clone)]
struct Head {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    edge_id: ParamId,
    road_type: ParamId,
    lanes: ParamId,
    one_way: ParamId,
    node_id: ParamId,
    tag: ParamId,
    street_count: ParamId,
    weather: ParamId,
    holiday: ParamId,
    ctx_proj: ParamId,
    time: ParamId,
    edge_graph: GraphParams,
    node_graph: GraphParams,
    mu_e: Head,
    sigma_e: Head,
    mu_v: Head,
    sigma_v: Head,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
}

/// Parameters plus the layout needed to run them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    idx: ParamIndex,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

fn embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-0.5..0.5))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let mut emb = |store: &mut ParamStore, name: &str, rows, cols| store.add(name, embedding(rng, rows, cols));
        let edge_id = emb(&mut store, "edge.id_emb", c.num_edges, c.edge_id_dim);
        let road_type = emb(&mut store, "edge.type_emb", RoadType::ALL.len(), c.road_type_dim);
        let lanes = emb(&mut store, "edge.lanes_emb", MAX_LANES, c.lanes_dim);
        let one_way = emb(&mut store, "edge.oneway_emb", 2, c.one_way_dim);
        let node_id = emb(&mut store, "node.id_emb", c.num_nodes, c.node_id_dim);
        let tag = emb(&mut store, "node.tag_emb", crate::roadnet::NodeTag::ALL.len(), c.tag_dim);
        let street_count = emb(&mut store, "node.street_emb", MAX_STREET_COUNT, c.street_count_dim);
        let weather = emb(&mut store, "ctx.weather_emb", NUM_WEATHER, c.weather_dim);
        let holiday = emb(&mut store, "ctx.holiday_emb", NUM_HOLIDAY, c.holiday_dim);
        let ctx_proj = store.add("ctx.proj", glorot(rng, c.weather_dim + c.holiday_dim, c.d_out));
        let time = store.add("time_emb", embedding(rng, c.d_out, c.slots));
        let edge_graph = Self::graph_params(&mut store, rng, c, "edge", c.edge_feature_dim());
        let node_graph = Self::graph_params(&mut store, rng, c, "node", c.node_feature_dim());
        let mut head = |store: &mut ParamStore, name: &str| Head {
            w: store.add(format!("head.{name}.w"), glorot(rng, c.hidden, c.d_out)),
            b: store.add(format!("head.{name}.b"), Matrix::zeros((1, c.d_out))),
        };
        let mu_e = head(&mut store, "mu_e");
        let sigma_e = head(&mut store, "sigma_e");
        let mu_v = head(&mut store, "mu_v");
        let sigma_v = head(&mut store, "sigma_v");
        let mlp_w1 = store.add("trans.w1", glorot(rng, 2 * c.hidden, c.mlp_hidden));
        let mlp_b1 = store.add("trans.b1", Matrix::zeros((1, c.mlp_hidden)));
        let mlp_w2 = store.add("trans.w2", glorot(rng, c.mlp_hidden, 1));
        let idx = ParamIndex {
            edge_id,
            road_type,
            lanes,
            one_way,
            node_id,
            tag,
            street_count,
            weather,
            holiday,
            ctx_proj,
            time,
            edge_graph,
            node_graph,
            mu_e,
            sigma_e,
            mu_v,
            sigma_v,
            mlp_w1,
            mlp_b1,
            mlp_w2,
        };
        Ok(Self { config, params: store, idx })
    }

    fn graph_params(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        c: &ModelConfig,
        prefix: &str,
        d0: usize,
    ) -> GraphParams {
        let h = c.hidden;
        let mut gp = GraphParams {
            proj: Vec::new(),
            w_rel: Vec::new(),
            w_self: Vec::new(),
            gru_w: Vec::new(),
            gru_o: [0, 1, 2]
                .map(|k| store.add(format!("{prefix}.gru.o_{}", "oqh".as_bytes()[k] as char), glorot(rng, h, h))),
            gru_b: [0, 1, 2]
                .map(|k| store.add(format!("{prefix}.gru.b_{}", "oqh".as_bytes()[k] as char), Matrix::zeros((1, h)))),
        };
        for l in 0..c.layers {
            let d_in = match l {
                0 => d0,
                _ => h,
            };
            let concat_width = match l {
                0 => None,
                1 => Some(d0 + h),
                _ => Some(2 * h),
            };
            gp.proj.push(concat_width.map(|w| store.add(format!("{prefix}.layer{l}.proj"), glorot(rng, w, h))));
            gp.w_rel.push(
                (0..NUM_RELATIONS)
                    .map(|r| store.add(format!("{prefix}.layer{l}.w_rel{r}"), glorot(rng, d_in, h)))
                    .collect(),
            );
            gp.w_self.push(store.add(format!("{prefix}.layer{l}.w_self"), glorot(rng, d_in, h)));
        }
        for t in 0..=c.layers {
            let d_in = if t == 0 { d0 } else { h };
            gp.gru_w.push([0, 1, 2].map(|k| {
                store.add(format!("{prefix}.gru{t}.w_{}", "oqh".as_bytes()[k] as char), glorot(rng, d_in, h))
            }));
        }
        gp
    }

    /// Same layout with different parameter values.
    pub fn with_params(&self, params: ParamStore) -> Self {
        Self { config: self.config.clone(), params, idx: self.idx.clone() }
    }

    /// Id of a named parameter.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// Checks that a network matches the tables this model was built for.
    pub fn check_network(&self, network: &RoadNetwork) -> Result<()> {
        if network.num_edges() != self.config.num_edges || network.num_nodes() != self.config.num_nodes {
            return Err(Error::validation(format!(
                "model built for {} segments / {} intersections, network has {} / {}",
                self.config.num_edges,
                self.config.num_nodes,
                network.num_edges(),
                network.num_nodes()
            )));
        }
        Ok(())
    }
}

/// Per-network constants for the forward pass: categorical indices,
/// numeric features and the per-relation mean aggregators.
#[derive(Debug, Clone)]
pub struct Topology {
    edge_rel: Vec<(usize, Rc<Csr>)>,
    node_rel: Vec<(usize, Rc<Csr>)>,
    edge_ids: Rc<[usize]>,
    road_types: Rc<[usize]>,
    lanes: Rc<[usize]>,
    one_way: Rc<[usize]>,
    lengths: Matrix,
    node_ids: Rc<[usize]>,
    tags: Rc<[usize]>,
    street_counts: Rc<[usize]>,
    coords: Matrix,
    free_flow: Matrix,
    pair_from: Rc<[usize]>,
    pair_to: Rc<[usize]>,
    pair_offsets: Rc<[usize]>,
}

fn relation_aggregators(n: usize, incoming: impl Fn(usize) -> Vec<(usize, usize)>) -> Vec<(usize, Rc<Csr>)> {
    let mut by_rel = vec![vec![Vec::new(); n]; NUM_RELATIONS];
    for i in 0..n {
        for (j, r) in incoming(i) {
            by_rel[r][i].push(j);
        }
    }
    by_rel
        .into_iter()
        .enumerate()
        .filter(|(_, lists)| lists.iter().any(|l| !l.is_empty()))
        .map(|(r, lists)| (r, Rc::new(Csr::mean_aggregator(&lists, n))))
        .collect()
}

impl Topology {
    pub fn new(network: &RoadNetwork) -> Result<Self> {
        let segs = network.segments();
        for s in segs {
            if s.lanes == 0 || s.lanes > MAX_LANES {
                return Err(Error::validation(format!("segment {}: lanes {} outside 1..={MAX_LANES}", s.id, s.lanes)));
            }
        }
        for n in network.intersections() {
            if n.street_count >= MAX_STREET_COUNT {
                return Err(Error::validation(format!(
                    "intersection {}: street_count {} outside 0..{MAX_STREET_COUNT}",
                    n.id, n.street_count
                )));
            }
        }
        let ne = network.num_edges();
        let nv = network.num_nodes();
        let edge_rel = relation_aggregators(ne, |i| network.in_links(i).iter().map(|&(j, r)| (j, r.index())).collect());
        let node_in = network.node_in_neighbors();
        let node_rel =
            relation_aggregators(nv, |v| node_in[v].iter().map(|&u| (u, network.node_relation(u).index())).collect());

        let nodes = network.intersections();
        let span = |f: fn(&crate::roadnet::Intersection) -> f64| {
            let lo = nodes.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = nodes.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi - lo } else { 1.0 })
        };
        let (lat0, lat_span) = span(|n| n.lat);
        let (lon0, lon_span) = span(|n| n.lon);
        let coords = Matrix::from_shape_fn((nv, 2), |(v, k)| match k {
            0 => (nodes[v].lat - lat0) / lat_span,
            _ => (nodes[v].lon - lon0) / lon_span,
        });

        let offsets = TransitionModel::pair_offsets(network);
        let mut pair_from = Vec::with_capacity(*offsets.last().unwrap());
        let mut pair_to = Vec::with_capacity(pair_from.capacity());
        for i in 0..ne {
            for &j in network.out_links(i) {
                pair_from.push(i);
                pair_to.push(j);
            }
        }
        Ok(Self {
            edge_rel,
            node_rel,
            edge_ids: (0..ne).collect(),
            road_types: segs.iter().map(|s| s.road_type.index()).collect(),
            lanes: segs.iter().map(|s| s.lanes - 1).collect(),
            one_way: segs.iter().map(|s| s.one_way as usize).collect(),
            lengths: Matrix::from_shape_fn((ne, 1), |(e, _)| segs[e].length / 1000.0),
            node_ids: (0..nv).collect(),
            tags: nodes.iter().map(|n| n.tag.index()).collect(),
            street_counts: nodes.iter().map(|n| n.street_count).collect(),
            coords,
            free_flow: Matrix::from_shape_fn((ne, 1), |(e, _)| segs[e].free_flow_secs()),
            pair_from: pair_from.into(),
            pair_to: pair_to.into(),
            pair_offsets: offsets.into(),
        })
    }

    /// Relations with at least one edge in the link-wise graph.
    pub fn edge_relations(&self) -> Vec<usize> {
        self.edge_rel.iter().map(|(r, _)| *r).collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.pair_from.len()
    }

    pub fn pair_offsets(&self) -> &[usize] {
        &self.pair_offsets
    }
}

/// Final representations of both graphs.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h_e: Var,
    pub h_v: Var,
}

/// Column vectors of the Gaussian heads for one slot and context.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub mu_e: Var,
    pub sigma_e: Var,
    pub mu_v: Var,
    pub sigma_v: Var,
}

impl HeadVars {
    pub fn to_field(self, g: &Graph) -> GaussianField {
        let col = |v: Var| g.value(v).iter().copied().collect();
        GaussianField {
            mu_e: col(self.mu_e),
            sigma_e: col(self.sigma_e),
            mu_v: col(self.mu_v),
            sigma_v: col(self.sigma_v),
        }
    }
}

impl Model {
    /// Feature rows `(H0_e, H0_v)`.
    pub fn embed_features(&self, g: &mut Graph, topo: &Topology) -> Result<(Var, Var)> {
        let p = &self.idx;
        let lookup = |g: &mut Graph, table: ParamId, rows: &Rc<[usize]>| {
            let t = g.param(&self.params, table);
            g.gather_rows(t, rows.clone())
        };
        let e_parts = [
            lookup(g, p.edge_id, &topo.edge_ids)?,
            lookup(g, p.road_type, &topo.road_types)?,
            lookup(g, p.lanes, &topo.lanes)?,
            lookup(g, p.one_way, &topo.one_way)?,
            g.constant(topo.lengths.clone()),
        ];
        let v_parts = [
            lookup(g, p.node_id, &topo.node_ids)?,
            lookup(g, p.tag, &topo.tags)?,
            lookup(g, p.street_count, &topo.street_counts)?,
            g.constant(topo.coords.clone()),
        ];
        Ok((g.concat_cols(&e_parts)?, g.concat_cols(&v_parts)?))
    }

    fn gru(&self, g: &mut Graph, gp: &GraphParams, step: usize, x: Var, c: Var) -> Result<Var> {
        let ps = &self.params;
        let gate = |g: &mut Graph, k: usize, state: Var| -> Result<Var> {
            let w = g.param(ps, gp.gru_w[step][k]);
            let o = g.param(ps, gp.gru_o[k]);
            let b = g.param(ps, gp.gru_b[k]);
            let xw = g.matmul(x, w)?;
            let so = g.matmul(state, o)?;
            let sum = g.add(xw, so)?;
            g.add(sum, b)
        };
        let o_pre = gate(g, 0, c)?;
        let o = g.sigmoid(o_pre);
        let q_pre = gate(g, 1, c)?;
        let q = g.sigmoid(q_pre);
        let qc = g.mul(q, c)?;
        let cand_pre = gate(g, 2, qc)?;
        let cand = g.tanh(cand_pre);
        let keep = g.mul(o, c)?;
        let neg_o = g.scale(o, -1.0);
        let one_minus_o = g.add_scalar(neg_o, 1.0);
        let fresh = g.mul(one_minus_o, cand)?;
        g.add(keep, fresh)
    }

    fn rgcn_layer(&self, g: &mut Graph, gp: &GraphParams, rels: &[(usize, Rc<Csr>)], l: usize, x: Var) -> Result<Var> {
        let w0 = g.param(&self.params, gp.w_self[l]);
        let mut acc = g.matmul(x, w0)?;
        for (r, agg) in rels {
            let mean = g.sp_matmul(agg.clone(), x)?;
            let w = g.param(&self.params, gp.w_rel[l][*r]);
            let msg = g.matmul(mean, w)?;
            acc = g.add(acc, msg)?;
        }
        Ok(g.tanh(acc))
    }

    /// Stacked relational layers with recurrent gating on one graph.
    /// Returns the final recurrent state.
    fn encode_graph(&self, g: &mut Graph, gp: &GraphParams, rels: &[(usize, Rc<Csr>)], h0: Var) -> Result<Var> {
        let n = g.shape(h0).0;
        let zero = g.constant(Matrix::zeros((n, self.config.hidden)));
        let mut hs = vec![h0];
        let mut cs = vec![self.gru(g, gp, 0, h0, zero)?];
        for l in 0..self.config.layers {
            let input = match l {
                0 => h0,
                1 => g.concat_cols(&[hs[0], hs[1]])?,
                _ => g.concat_cols(&[cs[l - 1], hs[l]])?,
            };
            let x = match gp.proj[l] {
                Some(p) => {
                    let pv = g.param(&self.params, p);
                    g.matmul(input, pv)?
                }
                None => input,
            };
            let h = self.rgcn_layer(g, gp, rels, l, x)?;
            hs.push(h);
            let c = self.gru(g, gp, l + 1, h, cs[l])?;
            cs.push(c);
        }
        Ok(*cs.last().unwrap())
    }

    pub fn encode(&self, g: &mut Graph, topo: &Topology) -> Result<Encoded> {
        let (h0_e, h0_v) = self.embed_features(g, topo)?;
        let h_e = self.encode_graph(g, &self.idx.edge_graph, &topo.edge_rel, h0_e)?;
        let h_v = self.encode_graph(g, &self.idx.node_graph, &topo.node_rel, h0_v)?;
        Ok(Encoded { h_e, h_v })
    }

    /// The slot's time-embedding column modulated by the context, as a
    /// `d_out x 1` column.
    fn time_column(&self, g: &mut Graph, slot: usize, ctx: Context) -> Result<Var> {
        if slot >= self.config.slots {
            return Err(Error::validation(format!("slot {slot} >= {}", self.config.slots)));
        }
        if ctx.weather >= NUM_WEATHER || ctx.holiday >= NUM_HOLIDAY {
            return Err(Error::validation(format!("context {ctx:?} out of range")));
        }
        let p = &self.idx;
        let t = g.param(&self.params, p.time);
        let tt = g.transpose(t);
        let t_row = g.gather_rows(tt, vec![slot])?;
        let w = g.param(&self.params, p.weather);
        let w_row = g.gather_rows(w, vec![ctx.weather])?;
        let hol = g.param(&self.params, p.holiday);
        let h_row = g.gather_rows(hol, vec![ctx.holiday])?;
        let ctx_row = g.concat_cols(&[w_row, h_row])?;
        let proj = g.param(&self.params, p.ctx_proj);
        let m = g.matmul(ctx_row, proj)?;
        let m1 = g.add_scalar(m, 1.0);
        let modulated = g.mul(t_row, m1)?;
        Ok(g.transpose(modulated))
    }

    fn head(&self, g: &mut Graph, h: Var, head: &Head, t: Var) -> Result<Var> {
        let w = g.param(&self.params, head.w);
        let b = g.param(&self.params, head.b);
        let hw = g.matmul(h, w)?;
        let z = g.add(hw, b)?;
        let raw = g.matmul(z, t)?;
        Ok(g.softplus(raw))
    }

    /// Gaussian field for one slot and context. Segment means are
    /// `free_flow * (1 + softplus)`, so never below free-flow time.
    pub fn heads(&self, g: &mut Graph, topo: &Topology, enc: Encoded, slot: usize, ctx: Context) -> Result<HeadVars> {
        let t = self.time_column(g, slot, ctx)?;
        let ff = g.constant(topo.free_flow.clone());
        let sp = self.head(g, enc.h_e, &self.idx.mu_e, t)?;
        let sp = g.add_scalar(sp, 1.0);
        let mu_e = g.mul(ff, sp)?;
        let sp = self.head(g, enc.h_e, &self.idx.sigma_e, t)?;
        let s = g.mul(ff, sp)?;
        let sigma_e = g.add_scalar(s, SIGMA_FLOOR);
        let sp = self.head(g, enc.h_v, &self.idx.mu_v, t)?;
        let mu_v = g.scale(sp, NODE_SCALE);
        let sp = self.head(g, enc.h_v, &self.idx.sigma_v, t)?;
        let s = g.scale(sp, NODE_SCALE);
        let sigma_v = g.add_scalar(s, SIGMA_FLOOR);
        Ok(HeadVars { mu_e, sigma_e, mu_v, sigma_v })
    }

    /// Transition logits of every adjacent pair, in out-link order.
    pub fn transition_logits(&self, g: &mut Graph, topo: &Topology, h_e: Var) -> Result<Var> {
        let p = &self.idx;
        let hi = g.gather_rows(h_e, topo.pair_from.clone())?;
        let hj = g.gather_rows(h_e, topo.pair_to.clone())?;
        let x = g.concat_cols(&[hi, hj])?;
        let w1 = g.param(&self.params, p.mlp_w1);
        let b1 = g.param(&self.params, p.mlp_b1);
        let w2 = g.param(&self.params, p.mlp_w2);
        let xw = g.matmul(x, w1)?;
        let pre = g.add(xw, b1)?;
        let hidden = g.relu(pre);
        g.matmul(hidden, w2)
    }

    /// Log-probabilities of every adjacent pair: per-row log-softmax of the
    /// transition logits.
    pub fn transition(&self, g: &mut Graph, topo: &Topology, enc: Encoded) -> Result<Var> {
        let logits = self.transition_logits(g, topo, enc.h_e)?;
        g.group_log_softmax(logits, topo.pair_offsets.clone())
    }

    /// Evaluates the fields for several `(slot, context)` keys and the
    /// transition model from one encoding.
    pub fn snapshot(
        &self,
        network: &RoadNetwork,
        topo: &Topology,
        keys: &[(usize, Context)],
    ) -> Result<(Vec<GaussianField>, TransitionModel)> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, topo)?;
        let fields = keys
            .iter()
            .map(|&(slot, ctx)| Ok(self.heads(&mut g, topo, enc, slot, ctx)?.to_field(&g)))
            .collect::<Result<Vec<_>>>()?;
        let lp = self.transition(&mut g, topo, enc)?;
        let a = TransitionModel::from_log_probs(network, g.value(lp).iter().copied().collect())?;
        Ok((fields, a))
    }

    /// Field and transition model for one slot and context.
    pub fn forward(
        &self,
        network: &RoadNetwork,
        topo: &Topology,
        slot: usize,
        ctx: Context,
    ) -> Result<(GaussianField, TransitionModel)> {
        let (mut fields, a) = self.snapshot(network, topo, &[(slot, ctx)])?;
        Ok((fields.pop().unwrap(), a))
    }
}

/// Sidecar metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub relations: Vec<String>,
    /// Hex FNV-1a 64 of the canonical network JSON.
    pub network_fingerprint: String,
    pub seed: u64,
    pub epoch: usize,
}

pub fn fingerprint_hex(network: &RoadNetwork) -> String {
    format!("{:016x}", network.fingerprint())
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes the checkpoint and its sidecar (`<checkpoint>.json`).
pub fn save_model(model: &Model, network: &RoadNetwork, seed: u64, epoch: usize, checkpoint: &Path) -> Result<()> {
    save_checkpoint(&model.params, checkpoint)?;
    let meta = ModelMeta {
        config: model.config.clone(),
        relations: relation_names(),
        network_fingerprint: fingerprint_hex(network),
        seed,
        epoch,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    let path = meta_path(checkpoint);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_meta(checkpoint: &Path) -> Result<ModelMeta> {
    let path = meta_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint, refusing one trained on a different network.
pub fn load_model(network: &RoadNetwork, checkpoint: &Path) -> Result<(Model, ModelMeta)> {
    let meta = read_meta(checkpoint)?;
    let found = network.fingerprint();
    if meta.network_fingerprint != fingerprint_hex(network) {
        let expected = u64::from_str_radix(&meta.network_fingerprint, 16).unwrap_or(0);
        return Err(Error::Fingerprint { expected, found });
    }
    if meta.relations != relation_names() {
        return Err(Error::validation("checkpoint uses a different relation vocabulary"));
    }
    let mut model = Model::new(meta.config.clone(), meta.seed)?;
    model.check_network(network)?;
    load_checkpoint(&mut model.params, checkpoint)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckOptions};
    use crate::roadnet::fixtures::ring4;
    use crate::roadnet::RoadSegment;
    use crate::simulator::generate_city;

    fn small_config(net: &RoadNetwork) -> ModelConfig {
        ModelConfig {
            edge_id_dim: 4,
            road_type_dim: 3,
            lanes_dim: 2,
            one_way_dim: 2,
            node_id_dim: 3,
            tag_dim: 2,
            street_count_dim: 2,
            weather_dim: 2,
            holiday_dim: 2,
            hidden: 5,
            d_out: 3,
            mlp_hidden: 4,
            ..ModelConfig::for_network(net, 4)
        }
    }

    fn setup(seed: u64) -> (RoadNetwork, Topology, Model) {
        let net = ring4();
        let topo = Topology::new(&net).unwrap();
        let model = Model::new(small_config(&net), seed).unwrap();
        (net, topo, model)
    }

    #[test]
    fn feature_widths() {
        let (_, topo, model) = setup(1);
        let mut g = Graph::new();
        let (he, hv) = model.embed_features(&mut g, &topo).unwrap();
        assert_eq!(g.shape(he), (8, model.config.edge_feature_dim()));
        assert_eq!(g.shape(hv), (4, model.config.node_feature_dim()));
        assert_eq!(model.config.edge_feature_dim(), 4 + 3 + 2 + 2 + 1);
    }

    #[test]
    fn rows_differ_only_in_id_block() {
        let net =
            crate::roadnet::fixtures::two_way(3, &[(0, 1, RoadType::Primary, 100.0), (1, 2, RoadType::Primary, 100.0)]);
        let topo = Topology::new(&net).unwrap();
        let model = Model::new(small_config(&net), 3).unwrap();
        let mut g = Graph::new();
        let (he, _) = model.embed_features(&mut g, &topo).unwrap();
        let h = g.value(he);
        let id_w = model.config.edge_id_dim;
        assert_ne!(h.row(0).slice(ndarray::s![..id_w]), h.row(2).slice(ndarray::s![..id_w]));
        assert_eq!(h.row(0).slice(ndarray::s![id_w..]), h.row(2).slice(ndarray::s![id_w..]));
    }

    #[test]
    fn categorical_out_of_range_names_entity() {
        let mut segs: Vec<RoadSegment> = ring4().segments().to_vec();
        segs[3].lanes = MAX_LANES + 1;
        let net = RoadNetwork::new(ring4().intersections().to_vec(), segs).unwrap();
        assert!(Topology::new(&net).unwrap_err().to_string().contains("segment 3"));
    }

    fn total_mu_loss(model: &Model, g: &mut Graph, topo: &Topology) -> Result<Var> {
        let enc = model.encode(g, topo)?;
        let h = model.heads(g, topo, enc, 1, Context::default())?;
        let a = g.sum(h.mu_e);
        let b = g.sum(h.mu_v);
        g.add(a, b)
    }

    #[test]
    fn unused_id_rows_get_zero_gradient() {
        let (_, _, mut model) = setup(2);
        // Topology of a network where segment 7's id row is never looked up.
        let net = ring4();
        let mut topo = Topology::new(&net).unwrap();
        topo.edge_ids = vec![0, 1, 2, 3, 4, 5, 6, 0].into();
        let mut g = Graph::new();
        let loss = total_mu_loss(&model, &mut g, &topo).unwrap();
        g.backward(loss, &mut model.params).unwrap();
        let grad = model.params.grad(model.idx.edge_id);
        assert!(grad.row(7).iter().all(|&x| x == 0.0));
        assert!(grad.row(0).iter().any(|&x| x != 0.0));
    }

    /// Plain-loop transcription of the stacked layers for one graph.
    fn reference_stack(model: &Model, prefix: &str, h0: &Matrix, incoming: &[Vec<(usize, usize)>]) -> Matrix {
        let p = |name: String| model.params.value(model.params.id(&name).unwrap()).clone();
        let n = h0.nrows();
        let hid = model.config.hidden;
        let vecmat = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.ncols()).map(|k| (0..w.nrows()).map(|i| x[i] * w[[i, k]]).sum()).collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let gru = |step: usize, x: &Matrix, c: &Matrix| -> Matrix {
            let mut out = Matrix::zeros((n, hid));
            for i in 0..n {
                let xi: Vec<f64> = x.row(i).to_vec();
                let ci: Vec<f64> = c.row(i).to_vec();
                let lin = |gate: char, state: &[f64]| -> Vec<f64> {
                    let a = vecmat(&xi, &p(format!("{prefix}.gru{step}.w_{gate}")));
                    let b = vecmat(state, &p(format!("{prefix}.gru.o_{gate}")));
                    let bias = p(format!("{prefix}.gru.b_{gate}"));
                    (0..hid).map(|k| a[k] + b[k] + bias[[0, k]]).collect()
                };
                let o: Vec<f64> = lin('o', &ci).into_iter().map(sig).collect();
                let q: Vec<f64> = lin('q', &ci).into_iter().map(sig).collect();
                let qc: Vec<f64> = (0..hid).map(|k| q[k] * ci[k]).collect();
                let cand: Vec<f64> = lin('h', &qc).into_iter().map(f64::tanh).collect();
                for k in 0..hid {
                    out[[i, k]] = o[k] * ci[k] + (1.0 - o[k]) * cand[k];
                }
            }
            out
        };
        let concat = |a: &Matrix, b: &Matrix| -> Matrix {
            Matrix::from_shape_fn((n, a.ncols() + b.ncols()), |(i, k)| {
                if k < a.ncols() {
                    a[[i, k]]
                } else {
                    b[[i, k - a.ncols()]]
                }
            })
        };
        let mut hs = vec![h0.clone()];
        let mut cs = vec![gru(0, h0, &Matrix::zeros((n, hid)))];
        for l in 0..model.config.layers {
            let input = match l {
                0 => h0.clone(),
                1 => concat(&hs[0], &hs[1]),
                _ => concat(&cs[l - 1], &hs[l]),
            };
            let x = if l == 0 { input } else { input.dot(&p(format!("{prefix}.layer{l}.proj"))) };
            let mut h = Matrix::zeros((n, hid));
            for i in 0..n {
                let mut acc = vecmat(&x.row(i).to_vec(), &p(format!("{prefix}.layer{l}.w_self")));
                for r in 0..NUM_RELATIONS {
                    let nbrs: Vec<usize> = incoming[i].iter().filter(|(_, rr)| *rr == r).map(|(j, _)| *j).collect();
                    for &j in &nbrs {
                        let m = vecmat(&x.row(j).to_vec(), &p(format!("{prefix}.layer{l}.w_rel{r}")));
                        for k in 0..hid {
                            acc[k] += m[k] / nbrs.len() as f64;
                        }
                    }
                }
                for k in 0..hid {
                    h[[i, k]] = acc[k].tanh();
                }
            }
            hs.push(h.clone());
            let c = gru(l + 1, &h, &cs[l]);
            cs.push(c);
        }
        cs.pop().unwrap()
    }

    #[test]
    fn stack_matches_transcription() {
        let (net, topo, model) = setup(4);
        let mut g = Graph::new();
        let (h0e, h0v) = model.embed_features(&mut g, &topo).unwrap();
        let enc = model.encode(&mut g, &topo).unwrap();
        let edge_in: Vec<Vec<(usize, usize)>> =
            (0..8).map(|i| net.in_links(i).iter().map(|&(j, r)| (j, r.index())).collect()).collect();
        let want = reference_stack(&model, "edge", &g.value(h0e).clone(), &edge_in);
        let got = g.value(enc.h_e);
        assert_eq!(got.dim(), want.dim());
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let node_in: Vec<Vec<(usize, usize)>> = net
            .node_in_neighbors()
            .into_iter()
            .map(|l| l.into_iter().map(|u| (u, net.node_relation(u).index())).collect())
            .collect();
        let want = reference_stack(&model, "node", &g.value(h0v).clone(), &node_in);
        for (a, b) in g.value(enc.h_v).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn isolated_entity_uses_self_term_only() {
        let (_, mut topo, model) = setup(5);
        // Drop every incoming message.
        for (_, agg) in topo.edge_rel.iter_mut() {
            *agg = Rc::new(Csr::from_triplets(8, 8, &[]));
        }
        let mut g = Graph::new();
        let (h0, _) = model.embed_features(&mut g, &topo).unwrap();
        let out = model.rgcn_layer(&mut g, &model.idx.edge_graph, &topo.edge_rel, 0, h0).unwrap();
        let w0 = model.params.value(model.idx.edge_graph.w_self[0]);
        let want = g.value(h0).dot(w0).mapv(f64::tanh);
        for (a, b) in g.value(out).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_relation_weights_ignore_topology() {
        let (_, topo, mut model) = setup(6);
        for layer in model.idx.edge_graph.w_rel.clone() {
            for id in layer {
                model.params.value_mut(id).fill(0.0);
            }
        }
        let mut isolated = topo.clone();
        for (_, agg) in isolated.edge_rel.iter_mut() {
            *agg = Rc::new(Csr::from_triplets(8, 8, &[]));
        }
        let run = |t: &Topology| {
            let mut g = Graph::new();
            let enc = model.encode(&mut g, t).unwrap();
            g.value(enc.h_e).clone()
        };
        assert_eq!(run(&topo), run(&isolated));
    }

    #[test]
    fn zero_time_column_gives_uniform_field() {
        let (net, topo, mut model) = setup(7);
        model.params.value_mut(model.idx.time).column_mut(2).fill(0.0);
        let (f, _) = model.forward(&net, &topo, 2, Context { weather: 1, holiday: 1 }).unwrap();
        let sp0 = std::f64::consts::LN_2;
        for (e, s) in net.segments().iter().enumerate() {
            assert!((f.mu_e[e] - s.free_flow_secs() * (1.0 + sp0)).abs() < 1e-12);
            assert!((f.sigma_e[e] - (s.free_flow_secs() * sp0 + SIGMA_FLOOR)).abs() < 1e-12);
        }
        for v in 0..4 {
            assert!((f.mu_v[v] - NODE_SCALE * sp0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_time_columns_give_identical_fields() {
        let (net, topo, mut model) = setup(8);
        let col = model.params.value(model.idx.time).column(0).to_owned();
        model.params.value_mut(model.idx.time).column_mut(3).assign(&col);
        let a = model.forward(&net, &topo, 0, Context::default()).unwrap().0;
        let b = model.forward(&net, &topo, 3, Context::default()).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn fields_are_positive_for_random_parameters() {
        let net = generate_city(3, 3, 1).unwrap();
        let topo = Topology::new(&net).unwrap();
        for seed in 0..100 {
            let mut model = Model::new(small_config(&net), seed).unwrap();
            // Exaggerate parameters so heads reach far into the softplus tails.
            for id in model.params.ids().collect::<Vec<_>>() {
                model.params.value_mut(id).mapv_inplace(|x| x * 8.0);
            }
            let (f, _) = model.forward(&net, &topo, (seed % 4) as usize, Context::default()).unwrap();
            assert!(f.sigma_e.iter().chain(&f.sigma_v).all(|&s| s >= SIGMA_FLOOR), "seed {seed}");
            assert!(f.mu_e.iter().chain(&f.mu_v).all(|&m| m >= 0.0 && m.is_finite()), "seed {seed}");
            assert!(f.mu_e.iter().zip(net.free_flow_secs()).all(|(&m, ff)| m >= ff), "seed {seed}");
        }
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let net = generate_city(3, 3, 2).unwrap();
        let topo = Topology::new(&net).unwrap();
        for seed in 0..20 {
            let model = Model::new(small_config(&net), seed).unwrap();
            let (_, a) = model.forward(&net, &topo, 0, Context::default()).unwrap();
            for e in 0..net.num_edges() {
                let row = a.row(e);
                if !row.is_empty() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|&p| p > 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_mlp_output_is_uniform() {
        let (net, topo, mut model) = setup(9);
        model.params.value_mut(model.idx.mlp_w2).fill(0.0);
        let (_, a) = model.forward(&net, &topo, 0, Context::default()).unwrap();
        for e in 0..8 {
            let row = a.row(e);
            for p in &row {
                assert!((p - 1.0 / row.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let (net, topo, model) = setup(10);
        let a = model.forward(&net, &topo, 1, Context { weather: 2, holiday: 0 }).unwrap();
        let b = model.forward(&net, &topo, 1, Context { weather: 2, holiday: 0 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.num_edges(), 8);
        assert_eq!(a.0.num_nodes(), 4);
        assert!(model.forward(&net, &topo, 4, Context::default()).is_err());
    }

    /// Relabels segments by `perm` (new id of old segment `i` is `perm[i]`).
    fn permuted(net: &RoadNetwork, perm: &[usize]) -> RoadNetwork {
        let mut segs = vec![None; net.num_edges()];
        for (old, s) in net.segments().iter().enumerate() {
            segs[perm[old]] = Some(RoadSegment { id: perm[old], ..s.clone() });
        }
        RoadNetwork::new(net.intersections().to_vec(), segs.into_iter().map(Option::unwrap).collect()).unwrap()
    }

    #[test]
    fn relabeling_segments_permutes_outputs() {
        let (net, topo, model) = setup(11);
        let perm = [2, 3, 0, 1, 6, 7, 4, 5];
        let pnet = permuted(&net, &perm);
        let ptopo = Topology::new(&pnet).unwrap();
        let mut pmodel = model.clone();
        let table = model.params.value(model.idx.edge_id).clone();
        let dst = pmodel.params.value_mut(pmodel.idx.edge_id);
        for old in 0..8 {
            dst.row_mut(perm[old]).assign(&table.row(old));
        }
        let (f, a) = model.forward(&net, &topo, 0, Context::default()).unwrap();
        let (pf, pa) = pmodel.forward(&pnet, &ptopo, 0, Context::default()).unwrap();
        for old in 0..8 {
            assert!((f.mu_e[old] - pf.mu_e[perm[old]]).abs() < 1e-12);
            for (k, &j) in net.out_links(old).iter().enumerate() {
                let p = a.row(old)[k];
                let pj = pnet.out_links(perm[old]).iter().position(|&x| x == perm[j]).unwrap();
                assert!((p - pa.row(perm[old])[pj]).abs() < 1e-12);
            }
        }
        assert_eq!(f.mu_v, pf.mu_v);
    }

    #[test]
    fn full_forward_passes_gradient_check() {
        let (_, topo, model) = setup(12);
        let report = grad_check(
            &mut model.params.clone(),
            |g, store| {
                let m = model.with_params(store.clone());
                let enc = m.encode(g, &topo)?;
                let h = m.heads(g, &topo, enc, 1, Context { weather: 1, holiday: 1 })?;
                let lp = m.transition(g, &topo, enc)?;
                let parts = [h.mu_e, h.sigma_e, h.mu_v, h.sigma_v, lp];
                let mut total = None;
                for (k, v) in parts.into_iter().enumerate() {
                    let sq = g.square(v);
                    let s = g.sum(sq);
                    let s = g.scale(s, 1.0 / (k + 1) as f64);
                    total = Some(match total {
                        None => s,
                        Some(t) => g.add(t, s)?,
                    });
                }
                Ok(total.unwrap())
            },
            GradCheckOptions { samples: 300, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_fingerprint_guard() {
        let (net, topo, model) = setup(13);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.ckpt");
        save_model(&model, &net, 13, 5, &ckpt).unwrap();
        let (loaded, meta) = load_model(&net, &ckpt).unwrap();
        assert_eq!(meta.epoch, 5);
        assert_eq!(
            loaded.forward(&net, &topo, 0, Context::default()).unwrap(),
            model.forward(&net, &topo, 0, Context::default()).unwrap()
        );
        let other = generate_city(2, 2, 1).unwrap();
        assert!(matches!(load_model(&other, &ckpt), Err(Error::Fingerprint { .. })));
    }
}
