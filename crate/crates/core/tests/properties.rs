use std::collections::HashSet;

use odtte::autodiff::{Graph, Matrix};
use odtte::dataset::Context;
use odtte::eval::{condition_map, route_accuracy, tte_metrics};
use odtte::field::GaussianField;
use odtte::model::Topology;
use odtte::roadnet::fixtures::ring4;
use odtte::roadnet::{relation_of, RoadNetwork, RoadType};
use odtte::routesearch::{
    best_match, enumerate_candidates, oracle, route_mean_time, select_route, Candidate, Route, SearchParams,
    TransitionModel,
};
use odtte::training::{kl_target, loss_aggregate, loss_kl, loss_transition, CandidateBatch, RouteBatch};
use odtte::verify::{random_network, small_model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(net: &RoadNetwork, rng: &mut ChaCha8Rng) -> GaussianField {
    let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    GaussianField {
        mu_e: draw(net.num_edges(), 5.0, 80.0),
        sigma_e: draw(net.num_edges(), 0.5, 10.0),
        mu_v: draw(net.num_nodes(), 0.0, 30.0),
        sigma_v: draw(net.num_nodes(), 0.1, 5.0),
    }
}

fn random_logits(net: &RoadNetwork, rng: &mut ChaCha8Rng) -> TransitionModel {
    let logits: Vec<f64> =
        (0..TransitionModel::pair_offsets(net)[net.num_edges()]).map(|_| rng.random_range(-2.0..2.0)).collect();
    TransitionModel::from_logits(net, &logits).unwrap()
}

/// Every simple route of a random network with at least `min_edges` edges.
fn long_routes(net: &RoadNetwork, a: &TransitionModel, min_edges: usize) -> Vec<Route> {
    let mut out = Vec::new();
    for o in 0..net.num_edges() {
        for d in 0..net.num_edges() {
            if o != d {
                out.extend(
                    oracle::all_simple_routes(net, a, o, d)
                        .into_iter()
                        .map(|c| c.route)
                        .filter(|r| r.edges().len() >= min_edges),
                );
            }
        }
    }
    out
}

fn reference_metrics(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let mut sq = Vec::new();
    let mut abs = Vec::new();
    let mut pct = Vec::new();
    for i in 0..pred.len() {
        let d = (truth[i] - pred[i]).abs();
        sq.push(d * d);
        abs.push(d);
        pct.push(d / truth[i]);
    }
    let mean = |v: &[f64]| v.iter().fold(0.0, |a, b| a + b) / n;
    (mean(&sq).sqrt(), mean(&abs), mean(&pct))
}

fn reference_accuracy(net: &RoadNetwork, truth: &[usize], inferred: &[usize]) -> f64 {
    let a: HashSet<usize> = truth.iter().copied().collect();
    let b: HashSet<usize> = inferred.iter().copied().collect();
    let len = |s: &HashSet<usize>| s.iter().map(|&e| net.segment(e).length).sum::<f64>();
    let shared: HashSet<usize> = a.intersection(&b).copied().collect();
    len(&shared) / len(&a).max(len(&b))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn out_links_follow_the_turn_rule(seed in 0u64..10_000) {
        let net = random_network(seed, 12).unwrap();
        for i in 0..net.num_edges() {
            let links = net.out_links(i);
            let unique: HashSet<_> = links.iter().collect();
            prop_assert_eq!(unique.len(), links.len());
            for j in 0..net.num_edges() {
                let allowed = net.segment(i).to_node == net.segment(j).from_node && net.reverse_twin(i) != Some(j);
                prop_assert_eq!(links.contains(&j), allowed, "pair {} -> {}", i, j);
            }
            prop_assert!(!links.contains(&i));
        }
    }

    #[test]
    fn network_json_round_trips(seed in 0u64..10_000) {
        let net = random_network(seed, 12).unwrap();
        let back = RoadNetwork::from_json(&net.to_json()).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(back.fingerprint(), net.fingerprint());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), spread in 0.1f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-spread..spread));
        let mut g = Graph::new();
        let x = g.constant(m);
        let s = g.softmax_rows(x);
        for row in g.value(s).rows() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn model_outputs_respect_floors_for_scaled_parameters(seed in 0u64..1000, scale in 0.1f64..6.0) {
        let net = random_network(seed, 12).unwrap();
        let topo = Topology::new(&net).unwrap();
        let mut model = small_model(&net, 3, seed).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            model.params.value_mut(id).mapv_inplace(|x| x * scale);
        }
        let (field, a) = model.forward(&net, &topo, 2, Context { weather: 3, holiday: 1 }).unwrap();
        let ff = net.free_flow_secs();
        for e in 0..net.num_edges() {
            prop_assert!(field.mu_e[e] >= ff[e] && field.sigma_e[e] > 0.0);
            let row = a.row(e);
            if !row.is_empty() {
                prop_assert!(row.iter().all(|&p| p > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        prop_assert!(field.mu_v.iter().all(|&m| m >= 0.0));
        prop_assert!(field.sigma_v.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn route_mean_is_additive_across_a_split(seed in 0u64..2000) {
        let net = random_network(seed, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_logits(&net, &mut rng);
        let field = random_field(&net, &mut rng);
        for route in long_routes(&net, &a, 2).into_iter().take(20) {
            let edges = route.edges();
            let k = rng.random_range(1..edges.len());
            let head = Route::new(&net, edges[..k].to_vec()).unwrap();
            let tail = Route::new(&net, edges[k..].to_vec()).unwrap();
            let junction = net.segment(edges[k - 1]).to_node;
            let joined = route_mean_time(&head, &field, &net) + route_mean_time(&tail, &field, &net) + field.mu_v[junction];
            prop_assert!((route_mean_time(&route, &field, &net) - joined).abs() <= 1e-9);
        }
    }

    #[test]
    fn greedy_selection_ignores_the_random_stream(seed in 0u64..2000, observed in 10.0f64..600.0) {
        let net = random_network(seed, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_logits(&net, &mut rng);
        let field = random_field(&net, &mut rng);
        let (o, d) = (0, net.num_edges() - 1);
        if let Ok(set) = enumerate_candidates(&net, &a, o, d, &SearchParams::unpruned(8)) {
            let best = best_match(&set, observed, &field, &net);
            for s in 0..5 {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                prop_assert_eq!(select_route(&set, observed, &field, &net, 0.0, &mut r), best);
            }
        }
    }

    #[test]
    fn route_accuracy_is_symmetric_and_bounded(seed in 0u64..2000) {
        let net = random_network(seed, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_logits(&net, &mut rng);
        let routes = long_routes(&net, &a, 1);
        for _ in 0..20 {
            let x = &routes[rng.random_range(0..routes.len())];
            let y = &routes[rng.random_range(0..routes.len())];
            let xy = route_accuracy(&net, x.edges(), y.edges());
            prop_assert_eq!(xy, route_accuracy(&net, y.edges(), x.edges()));
            prop_assert!((0.0..=1.0).contains(&xy));
        }
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((0.0f64..5000.0, 1.0f64..5000.0), 1..50)) {
        let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = tte_metrics(&pred, &truth).unwrap();
        prop_assert!(m.rmse >= m.mae * (1.0 - 1e-12));
        prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
    }

    #[test]
    fn condition_map_ignores_common_rescaling(seed in 0u64..2000, power in -3i32..4) {
        let net = random_network(seed, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = random_field(&net, &mut rng);
        let k = 2f64.powi(power);
        let segments = net
            .segments()
            .iter()
            .map(|s| odtte::roadnet::RoadSegment { length: s.length * k, ..s.clone() })
            .collect();
        let scaled_net = RoadNetwork::new(net.intersections().to_vec(), segments).unwrap();
        prop_assert_eq!(condition_map(&field, &net), condition_map(&field.scaled(k), &scaled_net));
    }
}

#[test]
fn relation_labels_are_a_pure_function_of_road_types() {
    let types = [
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
    for &x in &types {
        for &y in &types {
            assert_eq!(relation_of(x, y), relation_of(x, y));
            for &x2 in types.iter().filter(|t| t.class() == x.class()) {
                for &y2 in types.iter().filter(|t| t.class() == y.class()) {
                    assert_eq!(relation_of(x, y), relation_of(x2, y2));
                }
            }
        }
    }
}

#[test]
fn metrics_match_reference_implementations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = rng.random_range(1..40);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(30.0..3000.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3500.0)).collect();
        let m = tte_metrics(&pred, &truth).unwrap();
        let (rmse, mae, mape) = reference_metrics(&pred, &truth);
        assert!((m.rmse - rmse).abs() <= 1e-12 * rmse.max(1.0), "case {case}");
        assert!((m.mae - mae).abs() <= 1e-12 * mae.max(1.0), "case {case}");
        assert!((m.mape - mape).abs() <= 1e-12, "case {case}");

        let net = random_network(case, 12).unwrap();
        let a = random_logits(&net, &mut rng);
        let routes = long_routes(&net, &a, 1);
        let x = &routes[rng.random_range(0..routes.len())];
        let y = &routes[rng.random_range(0..routes.len())];
        let got = route_accuracy(&net, x.edges(), y.edges());
        assert!((got - reference_accuracy(&net, x.edges(), y.edges())).abs() <= 1e-12, "case {case}");
    }
}

fn gradients_of(weights: [f64; 3], seed: u64) -> Vec<Matrix> {
    let net = ring4();
    let topo = Topology::new(&net).unwrap();
    let model = small_model(&net, 2, seed).unwrap();
    let route = [0usize, 2, 4];
    let cands = vec![
        Candidate { route: Route::new(&net, vec![0, 2, 4]).unwrap(), log_prob: 0.0 },
        Candidate { route: Route::new(&net, vec![0, 2]).unwrap(), log_prob: 0.0 },
    ];
    let cb = CandidateBatch::new(&net, &topo, &[&cands]).unwrap();
    let rb = RouteBatch::new(&net, &topo, &[&route]).unwrap();
    let log_q = kl_target(&[90.0, 60.0], 80.0, 30.0);
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &topo).unwrap();
    let lp = model.transition(&mut g, &topo, enc).unwrap();
    let h = model.heads(&mut g, &topo, enc, 1, Context { weather: 0, holiday: 1 }).unwrap();
    let parts = [
        loss_aggregate(&mut g, &h, &rb, &[80.0]).unwrap(),
        loss_transition(&mut g, lp, &rb).unwrap(),
        loss_kl(&mut g, lp, &cb, &log_q).unwrap(),
    ];
    let mut total = None;
    for (p, w) in parts.into_iter().zip(weights) {
        let s = g.sum(p);
        let s = g.scale(s, w);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).unwrap(),
        });
    }
    let mut store = model.params.clone();
    store.zero_grads();
    g.backward(total.unwrap(), &mut store).unwrap();
    store.ids().map(|id| store.grad(id).clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn total_gradient_is_the_weighted_sum_of_loss_gradients(alpha in 0.0f64..1.0, frac in 0.0f64..1.0, seed in 0u64..50) {
        let beta = (1.0 - alpha) * frac;
        let gamma = 1.0 - alpha - beta;
        let total = gradients_of([alpha, beta, gamma], seed);
        let parts = [gradients_of([1.0, 0.0, 0.0], seed), gradients_of([0.0, 1.0, 0.0], seed), gradients_of([0.0, 0.0, 1.0], seed)];
        for (i, t) in total.iter().enumerate() {
            let combined = &parts[0][i] * alpha + &parts[1][i] * beta + &parts[2][i] * gamma;
            for (x, y) in t.iter().zip(combined.iter()) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{} vs {}", x, y);
            }
        }
    }
}
