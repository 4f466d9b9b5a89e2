//! Travel-time error metrics, route-recovery accuracy, field-versus-oracle
//! comparison and the four-state road-condition map.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GaussianField;
use crate::roadnet::{EdgeId, RoadNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TteMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Fraction, not percent.
    pub mape: f64,
}

pub fn tte_metrics(pred: &[f64], truth: &[f64]) -> Result<TteMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::validation(format!(
            "need equal nonempty lengths, got {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(i) = truth.iter().position(|&t| t <= 0.0) {
        return Err(Error::validation(format!("truth[{i}] = {} is not positive", truth[i])));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae, mut ape) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
        ape += d.abs() / t;
    }
    Ok(TteMetrics { rmse: (se / n).sqrt(), mae: ae / n, mape: ape / n })
}

/// Length of the segments shared by both routes over the longer route's
/// length.
pub fn route_accuracy(network: &RoadNetwork, truth: &[EdgeId], inferred: &[EdgeId]) -> f64 {
    let len = |edges: &[EdgeId]| edges.iter().map(|&e| network.segment(e).length).sum::<f64>();
    let denom = len(truth).max(len(inferred));
    if denom <= 0.0 {
        return 0.0;
    }
    let truth_set: HashSet<EdgeId> = truth.iter().copied().collect();
    let mut seen = HashSet::new();
    let shared: f64 =
        inferred.iter().filter(|e| truth_set.contains(e) && seen.insert(**e)).map(|&e| network.segment(e).length).sum();
    shared / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionState {
    VeryCongested,
    Congested,
    Slow,
    Unblocked,
}

impl ConditionState {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionState::VeryCongested => "very_congested",
            ConditionState::Congested => "congested",
            ConditionState::Slow => "slow",
            ConditionState::Unblocked => "unblocked",
        }
    }

    /// State of a segment driven at `speed` under limit `limit` (same units).
    pub fn classify(speed: f64, limit: f64) -> Self {
        let ratio = speed / limit;
        if ratio < 0.25 {
            ConditionState::VeryCongested
        } else if ratio < 0.5 {
            ConditionState::Congested
        } else if ratio < 0.75 {
            ConditionState::Slow
        } else {
            ConditionState::Unblocked
        }
    }
}

/// State of every segment under the field's mean times.
pub fn condition_map(field: &GaussianField, network: &RoadNetwork) -> Vec<ConditionState> {
    network
        .segments()
        .iter()
        .zip(&field.mu_e)
        .map(|(s, &mu)| ConditionState::classify(s.length / mu * 3.6, s.speed_limit))
        .collect()
}

pub fn condition_agreement(pred: &[ConditionState], truth: &[ConditionState]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::validation(format!("condition maps differ in size ({} vs {})", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// `edge_id,slot,state` rows.
pub fn write_conditions_csv(path: impl AsRef<Path>, maps: &[(usize, Vec<ConditionState>)]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["edge_id", "slot", "state"]).map_err(err)?;
    for (slot, states) in maps {
        for (e, s) in states.iter().enumerate() {
            w.write_record([e.to_string(), slot.to_string(), s.as_str().to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean absolute percentage error of predicted edge means against the
/// oracle, over edges with at least `min_count` traversals. `None` when no
/// edge qualifies.
pub fn field_mape_frequent(pred_mu: &[f64], oracle_mu: &[f64], counts: &[usize], min_count: usize) -> Option<f64> {
    let errs: Vec<f64> = (0..pred_mu.len())
        .filter(|&e| counts[e] >= min_count)
        .map(|e| (pred_mu[e] - oracle_mu[e]).abs() / oracle_mu[e])
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mape: f64,
    /// Mean route accuracy of the recovered routes; `None` without ground truth.
    pub route_accuracy: Option<f64>,
    /// Same measure for the length-shortest route, for reference.
    pub shortest_route_accuracy: Option<f64>,
    /// Fraction of all trips whose true route is among the candidates.
    pub candidate_coverage: Option<f64>,
    /// Agreement with the oracle condition map, keyed by slot.
    pub condition_agreement: BTreeMap<usize, f64>,
    /// Edge-mean error against the oracle over edges traversed at least 20 times.
    pub field_mape_frequent: Option<f64>,
    /// Expected MAPE of predicting each trip by the oracle mean of a route
    /// drawn from the simulated driver's choice distribution for its OD
    /// pair: how much repeat trips on one OD pair disagree on their own.
    pub noise_floor_mape: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "records            {}", self.records);
        let _ = writeln!(s, "RMSE               {:.2} s", self.rmse);
        let _ = writeln!(s, "MAE                {:.2} s", self.mae);
        let _ = writeln!(s, "MAPE               {:.2}%", 100.0 * self.mape);
        let _ = writeln!(s, "route accuracy     {}", opt(self.route_accuracy));
        let _ = writeln!(s, "shortest baseline  {}", opt(self.shortest_route_accuracy));
        let _ = writeln!(s, "candidate coverage {}", opt(self.candidate_coverage));
        let _ = writeln!(s, "field MAPE (>=20)  {}", opt(self.field_mape_frequent));
        let _ = writeln!(s, "noise floor MAPE   {}", opt(self.noise_floor_mape));
        for (slot, a) in &self.condition_agreement {
            let _ = writeln!(s, "conditions slot {slot:<3} {:.2}%", 100.0 * a);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::fixtures::two_way;
    use crate::roadnet::RoadType;

    #[test]
    fn metric_examples() {
        assert_eq!(tte_metrics(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), TteMetrics { rmse: 0.0, mae: 0.0, mape: 0.0 });
        let m = tte_metrics(&[110.0], &[100.0]).unwrap();
        assert!((m.rmse - 10.0).abs() < 1e-12 && (m.mae - 10.0).abs() < 1e-12 && (m.mape - 0.1).abs() < 1e-12);
        assert!(tte_metrics(&[1.0], &[0.0]).is_err());
        assert!(tte_metrics(&[], &[]).is_err());
        assert!(tte_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn route_accuracy_examples() {
        // e1 = 100 m (id 0), e2 = 200 m (id 2), e3 = 300 m (id 4).
        let net = two_way(
            4,
            &[(0, 1, RoadType::Primary, 100.0), (1, 2, RoadType::Primary, 200.0), (1, 3, RoadType::Primary, 300.0)],
        );
        assert_eq!(route_accuracy(&net, &[0, 2], &[0, 4]), 0.25);
        assert_eq!(route_accuracy(&net, &[0, 2], &[0, 2]), 1.0);
        assert_eq!(route_accuracy(&net, &[0], &[4]), 0.0);
    }

    #[test]
    fn condition_boundaries() {
        assert_eq!(ConditionState::classify(10.0, 60.0), ConditionState::VeryCongested);
        assert_eq!(ConditionState::classify(15.0, 60.0), ConditionState::Congested);
        assert_eq!(ConditionState::classify(30.0, 60.0), ConditionState::Slow);
        assert_eq!(ConditionState::classify(45.0, 60.0), ConditionState::Unblocked);
        assert_eq!(ConditionState::classify(60.0, 60.0), ConditionState::Unblocked);
    }

    #[test]
    fn free_flow_field_is_unblocked() {
        let net = two_way(3, &[(0, 1, RoadType::Primary, 100.0), (1, 2, RoadType::Tertiary, 250.0)]);
        let f = GaussianField {
            mu_e: net.free_flow_secs(),
            sigma_e: vec![1.0; 4],
            mu_v: vec![0.0; 3],
            sigma_v: vec![1.0; 3],
        };
        assert!(condition_map(&f, &net).iter().all(|&s| s == ConditionState::Unblocked));
    }

    #[test]
    fn agreement_examples() {
        use ConditionState::*;
        let a = [VeryCongested, Congested, Slow, Unblocked];
        let shifted = [Congested, Slow, Unblocked, VeryCongested];
        assert_eq!(condition_agreement(&a, &a).unwrap(), 1.0);
        assert_eq!(condition_agreement(&a, &shifted).unwrap(), 0.0);
        assert!(condition_agreement(&a, &a[..2]).is_err());
    }

    #[test]
    fn frequent_field_mape() {
        let got = field_mape_frequent(&[110.0, 50.0, 1.0], &[100.0, 100.0, 100.0], &[20, 25, 3], 20).unwrap();
        assert!((got - 0.3).abs() < 1e-12);
        assert_eq!(field_mape_frequent(&[1.0], &[1.0], &[0], 20), None);
    }

    #[test]
    fn conditions_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_conditions_csv(&p, &[(3, vec![ConditionState::Slow, ConditionState::Unblocked])]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "edge_id,slot,state\n0,3,slow\n1,3,unblocked\n");
    }

    #[test]
    fn report_json_has_documented_fields() {
        let r = EvalReport {
            records: 3,
            rmse: 2.0,
            mae: 1.0,
            mape: 0.1,
            route_accuracy: Some(0.5),
            shortest_route_accuracy: None,
            candidate_coverage: None,
            condition_agreement: BTreeMap::from([(8, 0.75)]),
            field_mape_frequent: None,
            noise_floor_mape: None,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["rmse", "mae", "mape", "route_accuracy", "condition_agreement", "field_mape_frequent"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(r.to_text().contains("MAPE"));
    }
}
