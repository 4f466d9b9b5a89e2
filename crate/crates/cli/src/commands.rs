use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use odtte::dataset::{
    is_train_record, read_od_csv, write_od_csv, write_routes_csv, Context, ODRecord, NUM_HOLIDAY, NUM_WEATHER,
};
use odtte::eval::{
    condition_agreement, condition_map, field_mape_frequent, route_accuracy, write_conditions_csv, EvalReport,
};
use odtte::field::GaussianField;
use odtte::model::{fingerprint_hex, load_model, save_model, Model, ModelConfig, Topology};
use odtte::roadnet::{save_network, RoadNetwork};
use odtte::routesearch::shortest_route;
use odtte::simulator::{
    assign_oracle, generate_city, od_route_choices, replicate_ape, sample_trips, OracleField, TripConfig,
};
use odtte::training::{candidate_coverage, infer_all, score, train as run_training, Snapshot, LOG_HEADER};
use odtte::verify;
use rayon::prelude::*;
use serde_json::json;

use crate::data::*;
use crate::manifest::RunManifest;
use crate::{EvalArgs, ExportArgs, GenArgs, Global, InferArgs, TrainArgs, VerifyArgs};

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Seed of slot `slot`'s trip sample, decorrelated from the city seed.
fn trip_seed(seed: u64, slot: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1000 + slot as u64)
}

pub fn gen(g: &Global, a: &GenArgs) -> Result<ExitCode> {
    let seed = g.seed.unwrap_or(0);
    if a.trips_per_slot == 0 {
        bail!("--trips-per-slot must be >= 1");
    }
    let slots = match &a.only_slots {
        Some(list) => parse_slots(list, a.slots)?,
        None => (0..a.slots).collect(),
    };
    create_out(&g.out)?;
    let net = generate_city(a.rows, a.cols, seed)?;
    save_network(&net, g.out.join(NETWORK_FILE))?;
    let oracle = assign_oracle(&net, a.slots, seed.wrapping_add(1))?;
    oracle.write_csv(g.out.join(ORACLE_FILE))?;

    let mut outputs = vec![NETWORK_FILE.to_string(), ORACLE_FILE.to_string()];
    let mut truths = Vec::new();
    let mut contexts = serde_json::Map::new();
    for &slot in &slots {
        let cfg = TripConfig { first_record_index: truths.len(), ..Default::default() };
        let sample = sample_trips(&net, &oracle, a.trips_per_slot, slot, trip_seed(seed, slot), &cfg)?;
        let name = od_file_name(slot);
        write_od_csv(g.out.join(&name), &sample.records)?;
        log::info!(
            "slot {slot}: {} trips, weather {} holiday {}",
            sample.records.len(),
            sample.context.weather,
            sample.context.holiday
        );
        contexts
            .insert(slot.to_string(), json!({"weather": sample.context.weather, "holiday": sample.context.holiday}));
        outputs.push(name);
        truths.extend(sample.truths);
    }
    write_routes_csv(g.out.join(ROUTES_FILE), &truths)?;
    outputs.push(ROUTES_FILE.to_string());

    let config = json!({
        "rows": a.rows,
        "cols": a.cols,
        "slots": a.slots,
        "trips_per_slot": a.trips_per_slot,
        "sampled_slots": slots,
        "contexts": contexts,
    });
    let mut m = RunManifest::new("gen", seed, config);
    m.outputs = outputs;
    m.network_fingerprint = Some(fingerprint_hex(&net));
    m.write(&g.out)?;
    println!("wrote {} trips over {} slots to {}", truths.len(), slots.len(), g.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<ExitCode> {
    let mut config = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    let net = load_net(&a.data)?;
    let records = load_records(&a.data)?;
    let truths = load_truths(&a.data)?;
    let slots = slot_count(&a.data, &records)?;
    let problems: Vec<String> =
        records.iter().filter_map(|r| r.validate(net.num_edges(), slots).err()).map(|e| e.to_string()).collect();
    if !problems.is_empty() {
        let shown = problems.iter().take(20).cloned().collect::<Vec<_>>().join("\n  ");
        bail!("{} invalid records:\n  {shown}", problems.len());
    }

    let (model, start_epoch) = match &a.resume {
        Some(ckpt) => {
            let (m, meta) = load_model(&net, ckpt)?;
            if m.config.slots != slots {
                bail!("checkpoint has {} slots, data has {slots}", m.config.slots);
            }
            (m, meta.epoch)
        }
        None => (Model::new(ModelConfig::for_network(&net, slots), config.seed)?, 0),
    };
    if start_epoch >= config.epochs {
        bail!("checkpoint is at epoch {start_epoch}; raise epochs above it to continue");
    }
    create_out(&g.out)?;

    let log_path = g.out.join("train_log.csv");
    let append = a.resume.is_some() && log_path.exists();
    let mut log_file =
        if append { std::fs::OpenOptions::new().append(true).open(&log_path) } else { File::create(&log_path) }
            .with_context(|| format!("opening {}", log_path.display()))?;
    if !append {
        writeln!(log_file, "{LOG_HEADER}")?;
    }
    let mut write_err = None;
    let outcome = run_training(&net, &records, truths.as_ref(), &config, model, start_epoch, |row| {
        if write_err.is_none() {
            write_err = writeln!(log_file, "{}", row.csv_row()).and_then(|_| log_file.flush()).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }

    save_model(&outcome.best, &net, config.seed, outcome.best_epoch, &g.out.join("model.ckpt"))?;
    save_model(&outcome.last, &net, config.seed, outcome.last_epoch, &g.out.join("last.ckpt"))?;

    let best_val = outcome.log.iter().find(|r| r.epoch == outcome.best_epoch).map_or(outcome.baseline, |r| r.val);
    let summary = json!({
        "start_epoch": start_epoch,
        "start_val": outcome.baseline,
        "best_epoch": outcome.best_epoch,
        "best_val": best_val,
        "last_epoch": outcome.last_epoch,
    });
    std::fs::write(g.out.join("train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    let mut m = RunManifest::new("train", config.seed, config_json(&config));
    m.input("data", &a.data);
    if let Some(p) = &a.config {
        m.input("config", p);
    }
    if let Some(p) = &a.resume {
        m.input("resume", p);
    }
    m.outputs = ["model.ckpt", "model.json", "last.ckpt", "last.json", "train_log.csv", "train_summary.json"]
        .map(String::from)
        .to_vec();
    m.network_fingerprint = Some(fingerprint_hex(&net));
    m.write(&g.out)?;

    println!(
        "epochs {}..={}: validation MAPE {:.2}% -> {:.2}% (best epoch {})",
        start_epoch + 1,
        outcome.last_epoch,
        100.0 * outcome.baseline.mape,
        100.0 * best_val.mape,
        outcome.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}

fn oracle_required(dir: &Path, net: &RoadNetwork) -> Result<OracleField> {
    load_oracle(dir, net)?.ok_or_else(|| anyhow!("{} not found in {}", ORACLE_FILE, dir.display()))
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<ExitCode> {
    let config = load_config(a.config.as_deref(), &[])?;
    let net = load_net(&a.data)?;
    let (model, _) = load_model(&net, &a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let records = load_records(&a.data)?;
    let truths = load_truths(&a.data)?;
    let oracle = load_oracle(&a.data, &net)?;
    for r in &records {
        r.validate(net.num_edges(), model.config.slots)?;
    }
    let all: Vec<&ODRecord> = records.iter().collect();
    let mut val: Vec<&ODRecord> =
        all.iter().copied().filter(|r| !is_train_record(r.record_index, config.train_fraction)).collect();
    if val.is_empty() {
        val = all.clone();
    }

    let topo = Topology::new(&net)?;
    let mut snap = Snapshot::of_model(&model, &net, &topo, &all)?;
    if a.plant_oracle {
        let oracle = oracle.as_ref().ok_or_else(|| anyhow!("--plant-oracle needs {}", ORACLE_FILE))?;
        for (&(slot, ctx), f) in snap.fields.iter_mut() {
            *f = oracle.field(&net, slot, ctx);
        }
    }
    let search = config.search();
    let inferred = infer_all(&net, &snap, &val, &search)?;
    let (metrics, route_acc) = score(&net, &val, &inferred, truths.as_ref())?;

    let shortest_acc = match &truths {
        Some(gt) => {
            let mut accs = Vec::new();
            for r in &val {
                if let Some(t) = gt.get(&r.record_index) {
                    accs.push(route_accuracy(&net, t, shortest_route(&net, r.origin_edge, r.dest_edge)?.edges()));
                }
            }
            (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
        }
        None => None,
    };

    let coverage = match &truths {
        Some(gt) => candidate_coverage(&net, &snap.transition, &all, gt, &search)?,
        None => None,
    };

    let mut conditions = BTreeMap::new();
    let mut field_mape = None;
    let mut noise_floor = None;
    if let Some(oracle) = &oracle {
        let truth_fields: BTreeMap<(usize, Context), GaussianField> =
            snap.fields.keys().map(|&(s, c)| ((s, c), oracle.field(&net, s, c))).collect();
        for (key, f) in &snap.fields {
            conditions
                .entry(key.0)
                .or_insert(condition_agreement(&condition_map(f, &net), &condition_map(&truth_fields[key], &net))?);
        }
        if let Some(gt) = &truths {
            let (mut sum, mut n) = (0.0, 0usize);
            for (key, f) in &snap.fields {
                let mut counts = vec![0usize; net.num_edges()];
                for r in all.iter().filter(|r| (r.slot, r.context()) == *key) {
                    for &e in gt.get(&r.record_index).into_iter().flatten() {
                        counts[e] += 1;
                    }
                }
                let k = counts.iter().filter(|&&c| c >= 20).count();
                if let Some(m) = field_mape_frequent(&f.mu_e, &truth_fields[key].mu_e, &counts, 20) {
                    sum += m * k as f64;
                    n += k;
                }
            }
            field_mape = (n > 0).then(|| sum / n as f64);
        }
        let apes: Vec<f64> = val
            .par_iter()
            .map(|r| {
                let f = &truth_fields[&(r.slot, r.context())];
                od_route_choices(&net, f, r.origin_edge, r.dest_edge, &TripConfig::default())
                    .map(|c| replicate_ape(&c, r.observed_t))
            })
            .collect::<odtte::Result<_>>()?;
        noise_floor = Some(apes.iter().sum::<f64>() / apes.len() as f64);
    }

    let report = EvalReport {
        records: val.len(),
        rmse: metrics.rmse,
        mae: metrics.mae,
        mape: metrics.mape,
        route_accuracy: route_acc,
        shortest_route_accuracy: shortest_acc,
        candidate_coverage: coverage,
        condition_agreement: conditions,
        field_mape_frequent: field_mape,
        noise_floor_mape: noise_floor,
    };
    create_out(&g.out)?;
    std::fs::write(g.out.join("eval.json"), report.to_json() + "\n")?;
    std::fs::write(g.out.join("eval.txt"), report.to_text())?;
    print!("{}", report.to_text());

    let mut cfg = config_json(&config);
    cfg["plant_oracle"] = json!(a.plant_oracle);
    let mut m = RunManifest::new("eval", config.seed, cfg);
    m.input("data", &a.data);
    m.input("checkpoint", &a.checkpoint);
    m.outputs = vec!["eval.json".into(), "eval.txt".into()];
    m.network_fingerprint = Some(fingerprint_hex(&net));
    m.write(&g.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn infer(g: &Global, a: &InferArgs) -> Result<ExitCode> {
    let config = load_config(a.config.as_deref(), &[])?;
    let net = load_net(&a.data)?;
    let (model, _) = load_model(&net, &a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let records = match (&a.od, a.origin, a.dest) {
        (Some(p), _, _) => read_od_csv(p)?,
        (None, Some(origin_edge), Some(dest_edge)) => vec![ODRecord {
            record_index: 0,
            origin_edge,
            dest_edge,
            slot: a.slot,
            weather: a.weather,
            holiday: a.holiday,
            observed_t: 1.0,
        }],
        _ => bail!("give either --od FILE or --origin and --dest"),
    };
    for r in &records {
        ODRecord { observed_t: 1.0, ..r.clone() }.validate(net.num_edges(), model.config.slots)?;
    }
    let refs: Vec<&ODRecord> = records.iter().collect();
    let topo = Topology::new(&net)?;
    let snap = Snapshot::of_model(&model, &net, &topo, &refs)?;
    let inferred = infer_all(&net, &snap, &refs, &config.search())?;

    create_out(&g.out)?;
    let path = g.out.join("inferred.csv");
    let mut w = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(w, "record_index,predicted_T,log_prob,fallback,edges")?;
    for (r, inf) in records.iter().zip(&inferred) {
        writeln!(
            w,
            "{},{:.6},{:.9},{},{}",
            r.record_index,
            inf.predicted_t,
            inf.log_prob,
            inf.fallback,
            inf.route.to_pipe_list()
        )?;
    }
    if let [single] = inferred.as_slice() {
        let breakdown: Vec<_> = single
            .breakdown
            .iter()
            .map(|&(is_edge, id, mu)| json!({"kind": if is_edge { "segment" } else { "intersection" }, "id": id, "mean_secs": mu}))
            .collect();
        let out = json!({
            "predicted_T": single.predicted_t,
            "route": single.route.edges(),
            "log_prob": single.log_prob,
            "fallback": single.fallback,
            "breakdown": breakdown,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("wrote {} predictions to {}", inferred.len(), path.display());
    }

    let mut m = RunManifest::new("infer", config.seed, config_json(&config));
    m.input("data", &a.data);
    m.input("checkpoint", &a.checkpoint);
    if let Some(p) = &a.od {
        m.input("od", p);
    } else {
        m.config["od"] =
            json!({"origin": a.origin, "dest": a.dest, "slot": a.slot, "weather": a.weather, "holiday": a.holiday});
    }
    m.outputs = vec!["inferred.csv".into()];
    m.network_fingerprint = Some(fingerprint_hex(&net));
    m.write(&g.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn export_conditions(g: &Global, a: &ExportArgs) -> Result<ExitCode> {
    let net = load_net(&a.data)?;
    let ctx = Context { weather: a.weather, holiday: a.holiday };
    let model = match &a.checkpoint {
        Some(p) => Some(load_model(&net, p).with_context(|| format!("loading {}", p.display()))?.0),
        None => None,
    };
    let oracle = match &model {
        Some(_) => None,
        None => Some(oracle_required(&a.data, &net)?),
    };
    let total = model.as_ref().map_or_else(|| oracle.as_ref().unwrap().slots(), |m| m.config.slots);
    let slots = match &a.slots {
        Some(list) => parse_slots(list, total)?,
        None => (0..total).collect(),
    };
    if a.weather >= NUM_WEATHER || a.holiday >= NUM_HOLIDAY {
        bail!("context codes out of range (weather < {NUM_WEATHER}, holiday < {NUM_HOLIDAY})");
    }

    let topo = Topology::new(&net)?;
    let mut maps = Vec::new();
    let fields: HashMap<usize, GaussianField> = match &model {
        Some(m) => {
            let keys: Vec<(usize, Context)> = slots.iter().map(|&s| (s, ctx)).collect();
            slots.iter().copied().zip(m.snapshot(&net, &topo, &keys)?.0).collect()
        }
        None => slots.iter().map(|&s| (s, oracle.as_ref().unwrap().field(&net, s, ctx))).collect(),
    };
    for &s in &slots {
        maps.push((s, condition_map(&fields[&s], &net)));
    }
    create_out(&g.out)?;
    write_conditions_csv(g.out.join("conditions.csv"), &maps)?;
    println!("wrote conditions for {} slots to {}", slots.len(), g.out.join("conditions.csv").display());

    let config = json!({"slots": slots, "weather": a.weather, "holiday": a.holiday, "source": if model.is_some() { "model" } else { "oracle" }});
    let mut m = RunManifest::new("export-conditions", g.seed.unwrap_or(0), config);
    m.input("data", &a.data);
    if let Some(p) = &a.checkpoint {
        m.input("checkpoint", p);
    }
    m.outputs = vec!["conditions.csv".into()];
    m.network_fingerprint = Some(fingerprint_hex(&net));
    m.write(&g.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn verify(_g: &Global, a: &VerifyArgs) -> Result<ExitCode> {
    if a.inject_tanh_fault {
        odtte::autodiff::set_tanh_backward_fault(true);
    }
    let results = verify::run(a.level);
    odtte::autodiff::set_tanh_backward_fault(false);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
