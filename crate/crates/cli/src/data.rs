use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use odtte::dataset::{read_od_csv, read_routes_csv, ODRecord};
use odtte::roadnet::{load_network, EdgeId, RoadNetwork};
use odtte::simulator::OracleField;
use odtte::training::TrainingConfig;

use crate::manifest::RunManifest;

pub const NETWORK_FILE: &str = "network.json";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const ROUTES_FILE: &str = "gt_routes.csv";

pub fn od_file_name(slot: usize) -> String {
    format!("od_train_s{slot}.csv")
}

pub fn load_net(dir: &Path) -> Result<RoadNetwork> {
    let path = dir.join(NETWORK_FILE);
    load_network(&path).with_context(|| format!("loading {}", path.display()))
}

/// OD files of a data directory, ordered by slot.
pub fn od_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(slot) = name.strip_prefix("od_train_s").and_then(|r| r.strip_suffix(".csv")) {
            if let Ok(slot) = slot.parse::<usize>() {
                files.push((slot, path));
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Every OD record of a data directory, ordered by record index.
pub fn load_records(dir: &Path) -> Result<Vec<ODRecord>> {
    let files = od_files(dir)?;
    if files.is_empty() {
        bail!("no od_train_s*.csv files in {}", dir.display());
    }
    let mut records = Vec::new();
    for (_, path) in files {
        records.extend(read_od_csv(&path).with_context(|| format!("loading {}", path.display()))?);
    }
    records.sort_by_key(|r| r.record_index);
    if let Some(w) = records.windows(2).find(|w| w[0].record_index == w[1].record_index) {
        bail!("record index {} appears more than once", w[0].record_index);
    }
    Ok(records)
}

pub fn load_truths(dir: &Path) -> Result<Option<HashMap<usize, Vec<EdgeId>>>> {
    let path = dir.join(ROUTES_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let routes = read_routes_csv(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Some(routes.into_iter().map(|t| (t.record_index, t.edges)).collect()))
}

pub fn load_oracle(dir: &Path, network: &RoadNetwork) -> Result<Option<OracleField>> {
    let path = dir.join(ORACLE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    OracleField::read_csv(&path, network).map(Some).with_context(|| format!("loading {}", path.display()))
}

/// Slot count of a data directory: from the `gen` manifest when present,
/// otherwise one past the largest slot in the records.
pub fn slot_count(dir: &Path, records: &[ODRecord]) -> Result<usize> {
    let path = dir.join(RunManifest::file_name("gen"));
    if path.exists() {
        let m = RunManifest::read(&path)?;
        if let Some(s) = m.config.get("slots").and_then(|v| v.as_u64()) {
            return Ok(s as usize);
        }
    }
    Ok(records.iter().map(|r| r.slot + 1).max().unwrap_or(1))
}

/// Config from an optional file plus `key=value` overrides; all problems
/// are reported together.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainingConfig> {
    let mut text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    for o in overrides {
        if !o.contains('=') {
            bail!("override {o:?} is not key=value");
        }
        text.push('\n');
        text.push_str(o);
    }
    TrainingConfig::from_kv(&text).map_err(|e| anyhow::anyhow!("invalid training config: {e}"))
}

pub fn config_json(config: &TrainingConfig) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = config
        .to_kv()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), serde_json::Value::String(v.trim().to_string())))
        .collect();
    serde_json::Value::Object(map)
}

/// Parses `1,2,5`, or `peak` for the peak-hour slots.
pub fn parse_slots(list: &str, slots: usize) -> Result<Vec<usize>> {
    if list.trim() == "peak" {
        return Ok(odtte::simulator::peak_slots(slots));
    }
    let mut out = Vec::new();
    for part in list.split(',') {
        let s: usize = part.trim().parse().with_context(|| format!("bad slot {part:?}"))?;
        if s >= slots {
            bail!("slot {s} out of range (slots = {slots})");
        }
        out.push(s);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
