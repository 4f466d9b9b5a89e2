use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Named parameters with their gradients and Adam moment estimates.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let zeros = Matrix::zeros(value.dim());
        self.params.push(Param { name: name.clone(), grad: zeros.clone(), m: zeros.clone(), v: zeros, value });
        self.by_name.insert(name, id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.params[id.0].grad += g;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Bias-corrected Adam update. Gradients are left in place.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(&mut p.m).and(&mut p.v).for_each(|w, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    step: u64,
    tensors: Vec<TensorEntry>,
}

const MOMENT_M: &str = "@adam_m";
const MOMENT_V: &str = "@adam_v";

/// Writes `store` (values plus Adam state) as: little-endian u64 index
/// length, JSON index, then little-endian f64 payloads at the listed byte
/// offsets relative to the payload start.
pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, m: &Matrix| {
        tensors.push(TensorEntry { name, shape: [m.nrows(), m.ncols()], offset: payload.len() as u64 });
        for x in m.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    };
    for p in &store.params {
        push(p.name.clone(), &p.value);
        push(format!("{}{MOMENT_M}", p.name), &p.m);
        push(format!("{}{MOMENT_V}", p.name), &p.v);
    }
    let index = serde_json::to_vec(&CheckpointIndex { step: store.step, tensors })
        .map_err(|e| Error::Parse(format!("checkpoint index: {e}")))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |f: &mut std::fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&mut file, &(index.len() as u64).to_le_bytes())?;
    write(&mut file, &index)?;
    write(&mut file, &payload)
}

/// Loads a checkpoint into a store with the same parameter names and
/// shapes (as built by the model constructor).
pub fn load_checkpoint(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse(format!("checkpoint {}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let index_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let index_end =
        8usize.checked_add(index_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated index".into()))?;
    let index: CheckpointIndex =
        serde_json::from_slice(&bytes[8..index_end]).map_err(|e| bad(format!("index: {e}")))?;
    let payload = &bytes[index_end..];
    let mut found: BTreeMap<&str, Matrix> = BTreeMap::new();
    for t in &index.tensors {
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(bad(format!("tensor {} runs past end of payload", t.name)));
        }
        let data: Vec<f64> =
            payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        found.insert(&t.name, Matrix::from_shape_vec((t.shape[0], t.shape[1]), data).unwrap());
    }
    for p in &mut store.params {
        for (suffix, slot) in [("", &mut p.value), (MOMENT_M, &mut p.m), (MOMENT_V, &mut p.v)] {
            let key = format!("{}{suffix}", p.name);
            let m = found.remove(key.as_str()).ok_or_else(|| bad(format!("missing tensor {key}")))?;
            if m.dim() != slot.dim() {
                return Err(bad(format!("tensor {key}: shape {:?}, expected {:?}", m.dim(), slot.dim())));
            }
            *slot = m;
        }
        p.grad.fill(0.0);
    }
    if let Some(extra) = found.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    store.step = index.step;
    Ok(())
}
