//! Parameter storage, tape leasing, and checkpoint serialization.

use super::tape::{NodeId, Tape};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Named dense parameters plus non-trainable buffers (batch-norm running
/// statistics). Insertion order is preserved so serialization is
/// byte-stable.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: IndexMap<String, Array2<f64>>,
    pub stats: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn insert_stat(&mut self, name: &str, value: Array2<f64>) {
        self.stats.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// PyTorch-style uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_linear(&mut self, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (din.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((din, dout), |_| rng.gen_range(-bound..bound));
        let b = Array2::from_shape_fn((1, dout), |_| rng.gen_range(-bound..bound));
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), b);
    }

    pub fn init_batch_norm(&mut self, name: &str, dim: usize) {
        self.insert(&format!("{name}.gamma"), Array2::ones((1, dim)));
        self.insert(&format!("{name}.beta"), Array2::zeros((1, dim)));
        self.insert_stat(&format!("{name}.mean"), Array2::zeros((1, dim)));
        self.insert_stat(&format!("{name}.var"), Array2::ones((1, dim)));
    }

    /// Names of parameters under a dotted prefix.
    pub fn names_under(&self, prefix: &str) -> Vec<String> {
        let p = format!("{prefix}.");
        self.params
            .keys()
            .filter(|k| k.starts_with(&p) || *k == prefix)
            .cloned()
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize, Default)]
pub struct Checkpoint {
    params: IndexMap<String, TensorRecord>,
    stats: IndexMap<String, TensorRecord>,
    #[serde(default)]
    pub extra: IndexMap<String, serde_json::Value>,
}

fn to_record(a: &Array2<f64>) -> TensorRecord {
    TensorRecord { shape: [a.nrows(), a.ncols()], data: a.iter().copied().collect() }
}

fn from_record(r: &TensorRecord) -> Result<Array2<f64>, ParamError> {
    Array2::from_shape_vec((r.shape[0], r.shape[1]), r.data.clone())
        .map_err(|e| ParamError::Malformed(e.to_string()))
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            params: store.params.iter().map(|(k, v)| (k.clone(), to_record(v))).collect(),
            stats: store.stats.iter().map(|(k, v)| (k.clone(), to_record(v))).collect(),
            extra: IndexMap::new(),
        }
    }

    pub fn into_store(&self) -> Result<ParamStore, ParamError> {
        let mut store = ParamStore::new();
        for (k, v) in &self.params {
            store.params.insert(k.clone(), from_record(v)?);
        }
        for (k, v) in &self.stats {
            store.stats.insert(k.clone(), from_record(v)?);
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<(), ParamError> {
        serde_json::to_writer(out, self).map_err(|e| ParamError::Malformed(e.to_string()))
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, ParamError> {
        serde_json::from_reader(input).map_err(|e| ParamError::Malformed(e.to_string()))
    }
}

/// A forward-pass context: the tape plus a read-only parameter snapshot.
/// Parameters enter the tape lazily as leaves, once per name, so every use
/// shares one node and gradients accumulate. In train mode batch-norm
/// layers use batch statistics and report them through `bn_observations`;
/// in eval mode they read the stored running statistics.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    /// Optional second store (e.g. discriminator parameters while the
    /// primary holds the generator); looked up after the primary.
    pub aux: Option<&'a ParamStore>,
    pub train: bool,
    leased: RefCell<IndexMap<String, NodeId>>,
    bn_obs: RefCell<Vec<(String, Array2<f64>, Array2<f64>)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            aux: None,
            train,
            leased: RefCell::new(IndexMap::new()),
            bn_obs: RefCell::new(Vec::new()),
        }
    }

    pub fn with_aux(store: &'a ParamStore, aux: &'a ParamStore, train: bool) -> Self {
        let mut ctx = Ctx::new(store, train);
        ctx.aux = Some(aux);
        ctx
    }

    fn lookup_param(&self, name: &str) -> &Array2<f64> {
        self.store
            .params
            .get(name)
            .or_else(|| self.aux.and_then(|a| a.params.get(name)))
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Tape node for a named parameter (leased once per context).
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leased.borrow().get(name) {
            return id;
        }
        let value = self.lookup_param(name).clone();
        let id = self.tape.leaf(value);
        self.leased.borrow_mut().insert(name.to_string(), id);
        id
    }

    pub fn stat(&self, name: &str) -> Array2<f64> {
        self.store
            .stats
            .get(name)
            .or_else(|| self.aux.and_then(|a| a.stats.get(name)))
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
            .clone()
    }

    pub fn record_bn(&self, name: &str, mean: Array2<f64>, var: Array2<f64>) {
        self.bn_obs.borrow_mut().push((name.to_string(), mean, var));
    }

    pub fn take_bn_observations(&mut self) -> Vec<(String, Array2<f64>, Array2<f64>)> {
        std::mem::take(&mut self.bn_obs.borrow_mut())
    }

    /// (name, node) pairs for all leased parameters.
    pub fn leased_params(&self) -> Vec<(String, NodeId)> {
        self.leased.borrow().iter().map(|(k, &v)| (k.clone(), v)).collect()
    }

    /// Extract the value of every leased parameter's gradient from a
    /// backward pass, keyed by parameter name.
    pub fn param_grads(&self, grads: &super::tape::Grads) -> IndexMap<String, Array2<f64>> {
        let mut out = IndexMap::new();
        for (name, id) in self.leased.borrow().iter() {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), self.tape.value(g).clone());
            }
        }
        out
    }
}

/// Apply momentum updates to running batch-norm statistics from the
/// observations a context collected. Observations for the same layer are
/// averaged first so the update is independent of batch iteration order.
pub fn apply_bn_updates(
    store: &mut ParamStore,
    observations: Vec<(String, Array2<f64>, Array2<f64>)>,
    momentum: f64,
) {
    let mut grouped: IndexMap<String, (Array2<f64>, Array2<f64>, usize)> = IndexMap::new();
    for (name, mean, var) in observations {
        match grouped.get_mut(&name) {
            Some((m, v, c)) => {
                *m += &mean;
                *v += &var;
                *c += 1;
            }
            None => {
                grouped.insert(name, (mean, var, 1));
            }
        }
    }
    for (name, (m_sum, v_sum, count)) in grouped {
        let m = m_sum / count as f64;
        let v = v_sum / count as f64;
        let mean_key = format!("{name}.mean");
        let var_key = format!("{name}.var");
        if let Some(rm) = store.stats.get_mut(&mean_key) {
            *rm = &*rm * (1.0 - momentum) + &m * momentum;
        }
        if let Some(rv) = store.stats.get_mut(&var_key) {
            *rv = &*rv * (1.0 - momentum) + &v * momentum;
        }
    }
}
