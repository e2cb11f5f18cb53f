//! Named parameter storage, gradient buffers, Adam state and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

static NEXT_GROUP_UID: AtomicU64 = AtomicU64::new(1);

/// Identifies one tensor inside one [`ParameterGroup`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub(crate) group: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    /// Buffers such as BatchNorm running statistics are stored here too but
    /// are never touched by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// A running-statistics update produced by a training-mode BatchNorm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamKey,
    pub running_var: ParamKey,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
    pub momentum: f64,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.by_param.get(&key)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Debug)]
pub struct ParameterGroup {
    uid: u64,
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl Clone for ParameterGroup {
    /// Clones keep the same uid so that tapes recorded against either copy
    /// address the same parameters.
    fn clone(&self) -> Self {
        Self {
            uid: self.uid,
            entries: self.entries.clone(),
            index: self.index.clone(),
            step: self.step,
        }
    }
}

impl Default for ParameterGroup {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterGroup {
    pub fn new() -> Self {
        Self {
            uid: NEXT_GROUP_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamKey {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            grad: Tensor::zeros_like(&value),
            m: Tensor::zeros_like(&value),
            v: Tensor::zeros_like(&value),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), idx);
        ParamKey { group: self.uid, index: idx }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamKey {
        self.insert(name, value, true)
    }

    /// Registers a non-trainable buffer (kept in checkpoints, skipped by Adam).
    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamKey {
        self.insert(name, value, false)
    }

    /// Uniform `[-bound, bound]` initialisation.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamKey {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_parts(rows, cols, data))
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.index.get(name).map(|&index| ParamKey { group: self.uid, index })
    }

    fn check(&self, key: ParamKey) -> usize {
        assert_eq!(key.group, self.uid, "parameter key from another group");
        key.index
    }

    pub fn value(&self, key: ParamKey) -> &Tensor {
        &self.entries[self.check(key)].value
    }

    pub fn value_mut(&mut self, key: ParamKey) -> &mut Tensor {
        let i = self.check(key);
        &mut self.entries[i].value
    }

    pub fn grad(&self, key: ParamKey) -> &Tensor {
        &self.entries[self.check(key)].grad
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        (0..self.entries.len()).map(|index| ParamKey { group: self.uid, index })
    }

    pub fn trainable_keys(&self) -> Vec<ParamKey> {
        self.keys().filter(|k| self.entries[k.index].trainable).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds every gradient addressed to this group into its buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (key, g) in &grads.by_param {
            if key.group == self.uid {
                self.entries[key.index].grad.add_assign(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            if u.running_mean.group != self.uid {
                continue;
            }
            let mom = u.momentum;
            let rm = self.value_mut(u.running_mean).data_mut();
            for (r, b) in rm.iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            let rv = self.value_mut(u.running_var).data_mut();
            for (r, b) in rv.iter_mut().zip(&u.batch_var_unbiased) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
    }

    /// One bias-corrected Adam step over every trainable tensor.
    pub fn adam_update(&mut self, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let (value, grad, m, v) = (e.value.data_mut(), e.grad.data(), e.m.data_mut(), e.v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies values (not optimizer state) from a snapshot with identical layout.
    pub fn load_values_from(&mut self, other: &ParameterGroup) -> Result<(), NnError> {
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(NnError::Checkpoint(format!("layout mismatch at {}", mine.name)));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    pub fn to_record(&self) -> GroupRecord {
        GroupRecord {
            step: self.step,
            tensors: self
                .entries
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    values: e.value.data().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Overwrites values from a record; every stored tensor must exist here
    /// with the same shape.
    pub fn load_record(&mut self, record: &GroupRecord) -> Result<(), NnError> {
        if record.tensors.len() != self.entries.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                self.entries.len(),
                record.tensors.len()
            )));
        }
        for t in &record.tensors {
            let idx = *self
                .index
                .get(&t.name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {}", t.name)))?;
            let value = Tensor::new(t.shape.clone(), t.values.clone())?;
            if value.shape() != self.entries[idx].value.shape() {
                return Err(NnError::Checkpoint(format!("shape mismatch for {}", t.name)));
            }
            self.entries[idx].value = value;
        }
        self.step = record.step;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
}

pub const CHECKPOINT_FORMAT: &str = "factorlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON weight container: group name -> shapes and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub groups: BTreeMap<String, GroupRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            groups: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: &ParameterGroup) {
        self.groups.insert(name.to_string(), group.to_record());
    }

    pub fn restore(&self, name: &str, group: &mut ParameterGroup) -> Result<(), NnError> {
        let rec = self
            .groups
            .get(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing group {name}")))?;
        group.load_record(rec)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
