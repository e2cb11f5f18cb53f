//! Mini-batch training with a plateau learning-rate schedule and early
//! stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::factor_gnn::{FactorGnn, GnnConfig, GraphBatch};
use crate::factor_graph::Family;
use crate::tensor_nn::{AdamConfig, Mode, NnError, Tape, Tensor, Var};

use super::dataset::{split_dataset, Record};
use super::TrainError;

/// Mixed into the seed so the split and the weight initialisation draw
/// from different streams.
const SPLIT_STREAM: u64 = 0x5eed_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Validation improvements smaller than this do not count.
    pub min_delta: f64,
    pub max_epochs: usize,
    /// Training-to-validation split ratio.
    pub split: [usize; 2],
    /// Rescales each batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            lr: 1e-3,
            plateau_factor: 0.2,
            plateau_patience: 20,
            early_stop_patience: 40,
            min_delta: 1e-6,
            max_epochs: 1000,
            split: [4, 1],
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.max_epochs == 0 || !(self.lr > 0.0) {
            return Err(TrainError::Invalid("batch size, epochs and learning rate must be positive".into()));
        }
        if self.early_stop_patience <= self.plateau_patience {
            return Err(TrainError::Invalid(format!(
                "early-stop patience {} must exceed plateau patience {}",
                self.early_stop_patience, self.plateau_patience
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.split[0] == 0 || self.split[1] == 0 {
            return Err(TrainError::Invalid("plateau factor must lie in (0, 1) and split parts be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Invalid("gradient clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Model and training settings read from a config file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: GnnConfig,
    pub train: TrainConfig,
}

/// Learning-rate and stopping decisions driven by validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    factor: f64,
    plateau_patience: usize,
    early_stop_patience: usize,
    min_delta: f64,
    since_best: usize,
    since_cut: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub lr_cut: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            best: f64::INFINITY,
            factor: cfg.plateau_factor,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
            min_delta: cfg.min_delta,
            since_best: 0,
            since_cut: 0,
        }
    }

    /// Records one epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64) -> ScheduleStep {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.since_best = 0;
            self.since_cut = 0;
            return ScheduleStep { improved: true, lr_cut: false, stop: false };
        }
        self.since_best += 1;
        self.since_cut += 1;
        let lr_cut = self.since_cut >= self.plateau_patience;
        if lr_cut {
            self.lr *= self.factor;
            self.since_cut = 0;
        }
        ScheduleStep { improved: false, lr_cut, stop: self.since_best >= self.early_stop_patience }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: FactorGnn,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Per-dimension mean and standard deviation of the training targets.
pub fn target_scaling(records: &[Record]) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let mut rows = Vec::new();
    for r in records {
        rows.extend(r.checked_targets()?.rows());
    }
    let width = rows.first().map_or(0, Vec::len);
    let count = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..width).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / count).collect();
    let std = (0..width)
        .map(|c| {
            let s = (rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / count).sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, std))
}

/// Training targets in the decoder's output space, stacked in batch order.
fn batch_targets(model: &FactorGnn, records: &[&Record]) -> Result<Tensor, TrainError> {
    let width = model.config().output_width();
    let (mean, std) = model.target_scaling();
    let mut data = Vec::new();
    for r in records {
        for row in r.checked_targets()?.rows() {
            if model.family() == Family::Continuous {
                data.extend(row.iter().enumerate().map(|(c, x)| (x - mean[c]) / std[c]));
            } else {
                data.extend(row);
            }
        }
    }
    let rows = data.len() / width;
    Ok(Tensor::matrix(rows, width, data)?)
}

fn loss_on(tape: &mut Tape, family: Family, raw: Var, target: Tensor) -> Result<Var, NnError> {
    match family {
        Family::Spin => tape.bce_with_logits(raw, target),
        Family::Gaussian | Family::Continuous => tape.mse(raw, target),
    }
}

/// Loss of one batch; returns the tape so gradients can be taken.
fn batch_loss(
    model: &FactorGnn,
    records: &[&Record],
    n_rounds: usize,
    mode: Mode,
) -> Result<(Tape, Var), TrainError> {
    let graphs: Vec<_> = records.iter().map(|r| &r.graph).collect();
    let batch = GraphBatch::new(&graphs)?;
    let target = batch_targets(model, records)?;
    let mut tape = Tape::new();
    let raw = model.forward_raw(&mut tape, model.group(), &batch, n_rounds, mode)?;
    let loss = loss_on(&mut tape, model.family(), raw, target)?;
    Ok((tape, loss))
}

/// Finds the graphs in a batch that produce a non-finite loss on their own.
fn offending_graphs(model: &FactorGnn, records: &[&Record], n_rounds: usize) -> Vec<usize> {
    let bad: Vec<usize> = records
        .iter()
        .filter(|r| match batch_loss(model, &[r], n_rounds, Mode::Eval) {
            Ok((tape, loss)) => !tape.value(loss).item().is_finite() || tape.first_non_finite().is_some(),
            Err(_) => true,
        })
        .map(|r| r.id)
        .collect();
    if bad.is_empty() {
        records.iter().map(|r| r.id).collect()
    } else {
        bad
    }
}

/// Mean per-variable validation loss in eval mode.
pub fn validation_loss(model: &FactorGnn, records: &[Record], batch_size: usize) -> Result<f64, TrainError> {
    let (mut total, mut count) = (0.0, 0usize);
    let refs: Vec<&Record> = records.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (tape, loss) = batch_loss(model, chunk, model.config().eval_rounds(), Mode::Eval)?;
        let vars: usize = chunk.iter().map(|r| r.graph.n_variables()).sum();
        total += tape.value(loss).item() * vars as f64;
        count += vars;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Trains a fresh model. `progress` is called after every epoch.
pub fn train(
    model_cfg: GnnConfig,
    cfg: &TrainConfig,
    train_set: &[Record],
    val_set: &[Record],
    seed: u64,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Invalid("training and validation sets must be non-empty".into()));
    }
    for r in train_set.iter().chain(val_set) {
        if r.graph.family() != model_cfg.family {
            return Err(TrainError::Invalid(format!(
                "graph {} is {}, model expects {}",
                r.id,
                r.graph.family(),
                model_cfg.family
            )));
        }
        r.checked_targets()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FactorGnn::new(model_cfg, &mut rng)?;
    if model.family() == Family::Continuous {
        let (mean, std) = target_scaling(train_set)?;
        model.set_target_scaling(&mean, &std)?;
    }
    let adam = AdamConfig::default();
    let mut schedule = Schedule::new(cfg);
    let mut best = model.group().clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<&Record> = train_set.iter().collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut vars) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let n_rounds = model.sample_rounds(&mut rng);
            let (tape, loss) = batch_loss(&model, chunk, n_rounds, Mode::Train)?;
            let value = tape.value(loss).item();
            let grads = match tape.backward(loss) {
                Ok(g) if value.is_finite() => g,
                _ => {
                    return Err(TrainError::NonFinite { epoch, graph_ids: offending_graphs(&model, chunk, n_rounds) })
                }
            };
            let group = model.group_mut();
            group.zero_grad();
            group.accumulate(&grads);
            if let Some(max_norm) = cfg.grad_clip {
                let norm = group.grad_norm();
                if norm > max_norm {
                    group.scale_grads(max_norm / norm);
                }
            }
            group.apply_stat_updates(tape.stat_updates());
            group.adam_update(schedule.lr, &adam);
            let n: usize = chunk.iter().map(|r| r.graph.n_variables()).sum();
            total += value * n as f64;
            vars += n;
        }
        let val_loss = validation_loss(&model, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            let refs: Vec<&Record> = val_set.iter().collect();
            return Err(TrainError::NonFinite {
                epoch,
                graph_ids: offending_graphs(&model, &refs, model.config().eval_rounds()),
            });
        }
        let log = EpochLog { epoch, train_loss: total / vars as f64, val_loss, lr: schedule.lr };
        progress(&log);
        history.push(log);
        let step = schedule.observe(val_loss);
        if step.improved {
            best = model.group().clone();
            best_epoch = epoch;
        }
        if step.stop {
            break;
        }
    }
    model.group_mut().load_values_from(&best)?;
    Ok(TrainOutcome { model, history, best_epoch, best_val_loss: schedule.best })
}

/// Splits `data` by the configured ratio and trains on it.
pub fn train_with_split(
    model_cfg: GnnConfig,
    cfg: &TrainConfig,
    data: &[Record],
    seed: u64,
    progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    let (tr, va) = split_dataset(data, cfg.split[0], cfg.split[1], &mut rng);
    train(model_cfg, cfg, &tr, &va, seed, progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_gnn::GnnMode;
    use crate::train_eval::dataset::{generate, DatasetKind, SizeRange};

    fn tiny_model(family: Family) -> GnnConfig {
        GnnConfig {
            family,
            hidden_dim: 8,
            heads: 2,
            message_hidden: 8,
            attention_hidden: 4,
            encoder_hidden: vec![8],
            decoder_hidden: vec![8],
            readout_range: [3, 5],
            test_readout: 4,
            mode: GnnMode::Recurrent,
            stacked_layers: 3,
        }
    }

    #[test]
    fn plateau_cuts_lr_and_early_stop_fires() {
        let cfg = TrainConfig::default();
        let mut s = Schedule::new(&cfg);
        assert!(s.observe(1.0).improved);
        for epoch in 1..=19 {
            let st = s.observe(1.0);
            assert!(!st.lr_cut && !st.stop, "epoch {epoch}");
        }
        let st = s.observe(1.0 - 5e-7);
        assert!(st.lr_cut && !st.stop);
        assert!((s.lr - 0.0002).abs() < 1e-18);
        for _ in 0..19 {
            assert!(!s.observe(1.0).stop);
        }
        let st = s.observe(1.0);
        assert!(st.stop && st.lr_cut);
        assert!((s.lr - 0.00004).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { early_stop_patience: 20, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn few_epochs_on_trees_reduce_training_loss() {
        let data = generate(DatasetKind::GgmTree, SizeRange::fixed(10), 200, 3).unwrap();
        let cfg = TrainConfig { batch_size: 20, max_epochs: 4, lr: 3e-3, ..TrainConfig::default() };
        let (tr, va) = data.split_at(160);
        let init = {
            let model = FactorGnn::new(tiny_model(Family::Gaussian), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            validation_loss(&model, tr, 50).unwrap()
        };
        let out = train(tiny_model(Family::Gaussian), &cfg, tr, va, 5, |_| {}).unwrap();
        assert_eq!(out.history.len(), 4);
        let after = validation_loss(&out.model, tr, 50).unwrap();
        assert!(after < init, "{after} vs {init}");
        assert!(out.history.last().unwrap().train_loss < out.history[0].train_loss);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = generate(DatasetKind::Spin, SizeRange::fixed(5), 20, 1).unwrap();
        let cfg = TrainConfig { batch_size: 8, max_epochs: 2, ..TrainConfig::default() };
        let a = train_with_split(tiny_model(Family::Spin), &cfg, &data, 2, |_| {}).unwrap();
        let b = train_with_split(tiny_model(Family::Spin), &cfg, &data, 2, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.group().to_record(), b.model.group().to_record());
    }

    #[test]
    fn non_finite_targets_name_the_graph() {
        let mut data = generate(DatasetKind::Ggm, SizeRange::fixed(5), 6, 1).unwrap();
        if let Some(crate::train_eval::Targets::MarginalPrecisions(v)) = data[2].targets.as_mut() {
            v[0] = f64::INFINITY;
        }
        let cfg = TrainConfig { batch_size: 6, max_epochs: 1, ..TrainConfig::default() };
        let err = train(tiny_model(Family::Gaussian), &cfg, &data, &data[..1], 0, |_| {}).unwrap_err();
        match err {
            TrainError::NonFinite { graph_ids, .. } => assert_eq!(graph_ids, vec![2]),
            other => panic!("{other}"),
        }
    }
}
