//! Token-level train/validation split, Adam training with early stopping,
//! evaluation and learning-curve records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Gradients, Mode, Model, NetworkError, Params};
use crate::seed::{rng_for, PipelineRng};

pub const DEFAULT_PATIENCE: usize = 10;
pub const DEFAULT_MIN_DELTA: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("class `{class}` has {tokens} token(s); at least 2 are needed to appear in both splits")]
    Split { class: String, tokens: usize },
    #[error("token `{token}` carries more than one label")]
    InconsistentToken { token: String },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label space mismatch: {0}")]
    LabelSpace(String),
    #[error(transparent)]
    Network(NetworkError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl From<NetworkError> for TrainError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Label { label, head } => {
                TrainError::LabelSpace(format!("label {label} but the model head has {head} classes"))
            }
            other => TrainError::Network(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Word identity.
    Dorsal,
    /// Semantic domain.
    Ventral,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Dorsal, Task::Ventral];

    pub fn name(self) -> &'static str {
        match self {
            Task::Dorsal => "dorsal",
            Task::Ventral => "ventral",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected dorsal or ventral)"))
    }
}

/// One training example: a cochleagram and its class.
#[derive(Debug, Clone)]
pub struct Example {
    pub x: Arc<Array2<f32>>,
    pub label: usize,
    pub token_id: String,
}

pub trait Labeled {
    fn token_id(&self) -> &str;
    fn label(&self) -> usize;
}

impl Labeled for Example {
    fn token_id(&self) -> &str {
        &self.token_id
    }
    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Fraction of each class's tokens assigned to training.
    pub split_fraction: f64,
    pub seed: u64,
    pub class_balanced: bool,
    /// Stop as soon as the epoch's training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn new(task: Task) -> TrainConfig {
        TrainConfig {
            task,
            batch_size: 64,
            learning_rate: 1e-4,
            max_epochs: 100,
            patience: DEFAULT_PATIENCE,
            min_delta: DEFAULT_MIN_DELTA,
            split_fraction: 0.9,
            seed: 0,
            class_balanced: false,
            stop_at_train_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction must be in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }

    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            stop_at_train_accuracy: self.stop_at_train_accuracy,
        }
    }
}

/// Split by token so all clips of a token land on the same side. Every class
/// keeps at least one token on each side.
pub fn split_dataset<T: Labeled + Clone>(
    items: &[T],
    class_names: &[String],
    split_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(TrainError::Config("split_fraction must be in (0, 1)".into()));
    }
    let mut token_label: BTreeMap<&str, usize> = BTreeMap::new();
    for it in items {
        let prev = token_label.insert(it.token_id(), it.label());
        if prev.is_some_and(|p| p != it.label()) {
            return Err(TrainError::InconsistentToken {
                token: it.token_id().to_string(),
            });
        }
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (tok, label) in &token_label {
        by_class.entry(*label).or_default().push(tok);
    }
    let name = |l: usize| class_names.get(l).cloned().unwrap_or_else(|| format!("class {l}"));
    let mut train_tokens = std::collections::HashSet::new();
    for (label, mut tokens) in by_class {
        if tokens.len() < 2 {
            return Err(TrainError::Split {
                class: name(label),
                tokens: tokens.len(),
            });
        }
        let mut rng = rng_for(seed, &["split", &label.to_string()]);
        tokens.shuffle(&mut rng);
        let n = tokens.len();
        let n_train = ((n as f64 * split_fraction).round() as usize).clamp(1, n - 1);
        train_tokens.extend(tokens[..n_train].iter().copied());
    }
    let (train, val): (Vec<T>, Vec<T>) = items
        .iter()
        .cloned()
        .partition(|it| train_tokens.contains(it.token_id()));
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TargetAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> std::result::Result<Vec<EpochRecord>, csv::Error> {
        csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
    }

    /// `curve.csv` plus `summary.json` (with the config echoed) in `dir`.
    pub fn write(&self, dir: &Path, config: &TrainConfig) -> Result<()> {
        let out = |p: &Path, bytes: &[u8]| {
            crate::store::write_atomic(p, bytes).map_err(|e| TrainError::Output {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        out(&dir.join("curve.csv"), self.to_csv().as_bytes())?;
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "stop_reason": self.stop_reason,
            "best": self.best(),
            "config": config,
        });
        out(&dir.join("summary.json"), &serde_json::to_vec_pretty(&summary).unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            max_epochs: 100,
            patience: DEFAULT_PATIENCE,
            min_delta: DEFAULT_MIN_DELTA,
            stop_at_train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Anything that can be trained one epoch at a time.
pub trait TrainLoop {
    type Snapshot;
    /// `epoch` is 1-based.
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats>;
    fn snapshot(&self) -> Self::Snapshot;
}

/// Run epochs until the stop rule fires; returns the snapshot taken at the
/// epoch with the lowest validation loss (earliest on ties).
pub fn fit<L: TrainLoop>(lp: &mut L, rule: &StopRule) -> Result<(L::Snapshot, TrainRecord)> {
    let mut epochs = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = None;
    let mut stale = 0;
    let mut reason = StopReason::MaxEpochs;
    for epoch in 1..=rule.max_epochs {
        let s = lp.run_epoch(epoch)?;
        if !s.train_loss.is_finite() || !s.val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: s.train_loss,
            train_acc: s.train_acc,
            val_loss: s.val_loss,
            val_acc: s.val_acc,
        });
        if s.val_loss < best - rule.min_delta {
            best = s.val_loss;
            best_epoch = epoch;
            best_snapshot = Some(lp.snapshot());
            stale = 0;
        } else {
            stale += 1;
        }
        if rule.stop_at_train_accuracy.is_some_and(|t| s.train_acc >= t) {
            reason = StopReason::TargetAccuracy;
            break;
        }
        if stale >= rule.patience {
            reason = StopReason::Patience;
            break;
        }
    }
    let record = TrainRecord {
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
        stop_reason: reason,
    };
    Ok((best_snapshot.expect("at least one epoch ran"), record))
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Params>,
    v: Vec<Params>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Adam {
        let zeros = Gradients::zeros_for(model).0;
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            ndarray::Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Top-1 accuracy and mean cross-entropy in eval mode.
pub fn evaluate(model: &Model, data: &[Example]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let head = model.head_size();
    if let Some(e) = data.iter().find(|e| e.label >= head) {
        return Err(TrainError::LabelSpace(format!(
            "label {} but the model head has {head} classes",
            e.label
        )));
    }
    let per: Vec<(bool, f64)> = data
        .par_iter()
        .map(|e| {
            let p = model.forward(e.x.view())?;
            let pred = argmax(p.as_slice().unwrap());
            Ok((pred == e.label, -(p[e.label].max(f64::MIN_POSITIVE)).ln()))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let acc = per.iter().filter(|(c, _)| *c).count() as f64 / n;
    let loss = per.iter().map(|(_, l)| l).sum::<f64>() / n;
    Ok((acc, loss))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Minibatch Adam over a model. Training loss and accuracy are running
/// averages over the epoch with noise and dropout active.
pub struct NetworkLoop<'a> {
    pub model: Model,
    adam: Adam,
    grads: Gradients,
    train: &'a [Example],
    val: &'a [Example],
    cfg: &'a TrainConfig,
    rng: PipelineRng,
}

impl<'a> NetworkLoop<'a> {
    pub fn new(model: Model, train: &'a [Example], val: &'a [Example], cfg: &'a TrainConfig) -> NetworkLoop<'a> {
        NetworkLoop {
            adam: Adam::new(&model, cfg.learning_rate),
            grads: Gradients::zeros_for(&model),
            model,
            train,
            val,
            cfg,
            rng: rng_for(cfg.seed, &["train", cfg.task.name()]),
        }
    }

    fn epoch_order(&mut self) -> Vec<usize> {
        let n = self.train.len();
        if self.cfg.class_balanced {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, e) in self.train.iter().enumerate() {
                by_class.entry(e.label).or_default().push(i);
            }
            let classes: Vec<&Vec<usize>> = by_class.values().collect();
            (0..n)
                .map(|_| {
                    let c = classes[self.rng.random_range(0..classes.len())];
                    c[self.rng.random_range(0..c.len())]
                })
                .collect()
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            order
        }
    }
}

impl TrainLoop for NetworkLoop<'_> {
    type Snapshot = Model;

    fn run_epoch(&mut self, _epoch: usize) -> Result<EpochStats> {
        let order = self.epoch_order();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            self.grads.fill_zero();
            for &i in batch {
                let e = &self.train[i];
                let (loss, probs) =
                    self.model
                        .accumulate_gradient(e.x.view(), e.label, Mode::Train(&mut self.rng), &mut self.grads)?;
                loss_sum += loss;
                if argmax(probs.as_slice().unwrap()) == e.label {
                    correct += 1;
                }
            }
            self.grads.scale(1.0 / batch.len() as f64);
            self.adam.step(&mut self.model, &self.grads);
        }
        let n = order.len() as f64;
        let (val_acc, val_loss) = evaluate(&self.model, self.val)?;
        Ok(EpochStats {
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        })
    }

    fn snapshot(&self) -> Model {
        self.model.clone()
    }
}

/// Train with early stopping; returns the best-validation-loss weights.
pub fn train(model: Model, train_set: &[Example], val_set: &[Example], cfg: &TrainConfig) -> Result<(Model, TrainRecord)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let head = model.head_size();
    if let Some(e) = train_set.iter().chain(val_set).find(|e| e.label >= head) {
        return Err(TrainError::LabelSpace(format!(
            "label {} but the model head has {head} classes",
            e.label
        )));
    }
    let mut lp = NetworkLoop::new(model, train_set, val_set, cfg);
    let (best, record) = fit(&mut lp, &cfg.stop_rule())?;
    log::info!(
        "{}: stopped at epoch {} ({:?}), best epoch {} val_loss {:.4} val_acc {:.3}",
        cfg.task,
        record.stopped_epoch,
        record.stop_reason,
        record.best_epoch,
        record.best().val_loss,
        record.best().val_acc
    );
    Ok((best, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::network::{InputNorm, ModelConfig, Widths};
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;

    /// Replays a fixed validation-loss sequence; the snapshot is the epoch.
    struct Stub {
        losses: Vec<f64>,
        epoch: usize,
    }

    impl TrainLoop for Stub {
        type Snapshot = usize;
        fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
            self.epoch = epoch;
            let l = self.losses[epoch - 1];
            Ok(EpochStats {
                train_loss: l,
                train_acc: 0.5,
                val_loss: l,
                val_acc: 0.5,
            })
        }
        fn snapshot(&self) -> usize {
            self.epoch
        }
    }

    fn rule(max_epochs: usize) -> StopRule {
        StopRule {
            max_epochs,
            ..StopRule::default()
        }
    }

    #[test]
    fn plateau_stops_after_ten_stale_epochs() {
        let losses = vec![5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0, 1.0];
        let mut stub = Stub { losses, epoch: 0 };
        let (snap, rec) = fit(&mut stub, &rule(100)).unwrap();
        assert_eq!(rec.stopped_epoch, 13);
        assert_eq!(rec.best_epoch, 3);
        assert_eq!(snap, 3);
        assert_eq!(rec.stop_reason, StopReason::Patience);
    }

    #[test]
    fn tiny_improvements_do_not_reset_patience() {
        let mut losses = vec![1.0];
        losses.extend((1..=10).map(|i| 1.0 - i as f64 * 1e-6));
        let mut stub = Stub { losses, epoch: 0 };
        let (snap, rec) = fit(&mut stub, &rule(100)).unwrap();
        assert_eq!((snap, rec.stopped_epoch), (1, 11));
    }

    #[test]
    fn divergence_names_the_epoch() {
        let mut stub = Stub {
            losses: vec![2.0, 1.0, f64::NAN],
            epoch: 0,
        };
        assert!(matches!(fit(&mut stub, &rule(10)), Err(TrainError::Diverged { epoch: 3 })));
    }

    #[test]
    fn target_accuracy_stops_early() {
        struct Fast(usize);
        impl TrainLoop for Fast {
            type Snapshot = usize;
            fn run_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
                self.0 = epoch;
                Ok(EpochStats {
                    train_loss: 1.0 / epoch as f64,
                    train_acc: epoch as f64 / 5.0,
                    val_loss: 1.0 / epoch as f64,
                    val_acc: 0.0,
                })
            }
            fn snapshot(&self) -> usize {
                self.0
            }
        }
        let r = StopRule {
            stop_at_train_accuracy: Some(0.99),
            ..rule(50)
        };
        let (snap, rec) = fit(&mut Fast(0), &r).unwrap();
        assert_eq!((snap, rec.stopped_epoch, rec.stop_reason), (5, 5, StopReason::TargetAccuracy));
    }

    proptest! {
        #[test]
        fn early_stopping_rule(steps in proptest::collection::vec(0u32..20, 1..60)) {
            // losses on a 0.01 grid so min_delta never matters
            let losses: Vec<f64> = steps.iter().map(|&s| s as f64 * 0.01).collect();
            let mut stub = Stub { losses: losses.clone(), epoch: 0 };
            let (snap, rec) = fit(&mut stub, &rule(losses.len())).unwrap();
            let seen = &losses[..rec.stopped_epoch];
            let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            let argmin = seen.iter().position(|&v| v == min).unwrap() + 1;
            prop_assert_eq!(rec.best_epoch, argmin);
            prop_assert_eq!(snap, argmin);
            prop_assert!(rec.stopped_epoch - rec.best_epoch <= DEFAULT_PATIENCE);
            // stop is the first epoch completing 10 stale epochs, else the end
            let mut best = f64::INFINITY;
            let mut stale = 0;
            let mut expected = losses.len();
            for (i, &l) in losses.iter().enumerate() {
                if l < best - DEFAULT_MIN_DELTA { best = l; stale = 0; } else { stale += 1; }
                if stale == DEFAULT_PATIENCE { expected = i + 1; break; }
            }
            prop_assert_eq!(rec.stopped_epoch, expected);
        }
    }

    #[derive(Clone, Debug)]
    struct Item(String, usize);
    impl Labeled for Item {
        fn token_id(&self) -> &str {
            &self.0
        }
        fn label(&self) -> usize {
            self.1
        }
    }

    fn items(tokens: usize, classes: usize, clips: usize) -> Vec<Item> {
        (0..tokens)
            .flat_map(|t| (0..clips).map(move |_| Item(format!("tok{t}"), t % classes)))
            .collect()
    }

    #[test]
    fn split_keeps_tokens_whole_and_classes_on_both_sides() {
        let data = items(40, 4, 10);
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let (tr, va) = split_dataset(&data, &names, 0.9, 7).unwrap();
        assert_eq!(tr.len() + va.len(), 400);
        let tr_tokens: std::collections::HashSet<_> = tr.iter().map(|i| i.0.clone()).collect();
        let va_tokens: std::collections::HashSet<_> = va.iter().map(|i| i.0.clone()).collect();
        assert!(tr_tokens.is_disjoint(&va_tokens));
        for t in &tr_tokens {
            assert_eq!(tr.iter().filter(|i| &i.0 == t).count(), 10);
        }
        for c in 0..4 {
            assert!(tr.iter().any(|i| i.1 == c) && va.iter().any(|i| i.1 == c));
        }
        let (tr2, _) = split_dataset(&data, &names, 0.9, 7).unwrap();
        assert_eq!(tr.iter().map(|i| &i.0).collect::<Vec<_>>(), tr2.iter().map(|i| &i.0).collect::<Vec<_>>());
    }

    #[test]
    fn ninety_ten_by_token() {
        let data = items(100, 1, 1);
        let (tr, va) = split_dataset(&data, &[], 0.9, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
    }

    #[test]
    fn singleton_class_is_named() {
        let mut data = items(10, 2, 3);
        data.push(Item("lonely".into(), 2));
        let names = vec!["a".to_string(), "b".to_string(), "zebra".to_string()];
        match split_dataset(&data, &names, 0.9, 1) {
            Err(TrainError::Split { class, tokens }) => assert_eq!((class.as_str(), tokens), ("zebra", 1)),
            other => panic!("unexpected {other:?}"),
        }
        let bad = vec![Item("t".into(), 0), Item("t".into(), 1)];
        assert!(matches!(
            split_dataset(&bad, &names, 0.5, 1),
            Err(TrainError::InconsistentToken { .. })
        ));
    }

    fn toy_model(head: usize, seed: u64) -> Model {
        let widths = Widths {
            conv: [4, 4, 4, 4, 4],
            dense: 16,
        };
        Model::new(ModelConfig::scaled((16, 24), widths, head).unwrap(), seed).unwrap()
    }

    /// Class `c` lights up a horizontal band of rows; the rest is noise.
    fn banded(n_per_class: usize, classes: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from_seed(seed);
        let mut out = Vec::new();
        for c in 0..classes {
            for k in 0..n_per_class {
                let x = Array2::from_shape_fn((16, 24), |(i, _)| {
                    let band = (i * classes / 16 == c) as u8 as f32;
                    band + 0.3 * rng.random::<f32>()
                });
                out.push(Example {
                    x: Arc::new(x),
                    label: c,
                    token_id: format!("{c}-{k}"),
                });
            }
        }
        out
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_set() {
        let mut model = toy_model(10, 1);
        let last = model.params_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        last.bias[0] = 1.0;
        let data = banded(3, 10, 2);
        let (acc, loss) = evaluate(&model, &data).unwrap();
        assert!((acc - 0.1).abs() < 1e-12);
        assert_eq!((acc, loss), evaluate(&model, &data).unwrap());
        let wrong = toy_model(5, 1);
        assert!(matches!(evaluate(&wrong, &data), Err(TrainError::LabelSpace(_))));
    }

    #[test]
    fn training_reduces_loss_and_restores_best() {
        let data = banded(6, 3, 3);
        let mut model = toy_model(3, 4);
        model.set_input_norm(InputNorm { mean: 0.5, std: 0.5 });
        let mut cfg = TrainConfig::new(Task::Dorsal);
        cfg.batch_size = 6;
        cfg.learning_rate = 3e-3;
        cfg.max_epochs = 15;
        let (tr, va) = split_dataset(&data, &[], 0.7, 1).unwrap();
        let (best, rec) = train(model, &tr, &va, &cfg).unwrap();
        assert!(rec.epochs[9].train_loss < rec.epochs[0].train_loss);
        let (_, loss) = evaluate(&best, &va).unwrap();
        assert!((loss - rec.best().val_loss).abs() < 1e-12);
        let csv = rec.to_csv();
        assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc"));
        assert_eq!(TrainRecord::from_csv(&csv).unwrap(), rec.epochs);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Task::Ventral);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.patience, 10);
        cfg.split_fraction = 1.0;
        assert!(cfg.validate().is_err());
        assert_eq!("ventral".parse::<Task>().unwrap(), Task::Ventral);
        assert!("lateral".parse::<Task>().is_err());
    }
}
