//! Linear probes on frozen penultimate features.
//!
//! Probe sets are class-balanced and split by word type, so every test word
//! is unseen during probe training. The classifier is an L2-regularized
//! softmax regression on z-scored features, fitted with L-BFGS.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor, Gradient, State, TerminationReason};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{onset_class_of, syllable_count_of, Animacy, Concreteness, LexiconEntry, OnsetClass};
use crate::seed::rng_for;
use crate::store::{read_tensor, write_tensor, StoreError};

pub const TEST_FRACTION: f64 = 0.2;
pub const LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const DEFAULT_LAMBDA: f64 = 1e-2;
pub const MAX_ITERS: u64 = 1000;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("class `{class}` has {available} exemplars, {needed} requested (short by {})", needed - available)]
    Insufficient {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("class `{class}` cannot be split by word: {reason}")]
    Split { class: String, reason: String },
    #[error("probe did not converge within {iterations} iterations")]
    NotConverged { iterations: u64 },
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("empty test split")]
    EmptyTest,
    #[error("invalid probe input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// Labels available for one word; `None` where the word is not annotated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeLabels {
    pub onset: Option<OnsetClass>,
    pub syllables: Option<u8>,
    pub animacy: Option<Animacy>,
    pub concreteness: Option<Concreteness>,
}

impl ProbeLabels {
    pub fn of_entry(entry: &LexiconEntry) -> ProbeLabels {
        ProbeLabels {
            onset: onset_class_of(entry).ok(),
            syllables: syllable_count_of(entry),
            animacy: entry.animacy,
            concreteness: entry.concreteness,
        }
    }
}

/// Penultimate activation of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub vector: Vec<f32>,
    pub word: String,
    pub token_id: String,
    pub clip_index: u8,
    pub labels: ProbeLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Onset,
    Syllable,
    Animacy,
    Concreteness,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 4] = [
        ProbeTask::Onset,
        ProbeTask::Syllable,
        ProbeTask::Animacy,
        ProbeTask::Concreteness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Onset => "onset",
            ProbeTask::Syllable => "syllable",
            ProbeTask::Animacy => "animacy",
            ProbeTask::Concreteness => "concreteness",
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            ProbeTask::Onset => OnsetClass::ALL.iter().map(|c| c.name().to_string()).collect(),
            ProbeTask::Syllable => (1..=4).map(|n| n.to_string()).collect(),
            ProbeTask::Animacy => vec!["animate".into(), "inanimate".into()],
            ProbeTask::Concreteness => vec!["abstract".into(), "concrete".into()],
        }
    }

    pub fn n_classes(self) -> usize {
        self.class_names().len()
    }

    /// Exemplars per class at full scale.
    pub fn exemplars_per_class(self) -> usize {
        match self {
            ProbeTask::Onset => 1050,
            ProbeTask::Syllable => 900,
            ProbeTask::Animacy => 400,
            ProbeTask::Concreteness => 500,
        }
    }

    pub fn chance(self) -> f64 {
        1.0 / self.n_classes() as f64
    }

    pub fn label_of(self, labels: &ProbeLabels) -> Option<usize> {
        match self {
            ProbeTask::Onset => labels.onset.map(|c| c.index()),
            ProbeTask::Syllable => labels.syllables.map(|s| s as usize - 1),
            ProbeTask::Animacy => labels.animacy.map(|a| a.index()),
            ProbeTask::Concreteness => labels.concreteness.map(|c| c.index()),
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeTask {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ProbeTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown probe task `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "dorsal")]
    Dorsal,
    #[serde(rename = "ventral")]
    Ventral,
    #[serde(rename = "random-control")]
    RandomControl,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Dorsal, Source::Ventral, Source::RandomControl];

    pub fn name(self) -> &'static str {
        match self {
            Source::Dorsal => "dorsal",
            Source::Ventral => "ventral",
            Source::RandomControl => "random-control",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown feature source `{s}`"))
    }
}

/// Balanced, word-disjoint probe dataset. Entries are `(record index, label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub class_names: Vec<String>,
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub train_words: BTreeSet<String>,
    pub test_words: BTreeSet<String>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assemble a probe set for one of the four lexical tasks.
pub fn assemble_probe_set(task: ProbeTask, features: &[FeatureRecord], per_class: usize, seed: u64) -> Result<ProbeSet> {
    assemble_balanced(
        task.name(),
        &task.class_names(),
        features,
        |r| task.label_of(&r.labels),
        per_class,
        TEST_FRACTION,
        seed,
    )
}

/// Sample exactly `per_class` records per class without replacement,
/// assigning whole words to either the train or the test side.
pub fn assemble_balanced(
    name: &str,
    class_names: &[String],
    features: &[FeatureRecord],
    label_of: impl Fn(&FeatureRecord) -> Option<usize>,
    per_class: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<ProbeSet> {
    if per_class < 2 {
        return Err(ProbeError::Invalid("need at least 2 exemplars per class".into()));
    }
    let n_test = ((per_class as f64 * test_fraction).round() as usize).clamp(1, per_class - 1);
    let n_train = per_class - n_test;
    // class -> word -> record indices
    let mut pools: Vec<BTreeMap<&str, Vec<usize>>> = vec![BTreeMap::new(); class_names.len()];
    for (i, r) in features.iter().enumerate() {
        if let Some(l) = label_of(r) {
            let pool = pools
                .get_mut(l)
                .ok_or_else(|| ProbeError::Invalid(format!("label {l} outside {} classes", class_names.len())))?;
            pool.entry(r.word.as_str()).or_default().push(i);
        }
    }
    let k = class_names.len();
    for (label, pool) in pools.iter().enumerate() {
        let available: usize = pool.values().map(Vec::len).sum();
        if available < per_class {
            return Err(ProbeError::Insufficient {
                class: class_names[label].clone(),
                needed: per_class,
                available,
            });
        }
    }
    // Sides are chosen per word, across all classes at once, so the split
    // stays word-disjoint even when labels vary within a word.
    let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (label, pool) in pools.iter().enumerate() {
        for (&w, rows) in pool {
            counts.entry(w).or_insert_with(|| vec![0; k])[label] = rows.len();
        }
    }
    let mut order: Vec<&str> = counts.keys().copied().collect();
    order.shuffle(&mut rng_for(seed, &["probe", name, "words"]));
    let mut test_have = vec![0usize; k];
    let mut train_left: Vec<usize> = pools.iter().map(|p| p.values().map(Vec::len).sum()).collect();
    let mut set = ProbeSet {
        class_names: class_names.to_vec(),
        train: Vec::new(),
        test: Vec::new(),
        train_words: BTreeSet::new(),
        test_words: BTreeSet::new(),
    };
    for w in order {
        let c = &counts[w];
        let wanted = (0..k).any(|l| c[l] > 0 && test_have[l] < n_test);
        let fits = (0..k).all(|l| train_left[l] - c[l] >= n_train);
        if wanted && fits {
            for l in 0..k {
                test_have[l] += c[l];
                train_left[l] -= c[l];
            }
            set.test_words.insert(w.to_string());
        } else {
            set.train_words.insert(w.to_string());
        }
    }
    for (label, pool) in pools.iter().enumerate() {
        let class = &class_names[label];
        let (mut test_pool, mut train_pool) = (Vec::new(), Vec::new());
        for (&w, rows) in pool {
            if set.test_words.contains(w) {
                test_pool.extend(rows);
            } else {
                train_pool.extend(rows);
            }
        }
        if test_pool.len() < n_test || train_pool.len() < n_train {
            return Err(ProbeError::Split {
                class: class.clone(),
                reason: format!(
                    "{} words cannot supply {n_train} train and {n_test} test exemplars",
                    pool.len()
                ),
            });
        }
        let mut rng = rng_for(seed, &["probe", name, class]);
        test_pool.shuffle(&mut rng);
        train_pool.shuffle(&mut rng);
        set.test.extend(test_pool[..n_test].iter().map(|&i| (i, label)));
        set.train.extend(train_pool[..n_train].iter().map(|&i| (i, label)));
    }
    debug_assert!(set.train_words.is_disjoint(&set.test_words));
    Ok(set)
}

/// Standardized softmax regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// (classes, features)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub lambda: f64,
    pub iterations: u64,
}

struct Objective {
    x: Array2<f64>,
    y: Vec<usize>,
    k: usize,
    lambda: f64,
}

impl Objective {
    fn unpack(&self, p: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let d = self.x.ncols();
        let w = Array2::from_shape_vec((self.k, d), p[..self.k * d].to_vec()).expect("param length");
        let b = Array1::from_vec(p[self.k * d..].to_vec());
        (w, b)
    }

    /// Loss and the softmax-minus-target matrix.
    fn eval(&self, p: &[f64]) -> (f64, Array2<f64>, Array2<f64>) {
        let (w, b) = self.unpack(p);
        let mut z = self.x.dot(&w.t());
        z += &b;
        let n = self.y.len() as f64;
        let mut loss = 0.0;
        for (mut row, &y) in z.rows_mut().into_iter().zip(&self.y) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
            row[y] -= 1.0;
        }
        loss = loss / n + 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>();
        (loss, z, w)
    }
}

impl CostFunction for Objective {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.eval(p).0)
    }
}

impl Gradient for Objective {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let (_, g, w) = self.eval(p);
        let n = self.y.len() as f64;
        let gw = g.t().dot(&self.x) / n + &(w * self.lambda);
        let gb = g.sum_axis(Axis(0)) / n;
        Ok(gw.iter().chain(gb.iter()).copied().collect())
    }
}

fn standardize_params(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, scale)
}

/// Fit a probe with a fixed L2 strength.
pub fn train_probe(x: ArrayView2<f64>, y: &[usize], n_classes: usize, lambda: f64) -> Result<ProbeModel> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(ProbeError::Invalid(format!("{} rows for {} labels", x.nrows(), y.len())));
    }
    if let Some(&l) = y.iter().find(|&&l| l >= n_classes) {
        return Err(ProbeError::Invalid(format!("label {l} outside {n_classes} classes")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::Invalid("non-finite feature value".into()));
    }
    let (mean, scale) = standardize_params(x);
    let xs = (&x - &mean) / &scale;
    let d = xs.ncols();
    let obj = Objective {
        x: xs,
        y: y.to_vec(),
        k: n_classes,
        lambda,
    };
    let init = vec![0.0; n_classes * (d + 1)];
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(1e-6)
        .and_then(|s| s.with_tolerance_cost(1e-10))
        .map_err(|e| ProbeError::Optimizer(e.to_string()))?;
    let res = Executor::new(obj, solver)
        .configure(|s| s.param(init).max_iters(MAX_ITERS))
        .run()
        .map_err(|e| ProbeError::Optimizer(e.to_string()))?;
    let state = res.state();
    if state.get_termination_reason() == Some(&TerminationReason::MaxItersReached) {
        return Err(ProbeError::NotConverged { iterations: MAX_ITERS });
    }
    let iterations = state.get_iter();
    let best = state
        .get_best_param()
        .ok_or_else(|| ProbeError::Optimizer("no parameters returned".into()))?;
    let (weight, bias) = res.problem.problem.as_ref().expect("problem retained").unpack(best);
    Ok(ProbeModel {
        mean,
        scale,
        weight,
        bias,
        lambda,
        iterations,
    })
}

impl ProbeModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let xs = (&x - &self.mean) / &self.scale;
        let z = xs.dot(&self.weight.t()) + &self.bias;
        z.rows()
            .into_iter()
            .map(|r| crate::trainer::argmax(r.as_slice().expect("row-major")))
            .collect()
    }

    pub fn log_loss(&self, x: ArrayView2<f64>, y: &[usize]) -> f64 {
        let xs = (&x - &self.mean) / &self.scale;
        let z = xs.dot(&self.weight.t()) + &self.bias;
        let mut loss = 0.0;
        for (row, &l) in z.rows().into_iter().zip(y) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.mapv(|v| (v - max).exp()).sum().ln() + max;
            loss += lse - row[l];
        }
        loss / y.len() as f64
    }
}

pub fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// One row of `probes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub source: String,
    pub accuracy: f64,
    pub chance: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// How train and test were separated.
    pub split: String,
    pub lambda: f64,
}

impl ProbeResult {
    /// Normal-approximation 95% interval of accuracy under chance.
    pub fn chance_interval(&self) -> (f64, f64) {
        binomial_interval(self.chance, self.n_test)
    }
}

pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let se = (p * (1.0 - p) / n as f64).sqrt();
    (p - 1.96 * se, p + 1.96 * se)
}

pub fn evaluate_probe(
    probe: &ProbeModel,
    x_test: ArrayView2<f64>,
    y_test: &[usize],
    task: &str,
    source: &str,
    chance: f64,
    n_train: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if y_test.is_empty() {
        return Err(ProbeError::EmptyTest);
    }
    let pred = probe.predict(x_test);
    Ok(ProbeResult {
        task: task.to_string(),
        source: source.to_string(),
        accuracy: accuracy(&pred, y_test),
        chance,
        n_train,
        n_test: y_test.len(),
        seed,
        split: "word".into(),
        lambda: probe.lambda,
    })
}

fn gather(features: &[FeatureRecord], rows: &[(usize, usize)]) -> (Array2<f64>, Vec<usize>) {
    let d = features.first().map_or(0, |r| r.vector.len());
    let mut x = Array2::<f64>::zeros((rows.len(), d));
    for (mut row, &(i, _)) in x.rows_mut().into_iter().zip(rows) {
        row.assign(&Array1::from_iter(features[i].vector.iter().map(|&v| v as f64)));
    }
    (x, rows.iter().map(|&(_, l)| l).collect())
}

/// Choose the L2 strength on an inner word-disjoint validation fold of the
/// training side. Falls back to `DEFAULT_LAMBDA` when some class has a
/// single training word.
pub fn select_lambda(features: &[FeatureRecord], set: &ProbeSet, seed: u64) -> Result<f64> {
    let mut by_class: BTreeMap<usize, BTreeMap<&str, Vec<(usize, usize)>>> = BTreeMap::new();
    for &(i, l) in &set.train {
        by_class.entry(l).or_default().entry(&features[i].word).or_default().push((i, l));
    }
    let (mut fit_rows, mut val_rows) = (Vec::new(), Vec::new());
    for (label, words) in &by_class {
        if words.len() < 2 {
            return Ok(DEFAULT_LAMBDA);
        }
        let mut names: Vec<&str> = words.keys().copied().collect();
        names.shuffle(&mut rng_for(seed, &["lambda", &label.to_string()]));
        let n_val = ((names.len() as f64 * 0.25).round() as usize).clamp(1, names.len() - 1);
        for (j, w) in names.iter().enumerate() {
            if j < n_val {
                val_rows.extend(&words[w]);
            } else {
                fit_rows.extend(&words[w]);
            }
        }
    }
    let (xf, yf) = gather(features, &fit_rows);
    let (xv, yv) = gather(features, &val_rows);
    let k = set.class_names.len();
    let mut best = (DEFAULT_LAMBDA, f64::NEG_INFINITY, f64::INFINITY);
    for &lambda in &LAMBDA_GRID {
        let m = match train_probe(xf.view(), &yf, k, lambda) {
            Ok(m) => m,
            Err(ProbeError::NotConverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let acc = accuracy(&m.predict(xv.view()), &yv);
        let loss = m.log_loss(xv.view(), &yv);
        if acc > best.1 || (acc == best.1 && loss < best.2) {
            best = (lambda, acc, loss);
        }
    }
    Ok(best.0)
}

/// Fit on the train side of `set` and score on its test side.
pub fn fit_and_score(
    features: &[FeatureRecord],
    set: &ProbeSet,
    task: &str,
    source: &str,
    seed: u64,
) -> Result<ProbeResult> {
    if features.iter().any(|r| r.vector.len() != features[0].vector.len()) {
        return Err(ProbeError::Invalid("feature vectors differ in length".into()));
    }
    let lambda = select_lambda(features, set, seed)?;
    let (xt, yt) = gather(features, &set.train);
    let (xe, ye) = gather(features, &set.test);
    let k = set.class_names.len();
    let probe = train_probe(xt.view(), &yt, k, lambda)?;
    evaluate_probe(&probe, xe.view(), &ye, task, source, 1.0 / k as f64, yt.len(), seed)
}

/// Assemble, fit and score one lexical probe.
pub fn run_probe(
    task: ProbeTask,
    source: Source,
    features: &[FeatureRecord],
    per_class: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let set = assemble_probe_set(task, features, per_class, seed)?;
    fit_and_score(features, &set, task.name(), source.name(), seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordMeta {
    word: String,
    token_id: String,
    clip_index: u8,
    labels: ProbeLabels,
}

/// Store records as one `(n, dim)` tensor; per-row metadata goes in the
/// sidecar alongside `extra`.
pub fn write_features(path: &Path, records: &[FeatureRecord], extra: serde_json::Value) -> Result<String> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    if records.iter().any(|r| r.vector.len() != dim) {
        return Err(ProbeError::Invalid("feature vectors differ in length".into()));
    }
    let values: Vec<f32> = records.iter().flat_map(|r| r.vector.iter().copied()).collect();
    let rows: Vec<RecordMeta> = records
        .iter()
        .map(|r| RecordMeta {
            word: r.word.clone(),
            token_id: r.token_id.clone(),
            clip_index: r.clip_index,
            labels: r.labels.clone(),
        })
        .collect();
    let meta = serde_json::json!({ "records": rows, "info": extra });
    Ok(write_tensor(path, &values, &[records.len(), dim], meta)?)
}

pub fn read_features(path: &Path) -> Result<(Vec<FeatureRecord>, serde_json::Value)> {
    let (values, sidecar) = read_tensor(path)?;
    let [n, dim] = sidecar.shape[..] else {
        return Err(ProbeError::Invalid(format!("feature tensor has shape {:?}", sidecar.shape)));
    };
    let rows: Vec<RecordMeta> = serde_json::from_value(sidecar.meta["records"].clone())
        .map_err(|e| ProbeError::Invalid(format!("feature sidecar: {e}")))?;
    if rows.len() != n {
        return Err(ProbeError::Invalid(format!("{} metadata rows for {n} vectors", rows.len())));
    }
    let records = rows
        .into_iter()
        .enumerate()
        .map(|(i, m)| FeatureRecord {
            vector: values[i * dim..(i + 1) * dim].to_vec(),
            word: m.word,
            token_id: m.token_id,
            clip_index: m.clip_index,
            labels: m.labels,
        })
        .collect();
    Ok((records, sidecar.meta["info"].clone()))
}

/// Append rows to a CSV file, writing the header only for a new file.
pub fn append_results(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let out = |e: String| ProbeError::Output {
        path: path.display().to_string(),
        message: e,
    };
    let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| out(e.to_string()))?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in results {
        w.serialize(r).map_err(|e| out(e.to_string()))?;
    }
    w.flush().map_err(|e| out(e.to_string()))
}

pub fn read_results(path: &Path) -> Result<Vec<ProbeResult>> {
    let out = |e: String| ProbeError::Output {
        path: path.display().to_string(),
        message: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| out(e.to_string()))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| out(e.to_string()))
}
