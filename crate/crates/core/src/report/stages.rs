//! The pipeline stages. Each one checks its upstreams, skips itself when its
//! key and outputs are unchanged, and otherwise rebuilds its directory from
//! scratch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_token, ClipSpec, NoisePool, NoiseSource, Token};
use crate::cochlea::Filterbank;
use crate::lexicon::{Lexicon, SemanticDomain, BUNDLED_LEXICON};
use crate::network::{load_checkpoint, save_checkpoint, InputNorm, Model};
use crate::probes::{read_features, run_probe, write_features, FeatureRecord, ProbeLabels, ProbeResult, ProbeTask, Source};
use crate::seed::derive_seed;
use crate::store::{read_cochleagram, sha256_file, sha256_hex, write_atomic, write_cochleagram};
use crate::trainer::{split_dataset, train as fit_network, Example, Task, TrainRecord};
use crate::wav;

use super::config::PipelineConfig;
use super::figures::{learning_curve_figure, probe_figure, FigureSummary};
use super::lineage::{
    hash_outputs, is_current, read_record, record_path, require_stage, stage_key, verify_workdir, write_record, StageRecord,
    TOOL_VERSION,
};
use super::metrics::{FigureEntry, Metrics, ProbeSummary, TrainingSummary};
use super::{PipelineError, Result};

pub const PREPARE: &str = "prepare";
pub const REPORT: &str = "report";
pub const PROBES_CSV: &str = "probes.csv";
pub const MANIFEST: &str = "manifest.jsonl";
pub const ERRORS: &str = "errors.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const FEATURES: &str = "features.f32";

pub fn train_dir(task: Task) -> String {
    format!("train_{}", task.name())
}

pub fn extract_dir(source: Source) -> String {
    format!("extract_{}", source.name())
}

pub fn probe_dir(source: Source, task: ProbeTask) -> String {
    format!("probe_{}_{}", source.name(), task.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: String,
    pub dir: PathBuf,
    /// True when an up-to-date run was found and nothing was recomputed.
    pub skipped: bool,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub stages: Vec<String>,
    pub problems: Vec<String>,
}

/// What every artifact carries about where it came from.
fn lineage_value(cfg: &PipelineConfig, upstream: &BTreeMap<String, String>) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "upstream": upstream,
        "tool_version": TOOL_VERSION,
    })
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &PipelineConfig,
    stage: &str,
    dir: &Path,
    key: String,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    upstream: BTreeMap<String, String>,
    outputs: &[String],
    notes: serde_json::Value,
) -> Result<()> {
    let rec = StageRecord {
        stage: stage.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        key,
        config,
        inputs,
        upstream,
        outputs: hash_outputs(dir, outputs)?,
        notes,
    };
    write_record(dir, &rec)?;
    Ok(())
}

fn skipped(stage: &str, dir: PathBuf) -> StageOutcome {
    log::info!("{stage}: up to date, skipping");
    StageOutcome {
        stage: stage.to_string(),
        dir,
        skipped: true,
        summary: "up to date".into(),
    }
}

// ---------------------------------------------------------------- corpus

/// One row of `tokens.tsv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub token_id: String,
    pub word: String,
    /// Audio path relative to the corpus directory.
    pub audio: String,
    pub onset_s: f64,
    pub duration_s: f64,
}

pub fn read_tokens(path: &Path) -> Result<Vec<TokenRow>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<TokenRow>, _>>()
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Noise files by pool-relative path, in a stable order.
fn noise_files(cfg: &PipelineConfig) -> Result<BTreeMap<String, PathBuf>> {
    let root = cfg.noise_dir();
    let mut out = BTreeMap::new();
    for sub in ["scenes", "music", "babble", "talkers"] {
        let d = root.join(sub);
        if d.is_dir() {
            for p in list_wavs(&d)? {
                out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), p);
            }
        }
    }
    Ok(out)
}

/// Scenes and music come from `scenes/` and `music/`. Babble is read from
/// `babble/` when present, otherwise mixed from the streams in `talkers/`.
pub fn load_noise_pool(cfg: &PipelineConfig) -> Result<NoisePool> {
    let root = cfg.noise_dir();
    let sr = cfg.cochlea.sample_rate;
    let read = |sub: &str| -> Result<Vec<NoiseSource>> {
        let d = root.join(sub);
        if !d.is_dir() {
            return Ok(Vec::new());
        }
        list_wavs(&d)?
            .into_iter()
            .map(|p| {
                let id = p.file_stem().unwrap().to_string_lossy().to_string();
                Ok(NoiseSource::new(id, wav::read_mono_at(&p, sr)?))
            })
            .collect()
    };
    let (scenes, music) = (read("scenes")?, read("music")?);
    let babble = read("babble")?;
    let pool = if !babble.is_empty() {
        NoisePool::new(scenes, music, babble, sr)
    } else {
        let talkers = read("talkers")?;
        if talkers.is_empty() {
            return Err(PipelineError::Config(format!(
                "{}: need babble/*.wav or talkers/*.wav next to scenes/ and music/",
                root.display()
            )));
        }
        NoisePool::with_babble_from_talkers(
            scenes,
            music,
            &talkers,
            cfg.augment.babble_tracks,
            cfg.augment.babble_talkers,
            sr,
            cfg.seed,
        )
    };
    Ok(pool?)
}

/// A problem with one input file; collected into `errors.json`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InputIssue {
    pub path: String,
    pub token_id: String,
    pub message: String,
}

pub fn read_manifest(prepare_dir: &Path) -> Result<Vec<ClipSpec>> {
    let p = prepare_dir.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::Lineage(format!("{}: {e}", p.display()))))
        .collect()
}

pub fn clip_path(prepare_dir: &Path, spec: &ClipSpec) -> PathBuf {
    prepare_dir.join("clips").join(format!("{}.wav", spec.stem()))
}

pub fn cochleagram_path(prepare_dir: &Path, spec: &ClipSpec) -> PathBuf {
    prepare_dir.join("coch").join(format!("{}.f32", spec.stem()))
}

// ---------------------------------------------------------------- prepare

/// Jitter, mix and transform every token into clips and cochleagrams.
/// Unreadable or unusable tokens are listed in `errors.json` and make the
/// stage fail after everything else has been written.
pub fn prepare(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let work = &cfg.paths.workdir;
    let dir = work.join(PREPARE);
    let tokens_path = cfg.tokens_path();
    let tokens = read_tokens(&tokens_path)?;
    let lex = cfg.lexicon()?;

    let mut inputs = BTreeMap::new();
    inputs.insert("tokens.tsv".to_string(), sha256_file(&tokens_path)?);
    inputs.insert(
        "lexicon".to_string(),
        match &cfg.paths.lexicon {
            Some(p) => sha256_file(p)?,
            None => sha256_hex(BUNDLED_LEXICON.as_bytes()),
        },
    );
    for (rel, p) in noise_files(cfg)? {
        inputs.insert(format!("noise/{rel}"), sha256_file(&p)?);
    }
    let audio_hashes: Vec<(String, String)> = tokens
        .par_iter()
        .map(|t| {
            let h = sha256_file(&cfg.paths.corpus.join(&t.audio)).unwrap_or_else(|_| "missing".into());
            (format!("audio/{}", t.token_id), h)
        })
        .collect();
    inputs.extend(audio_hashes);

    let echo = serde_json::json!({ "augment": cfg.augment, "cochlea": cfg.cochlea });
    let upstream = BTreeMap::new();
    let key = stage_key(PREPARE, cfg.seed, &echo, &inputs, &upstream);
    if is_current(work, &dir, &key)? {
        let rec = read_record(&dir)?.expect("current stage has a record");
        let errors = rec.notes["errors"].as_u64().unwrap_or(0) as usize;
        if errors > 0 {
            return Err(PipelineError::PrepareFailed {
                count: errors,
                report: dir.join(ERRORS).display().to_string(),
            });
        }
        return Ok(skipped(PREPARE, dir));
    }

    let pool = load_noise_pool(cfg)?;
    let fb = Filterbank::new(cfg.cochlea)?;
    let aug = cfg.augment_config();
    fresh_dir(&dir)?;
    for sub in ["clips", "coch"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| PipelineError::io(&dir, e))?;
    }
    let lineage = lineage_value(cfg, &upstream);

    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    let mut todo = Vec::new();
    for t in &tokens {
        let issue = |m: String| InputIssue {
            path: t.audio.clone(),
            token_id: t.token_id.clone(),
            message: m,
        };
        if !seen.insert(t.token_id.clone()) {
            issues.push(issue("duplicate token_id".into()));
        } else if let Err(e) = lex.get(&t.word) {
            issues.push(issue(e.to_string()));
        } else {
            todo.push(t);
        }
    }

    let results: Vec<std::result::Result<Vec<ClipSpec>, InputIssue>> = todo
        .par_iter()
        .map(|t| {
            let issue = |m: String| InputIssue {
                path: t.audio.clone(),
                token_id: t.token_id.clone(),
                message: m,
            };
            let audio = wav::read_mono_at(cfg.paths.corpus.join(&t.audio), aug.sample_rate).map_err(|e| issue(e.to_string()))?;
            let token = Token {
                token_id: t.token_id.clone(),
                word: t.word.clone(),
                onset_s: t.onset_s,
                duration_s: t.duration_s,
            };
            let clips = augment_token(&token, &audio, &pool, &aug, cfg.seed).map_err(|e| issue(e.to_string()))?;
            let mut specs = Vec::with_capacity(clips.len());
            for g in clips {
                let spec = g.clip.spec.clone();
                let fail = |e: String| issue(format!("clip {}: {e}", spec.clip_index));
                wav::write_f32(clip_path(&dir, &spec), &g.clip.samples, aug.sample_rate).map_err(|e| fail(e.to_string()))?;
                let c = fb.cochleagram(&g.clip).map_err(|e| fail(e.to_string()))?;
                write_cochleagram(&cochleagram_path(&dir, &spec), &c, &lineage).map_err(|e| fail(e.to_string()))?;
                specs.push(spec);
            }
            Ok(specs)
        })
        .collect();

    let mut specs = Vec::new();
    for r in results {
        match r {
            Ok(s) => specs.extend(s),
            Err(i) => issues.push(i),
        }
    }
    specs.sort_by(|a, b| (&a.token_id, a.clip_index).cmp(&(&b.token_id, b.clip_index)));
    issues.sort();

    let mut manifest = String::new();
    for s in &specs {
        manifest.push_str(&serde_json::to_string(s).expect("spec serializes"));
        manifest.push('\n');
    }
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())?;
    write_atomic(&dir.join(ERRORS), &serde_json::to_vec_pretty(&issues).expect("issues serialize"))?;

    let mut outputs = vec![MANIFEST.to_string(), ERRORS.to_string()];
    for s in &specs {
        outputs.push(format!("clips/{}.wav", s.stem()));
        outputs.push(format!("coch/{}.f32", s.stem()));
        outputs.push(format!("coch/{}.json", s.stem()));
    }
    let notes = serde_json::json!({ "tokens": tokens.len(), "clips": specs.len(), "errors": issues.len() });
    finish(cfg, PREPARE, &dir, key, echo, inputs, upstream, &outputs, notes)?;
    for i in &issues {
        log::error!("{} ({}): {}", i.path, i.token_id, i.message);
    }
    if !issues.is_empty() {
        return Err(PipelineError::PrepareFailed {
            count: issues.len(),
            report: dir.join(ERRORS).display().to_string(),
        });
    }
    Ok(StageOutcome {
        stage: PREPARE.into(),
        dir,
        skipped: false,
        summary: format!("{} tokens -> {} clips", tokens.len(), specs.len()),
    })
}

// ---------------------------------------------------------------- train

/// Class names and per-clip labels for a task over the clips present.
pub fn label_space(task: Task, specs: &[ClipSpec], lex: &Lexicon) -> Result<(Vec<String>, Vec<usize>)> {
    match task {
        Task::Dorsal => {
            let words: Vec<String> = specs.iter().map(|s| s.word.clone()).collect::<BTreeSet<_>>().into_iter().collect();
            let labels = specs
                .iter()
                .map(|s| words.binary_search(&s.word).expect("word collected above"))
                .collect();
            Ok((words, labels))
        }
        Task::Ventral => {
            let domains: Vec<SemanticDomain> = specs
                .iter()
                .map(|s| lex.domain_of(&s.word))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let present: Vec<SemanticDomain> = domains.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let labels = domains
                .iter()
                .map(|d| present.iter().position(|p| p == d).expect("domain collected above"))
                .collect();
            Ok((present.iter().map(|d| d.name().to_string()).collect(), labels))
        }
    }
}

fn load_examples(prepare_dir: &Path, specs: &[ClipSpec], labels: &[usize]) -> Result<Vec<Example>> {
    specs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, &label)| {
            let c = read_cochleagram(&cochleagram_path(prepare_dir, s))?;
            Ok(Example {
                x: Arc::new(c.values),
                label,
                token_id: s.token_id.clone(),
            })
        })
        .collect()
}

/// Scalar mean and standard deviation over every input value.
pub fn input_norm(examples: &[Example]) -> InputNorm {
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for e in examples {
        for &v in e.x.iter() {
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
        n += e.x.len();
    }
    if n == 0 {
        return InputNorm::default();
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    InputNorm {
        mean,
        std: if std > 0.0 { std } else { 1.0 },
    }
}

pub fn train(cfg: &PipelineConfig, task: Task) -> Result<StageOutcome> {
    let work = &cfg.paths.workdir;
    let name = train_dir(task);
    let dir = work.join(&name);
    let (_, prep_hash) = require_stage(work, PREPARE)?;
    let upstream: BTreeMap<String, String> = [(PREPARE.to_string(), prep_hash)].into();
    let section = cfg.train_section(task);
    let echo = serde_json::json!({ "task": task, "train": section, "model": cfg.model });
    let inputs = BTreeMap::new();
    let key = stage_key(&name, cfg.seed, &echo, &inputs, &upstream);
    if is_current(work, &dir, &key)? {
        return Ok(skipped(&name, dir));
    }

    let prep = work.join(PREPARE);
    let specs = read_manifest(&prep)?;
    let lex = cfg.lexicon()?;
    let (classes, labels) = label_space(task, &specs, &lex)?;
    let examples = load_examples(&prep, &specs, &labels)?;
    let tcfg = section.train_config(task, derive_seed(cfg.seed, &["train", task.name()]));
    let (train_set, val_set) = split_dataset(&examples, &classes, tcfg.split_fraction, derive_seed(cfg.seed, &["split", task.name()]))?;
    let shape = examples.first().ok_or(crate::trainer::TrainError::EmptyDataset)?.x.dim();
    let mut model = Model::new(
        cfg.model.model_config(shape, classes.len())?,
        derive_seed(cfg.seed, &["init", task.name()]),
    )?;
    model.set_input_norm(input_norm(&train_set));
    log::info!(
        "{name}: {} classes, {} train / {} validation clips, {} parameters",
        classes.len(),
        train_set.len(),
        val_set.len(),
        model.param_count()
    );
    let (best, record) = fit_network(model, &train_set, &val_set, &tcfg)?;

    fresh_dir(&dir)?;
    record.write(&dir, &tcfg)?;
    let tokens = |xs: &[Example]| xs.iter().map(|e| e.token_id.clone()).collect::<BTreeSet<_>>();
    let split = serde_json::json!({ "train_tokens": tokens(&train_set), "val_tokens": tokens(&val_set) });
    write_atomic(&dir.join("split.json"), &serde_json::to_vec_pretty(&split).unwrap())?;
    let lineage = lineage_value(cfg, &upstream);
    save_checkpoint(
        dir.join(CHECKPOINT),
        &best,
        serde_json::json!({ "task": task, "classes": classes, "lineage": lineage }),
    )?;
    let b = record.best();
    let notes = serde_json::json!({
        "classes": classes.len(),
        "best_epoch": record.best_epoch,
        "stopped_epoch": record.stopped_epoch,
        "best_val_acc": b.val_acc,
    });
    let outputs: Vec<String> = [CHECKPOINT, "curve.csv", "summary.json", "split.json"].map(String::from).to_vec();
    finish(cfg, &name, &dir, key, echo, inputs, upstream, &outputs, notes)?;
    Ok(StageOutcome {
        stage: name,
        dir,
        skipped: false,
        summary: format!(
            "best epoch {} of {}: train acc {:.3}, val acc {:.3}",
            record.best_epoch, record.stopped_epoch, b.train_acc, b.val_acc
        ),
    })
}

// ---------------------------------------------------------------- extract

/// Penultimate features of every clip. With a checkpoint the source is read
/// from its metadata unless `source` is given; without one a randomly
/// initialised network of the configured architecture is used.
pub fn extract(cfg: &PipelineConfig, checkpoint: Option<&Path>, source: Option<Source>) -> Result<StageOutcome> {
    let work = &cfg.paths.workdir;
    let (_, prep_hash) = require_stage(work, PREPARE)?;
    let mut upstream: BTreeMap<String, String> = [(PREPARE.to_string(), prep_hash)].into();
    let mut inputs = BTreeMap::new();
    let mut loaded = None;
    let source = match checkpoint {
        Some(ck) => {
            if !ck.is_file() {
                return Err(PipelineError::Argument(format!("checkpoint {} does not exist", ck.display())));
            }
            inputs.insert("checkpoint".to_string(), sha256_file(ck)?);
            if let Some(parent) = ck.parent() {
                if record_path(parent).exists() && parent.parent().is_some_and(|p| same_dir(p, work)) {
                    let name = parent.file_name().unwrap().to_string_lossy().to_string();
                    let (_, h) = require_stage(work, &name)?;
                    upstream.insert(name, h);
                }
            }
            let (model, meta) = load_checkpoint(ck)?;
            let from_meta = meta["task"].as_str().and_then(|t| t.parse::<Source>().ok());
            let s = source.or(from_meta).ok_or_else(|| {
                PipelineError::Argument(format!("cannot tell which network {} is; pass a source", ck.display()))
            })?;
            loaded = Some(model);
            s
        }
        None => source.unwrap_or(Source::RandomControl),
    };
    if loaded.is_none() && source != Source::RandomControl {
        return Err(PipelineError::Argument(format!("the {source} source needs a checkpoint")));
    }
    let name = extract_dir(source);
    let dir = work.join(&name);
    let echo = match loaded {
        Some(_) => serde_json::json!({ "source": source }),
        None => serde_json::json!({ "source": source, "model": cfg.model }),
    };
    let key = stage_key(&name, cfg.seed, &echo, &inputs, &upstream);
    if is_current(work, &dir, &key)? {
        return Ok(skipped(&name, dir));
    }

    let prep = work.join(PREPARE);
    let specs = read_manifest(&prep)?;
    let lex = cfg.lexicon()?;
    let model = match loaded {
        Some(m) => m,
        None => {
            let (classes, labels) = label_space(Task::Dorsal, &specs, &lex)?;
            let examples = load_examples(&prep, &specs, &labels)?;
            let shape = examples.first().ok_or(crate::trainer::TrainError::EmptyDataset)?.x.dim();
            let mut m = Model::new(
                cfg.model.model_config(shape, classes.len())?,
                derive_seed(cfg.seed, &["init", "random-control"]),
            )?;
            m.set_input_norm(input_norm(&examples));
            m
        }
    };
    let records: Vec<FeatureRecord> = specs
        .par_iter()
        .map(|s| {
            let c = read_cochleagram(&cochleagram_path(&prep, s))?;
            let v = model.penultimate_features(c.values.view())?;
            Ok(FeatureRecord {
                vector: v.iter().map(|&x| x as f32).collect(),
                word: s.word.clone(),
                token_id: s.token_id.clone(),
                clip_index: s.clip_index,
                labels: ProbeLabels::of_entry(lex.get(&s.word)?),
            })
        })
        .collect::<Result<_>>()?;

    fresh_dir(&dir)?;
    let info = serde_json::json!({
        "source": source,
        "checkpoint": inputs.get("checkpoint"),
        "lineage": lineage_value(cfg, &upstream),
    });
    write_features(&dir.join(FEATURES), &records, info)?;
    let outputs = vec![FEATURES.to_string(), "features.json".to_string()];
    let notes = serde_json::json!({ "clips": records.len(), "dim": records.first().map_or(0, |r| r.vector.len()) });
    finish(cfg, &name, &dir, key, echo, inputs, upstream, &outputs, notes)?;
    Ok(StageOutcome {
        stage: name,
        dir,
        skipped: false,
        summary: format!("{} feature vectors from the {source} network", records.len()),
    })
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

// ---------------------------------------------------------------- probe

pub fn probe(cfg: &PipelineConfig, task: ProbeTask, features: &Path) -> Result<StageOutcome> {
    let work = &cfg.paths.workdir;
    if !features.is_file() {
        return Err(PipelineError::Argument(format!("features {} do not exist", features.display())));
    }
    let mut upstream = BTreeMap::new();
    if let Some(parent) = features.parent() {
        if record_path(parent).exists() && parent.parent().is_some_and(|p| same_dir(p, work)) {
            let name = parent.file_name().unwrap().to_string_lossy().to_string();
            let (_, h) = require_stage(work, &name)?;
            upstream.insert(name, h);
        }
    }
    let (records, info) = read_features(features)?;
    let source: Source = info["source"]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PipelineError::Argument(format!("{} does not name its source network", features.display())))?;
    let inputs: BTreeMap<String, String> = [("features".to_string(), sha256_file(features)?)].into();
    let per_class = cfg.probe.per_class(task);
    let name = probe_dir(source, task);
    let dir = work.join(&name);
    let echo = serde_json::json!({ "task": task, "source": source, "exemplars_per_class": per_class });
    let key = stage_key(&name, cfg.seed, &echo, &inputs, &upstream);
    if is_current(work, &dir, &key)? {
        return Ok(skipped(&name, dir));
    }

    let result = run_probe(task, source, &records, per_class, derive_seed(cfg.seed, &["probe", task.name()]))?;
    fresh_dir(&dir)?;
    let doc = serde_json::json!({ "result": result, "lineage": lineage_value(cfg, &upstream) });
    write_atomic(&dir.join("result.json"), &serde_json::to_vec_pretty(&doc).unwrap())?;
    crate::probes::append_results(&work.join(PROBES_CSV), std::slice::from_ref(&result))?;
    let summary = format!(
        "{task} from {source}: accuracy {:.3} (chance {:.3}, n_test {})",
        result.accuracy, result.chance, result.n_test
    );
    let notes = serde_json::to_value(&result).unwrap();
    finish(cfg, &name, &dir, key, echo, inputs, upstream, &["result.json".to_string()], notes)?;
    Ok(StageOutcome {
        stage: name,
        dir,
        skipped: false,
        summary,
    })
}

pub fn read_probe_result(dir: &Path) -> Result<ProbeResult> {
    let p = dir.join("result.json");
    let bytes = std::fs::read(&p).map_err(|e| PipelineError::io(&p, e))?;
    let doc: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Report(format!("{}: {e}", p.display())))?;
    serde_json::from_value(doc["result"].clone()).map_err(|e| PipelineError::Report(format!("{}: {e}", p.display())))
}

// ---------------------------------------------------------------- report

fn read_train_record(dir: &Path) -> Result<TrainRecord> {
    let bad = |p: &Path, e: String| PipelineError::Report(format!("{}: {e}", p.display()));
    let curve = dir.join("curve.csv");
    let text = std::fs::read_to_string(&curve).map_err(|e| PipelineError::io(&curve, e))?;
    let epochs = TrainRecord::from_csv(&text).map_err(|e| bad(&curve, e.to_string()))?;
    let sp = dir.join("summary.json");
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&sp).map_err(|e| PipelineError::io(&sp, e))?).map_err(|e| bad(&sp, e.to_string()))?;
    let epoch = |k: &str| {
        summary[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| bad(&sp, format!("missing {k}")))
    };
    Ok(TrainRecord {
        epochs,
        best_epoch: epoch("best_epoch")?,
        stopped_epoch: epoch("stopped_epoch")?,
        stop_reason: serde_json::from_value(summary["stop_reason"].clone()).map_err(|e| bad(&sp, format!("stop_reason: {e}")))?,
    })
}

/// Aggregate whatever training and probe stages have run into
/// `metrics.json` and the figures.
pub fn report(cfg: &PipelineConfig) -> Result<(StageOutcome, Metrics)> {
    let work = &cfg.paths.workdir;
    let dir = work.join(REPORT);
    let mut upstream = BTreeMap::new();
    let mut trained = Vec::new();
    for task in [Task::Dorsal, Task::Ventral] {
        let name = train_dir(task);
        if record_path(&work.join(&name)).exists() {
            let (rec, h) = require_stage(work, &name)?;
            upstream.insert(name, h);
            trained.push((task, rec));
        }
    }
    let mut probe_dirs = Vec::new();
    for source in Source::ALL {
        for task in ProbeTask::ALL {
            let name = probe_dir(source, task);
            if record_path(&work.join(&name)).exists() {
                let (_, h) = require_stage(work, &name)?;
                upstream.insert(name.clone(), h);
                probe_dirs.push(name);
            }
        }
    }
    if upstream.is_empty() {
        return Err(PipelineError::Lineage(format!(
            "nothing to report in {}: run train or probe first",
            work.display()
        )));
    }
    let echo = serde_json::Value::Null;
    let inputs = BTreeMap::new();
    let key = stage_key(REPORT, cfg.seed, &echo, &inputs, &upstream);
    if is_current(work, &dir, &key)? {
        let p = dir.join("metrics.json");
        let m = serde_json::from_slice(&std::fs::read(&p).map_err(|e| PipelineError::io(&p, e))?)
            .map_err(|e| PipelineError::Report(format!("{}: {e}", p.display())))?;
        return Ok((skipped(REPORT, dir), m));
    }

    fresh_dir(&dir)?;
    let mut figures: Vec<FigureSummary> = Vec::new();
    let mut training = Vec::new();
    for (task, rec) in &trained {
        let record = read_train_record(&work.join(train_dir(*task)))?;
        let n_classes = rec.notes["classes"].as_u64().unwrap_or(0) as usize;
        figures.push(learning_curve_figure(&dir, &format!("fig2_{}", task.name()), task.name(), &record.epochs)?);
        training.push(TrainingSummary::new(task.name(), n_classes, &record));
    }
    let results: Vec<ProbeResult> = probe_dirs
        .iter()
        .map(|n| read_probe_result(&work.join(n)))
        .collect::<Result<_>>()?;
    if !results.is_empty() {
        figures.push(probe_figure(&dir, "fig3_probes", &results)?);
    }
    let metrics = Metrics {
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        upstream: upstream.clone(),
        training,
        probes: results.into_iter().map(ProbeSummary::from).collect(),
        figures: figures.iter().map(FigureEntry::from).collect(),
    };
    write_atomic(&dir.join("metrics.json"), &serde_json::to_vec_pretty(&metrics).unwrap())?;
    let mut outputs = vec!["metrics.json".to_string()];
    for f in &metrics.figures {
        outputs.extend(f.files.iter().cloned());
    }
    let notes = serde_json::json!({ "figures": metrics.figures.len(), "probes": metrics.probes.len() });
    finish(cfg, REPORT, &dir, key, echo, inputs, upstream, &outputs, notes)?;
    let summary = format!(
        "{} training curve(s), {} probe result(s), {} figure(s)",
        metrics.training.len(),
        metrics.probes.len(),
        metrics.figures.len()
    );
    Ok((
        StageOutcome {
            stage: REPORT.into(),
            dir,
            skipped: false,
            summary,
        },
        metrics,
    ))
}

pub fn verify(cfg: &PipelineConfig) -> Result<Verification> {
    let work = &cfg.paths.workdir;
    if !work.is_dir() {
        return Err(PipelineError::Argument(format!("workdir {} does not exist", work.display())));
    }
    let (stages, problems) = verify_workdir(work)?;
    Ok(Verification { stages, problems })
}

/// Every stage in order: prepare, both networks, the three feature sets,
/// all probes, report.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    let work = &cfg.paths.workdir;
    let mut out = vec![prepare(cfg)?];
    for task in [Task::Dorsal, Task::Ventral] {
        out.push(train(cfg, task)?);
    }
    for task in [Task::Dorsal, Task::Ventral] {
        let ck = work.join(train_dir(task)).join(CHECKPOINT);
        out.push(extract(cfg, Some(&ck), None)?);
    }
    out.push(extract(cfg, None, Some(Source::RandomControl))?);
    for source in Source::ALL {
        let features = work.join(extract_dir(source)).join(FEATURES);
        for task in ProbeTask::ALL {
            out.push(probe(cfg, task, &features)?);
        }
    }
    out.push(report(cfg)?.0);
    Ok(out)
}
