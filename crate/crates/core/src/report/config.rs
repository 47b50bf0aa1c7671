//! Pipeline configuration.
//!
//! One TOML file, overridable per key. Precedence is flag > environment >
//! file: `--set section.key=value` beats `DUALLEX_SECTION__KEY=value`, which
//! beats the file. Relative paths are resolved against the config file's
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, DEFAULT_BABBLE_TALKERS, DEFAULT_TARGET_RMS};
use crate::cochlea::CochleaParams;
use crate::network::{ModelConfig, Widths, DORSAL_HEAD, VENTRAL_HEAD};
use crate::probes::ProbeTask;
use crate::trainer::{Task, TrainConfig, DEFAULT_MIN_DELTA, DEFAULT_PATIENCE};

use super::lineage::hash_json;
use super::{PipelineError, Result};

pub const ENV_PREFIX: &str = "DUALLEX_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub cochlea: CochleaParams,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub dorsal: TrainSection,
    #[serde(default)]
    pub ventral: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `tokens.tsv` and the audio it references.
    pub corpus: PathBuf,
    /// Defaults to `<corpus>/noise`.
    #[serde(default)]
    pub noise: Option<PathBuf>,
    /// Defaults to the bundled lexicon.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub target_rms: f64,
    pub babble_tracks: usize,
    pub babble_talkers: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            target_rms: DEFAULT_TARGET_RMS,
            babble_tracks: 4,
            babble_talkers: DEFAULT_BABBLE_TALKERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// The full-size network; the head must be 178 (dorsal) or 10 (ventral).
    Canonical,
    /// Same layer stack with configurable widths and any head size.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub conv_widths: [usize; 5],
    pub dense_units: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::Canonical,
            conv_widths: Widths::CANONICAL.conv,
            dense_units: Widths::CANONICAL.dense,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, input: (usize, usize), head_size: usize) -> crate::network::Result<ModelConfig> {
        match self.architecture {
            Architecture::Canonical => {
                if input != (crate::cochlea::N_FILTERS, crate::cochlea::N_FRAMES) {
                    return Err(crate::network::NetworkError::Config(format!(
                        "the canonical architecture expects {}x{} cochleagrams, got {}x{}",
                        crate::cochlea::N_FILTERS,
                        crate::cochlea::N_FRAMES,
                        input.0,
                        input.1
                    )));
                }
                if head_size != DORSAL_HEAD && head_size != VENTRAL_HEAD {
                    return Err(crate::network::NetworkError::Config(format!(
                        "the canonical architecture needs {DORSAL_HEAD} words or {VENTRAL_HEAD} domains, the corpus has {head_size} classes; use architecture = \"scaled\" for smaller corpora"
                    )));
                }
                ModelConfig::canonical(head_size)
            }
            Architecture::Scaled => ModelConfig::scaled(
                input,
                Widths {
                    conv: self.conv_widths,
                    dense: self.dense_units,
                },
                head_size,
            ),
        }
    }
}

/// `TrainConfig` without the task and seed, which the pipeline supplies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub split_fraction: f64,
    pub class_balanced: bool,
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(Task::Dorsal);
        TrainSection {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: DEFAULT_PATIENCE,
            min_delta: DEFAULT_MIN_DELTA,
            split_fraction: t.split_fraction,
            class_balanced: t.class_balanced,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, task: Task, seed: u64) -> TrainConfig {
        TrainConfig {
            task,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_delta: self.min_delta,
            split_fraction: self.split_fraction,
            seed,
            class_balanced: self.class_balanced,
            stop_at_train_accuracy: self.stop_at_train_accuracy,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Exemplars per class for every task; unset means the full-scale counts.
    pub exemplars_per_class: Option<usize>,
    /// Per-task overrides, keyed by task name.
    pub exemplars: BTreeMap<String, usize>,
}

impl ProbeSection {
    pub fn per_class(&self, task: ProbeTask) -> usize {
        self.exemplars
            .get(task.name())
            .copied()
            .or(self.exemplars_per_class)
            .unwrap_or_else(|| task.exemplars_per_class())
    }
}

impl PipelineConfig {
    /// A config for `corpus` and `workdir` with every other value at its default.
    pub fn new(corpus: impl Into<PathBuf>, workdir: impl Into<PathBuf>, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            paths: Paths {
                corpus: corpus.into(),
                noise: None,
                lexicon: None,
                workdir: workdir.into(),
            },
            augment: AugmentSection::default(),
            cochlea: CochleaParams::default(),
            model: ModelSection::default(),
            dorsal: TrainSection::default(),
            ventral: TrainSection::default(),
            probe: ProbeSection::default(),
        }
    }

    /// Load `path`, apply environment then flag overrides, resolve relative
    /// paths and validate.
    pub fn load(
        path: &Path,
        env: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut tree: toml::Table =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in env_overrides(env) {
            apply_override(&mut tree, &k, &v)?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{s}` is not key=value")))?;
            apply_override(&mut tree, k.trim(), v.trim())?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.workdir);
        if let Some(p) = self.paths.noise.as_mut() {
            fix(p);
        }
        if let Some(p) = self.paths.lexicon.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (what, p) in [
            ("corpus", Some(self.paths.corpus.clone())),
            ("noise", Some(self.noise_dir())),
            ("lexicon", self.paths.lexicon.clone()),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("paths.{what}: {} does not exist", p.display()));
                }
            }
        }
        if !(self.augment.target_rms > 0.0 && self.augment.target_rms.is_finite()) {
            return bad("augment.target_rms must be positive".into());
        }
        if self.augment.babble_tracks == 0 || self.augment.babble_talkers == 0 {
            return bad("augment.babble_tracks and augment.babble_talkers must be positive".into());
        }
        if self.cochlea.clip_seconds != crate::augment::CLIP_SECONDS {
            return bad(format!("cochlea.clip_seconds must be {}", crate::augment::CLIP_SECONDS));
        }
        crate::cochlea::Filterbank::new(self.cochlea).map_err(|e| PipelineError::Config(format!("cochlea: {e}")))?;
        for (task, t) in [(Task::Dorsal, &self.dorsal), (Task::Ventral, &self.ventral)] {
            t.train_config(task, self.seed)
                .validate()
                .map_err(|e| PipelineError::Config(format!("{}: {e}", task.name())))?;
        }
        for k in self.probe.exemplars.keys() {
            if k.parse::<ProbeTask>().is_err() {
                return bad(format!("probe.exemplars: unknown task `{k}`"));
            }
        }
        if ProbeTask::ALL.iter().any(|&t| self.probe.per_class(t) == 0) {
            return bad("probe exemplar counts must be positive".into());
        }
        Ok(())
    }

    pub fn noise_dir(&self) -> PathBuf {
        self.paths.noise.clone().unwrap_or_else(|| self.paths.corpus.join("noise"))
    }

    pub fn tokens_path(&self) -> PathBuf {
        self.paths.corpus.join("tokens.tsv")
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            sample_rate: self.cochlea.sample_rate,
            target_rms: self.augment.target_rms,
        }
    }

    pub fn train_section(&self, task: Task) -> &TrainSection {
        match task {
            Task::Dorsal => &self.dorsal,
            Task::Ventral => &self.ventral,
        }
    }

    pub fn lexicon(&self) -> Result<crate::lexicon::Lexicon> {
        match &self.paths.lexicon {
            Some(p) => Ok(crate::lexicon::Lexicon::load(p)?),
            None => Ok(crate::lexicon::Lexicon::bundled()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// `DUALLEX_SECTION__KEY=v` becomes `("section.key", v)`.
pub fn env_overrides(env: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.is_empty() || rest == "LOG" {
                return None;
            }
            Some((rest.to_ascii_lowercase().replace("__", "."), v))
        })
        .collect();
    out.sort();
    out
}

/// Set a dotted key. The value is parsed as a TOML literal when possible and
/// taken as a string otherwise.
pub fn apply_override(tree: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = parse_value(raw);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
