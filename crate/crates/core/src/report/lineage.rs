//! Per-stage lineage records.
//!
//! Every stage directory holds a `stage.json` listing the hash of each file
//! the stage wrote, the hash of each upstream `stage.json` it consumed and a
//! key summarising its inputs. A stage whose key is unchanged and whose
//! outputs and upstreams still hash the same is skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::store::{sha256_file, sha256_hex, write_atomic};

use super::{PipelineError, Result};

pub const RECORD_FILE: &str = "stage.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub tool_version: String,
    /// Hash of the full pipeline config at the time of the run.
    pub config_hash: String,
    pub seed: u64,
    /// Hash of the stage-relevant config, inputs and upstreams.
    pub key: String,
    /// Stage-relevant config echo.
    pub config: serde_json::Value,
    /// External input files and their hashes.
    pub inputs: BTreeMap<String, String>,
    /// Upstream stage directory name -> hash of its `stage.json`.
    pub upstream: BTreeMap<String, String>,
    /// Path relative to the stage directory -> content hash.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: serde_json::Value,
}

/// Recursively sort object keys so hashes do not depend on map order.
pub fn canonical_json(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(m) => {
            let sorted: BTreeMap<&String, serde_json::Value> = m.iter().map(|(k, v)| (k, canonical_json(v))).collect();
            let mut out = serde_json::Map::new();
            for (k, v) in sorted {
                out.insert(k.clone(), v);
            }
            serde_json::Value::Object(out)
        }
        serde_json::Value::Array(xs) => serde_json::Value::Array(xs.iter().map(canonical_json).collect()),
        other => other.clone(),
    }
}

pub fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(&canonical_json(v)).expect("json serializes"))
}

/// Key over everything that determines a stage's outputs.
pub fn stage_key(
    stage: &str,
    seed: u64,
    config: &serde_json::Value,
    inputs: &BTreeMap<String, String>,
    upstream: &BTreeMap<String, String>,
) -> String {
    hash_json(&serde_json::json!({
        "stage": stage,
        "tool_version": TOOL_VERSION,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "upstream": upstream,
    }))
}

pub fn record_path(dir: &Path) -> PathBuf {
    dir.join(RECORD_FILE)
}

pub fn read_record(dir: &Path) -> Result<Option<StageRecord>> {
    let p = record_path(dir);
    if !p.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&p).map_err(|e| PipelineError::io(&p, e))?;
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| PipelineError::Lineage(format!("{}: {e}", p.display())))
}

pub fn record_hash(dir: &Path) -> Result<String> {
    Ok(sha256_file(&record_path(dir))?)
}

pub fn write_record(dir: &Path, rec: &StageRecord) -> Result<String> {
    let bytes = serde_json::to_vec_pretty(rec).expect("record serializes");
    write_atomic(&record_path(dir), &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Hash the listed files of `dir`, keyed by relative path.
pub fn hash_outputs<S: AsRef<str>>(dir: &Path, rel_paths: &[S]) -> Result<BTreeMap<String, String>> {
    rel_paths
        .iter()
        .map(|r| {
            let r = r.as_ref();
            Ok((r.to_string(), sha256_file(&dir.join(r))?))
        })
        .collect()
}

/// Problems with a stage's own outputs; empty when intact.
pub fn output_problems(dir: &Path, rec: &StageRecord) -> Vec<String> {
    use rayon::prelude::*;
    let mut problems: Vec<String> = rec
        .outputs
        .par_iter()
        .filter_map(|(rel, want)| {
            let p = dir.join(rel);
            match sha256_file(&p) {
                Ok(h) if &h == want => None,
                Ok(_) => Some(format!("{}: content hash changed", p.display())),
                Err(_) => Some(format!("{}: missing", p.display())),
            }
        })
        .collect();
    problems.sort();
    problems
}

/// Problems with the upstream references of a stage.
pub fn upstream_problems(workdir: &Path, dir: &Path, rec: &StageRecord) -> Vec<String> {
    let mut problems = Vec::new();
    for (name, want) in &rec.upstream {
        let up = workdir.join(name);
        match record_hash(&up) {
            Ok(h) if &h == want => {}
            Ok(_) => problems.push(format!(
                "{}: upstream `{name}` was re-run or modified since this stage ran",
                dir.display()
            )),
            Err(_) => problems.push(format!("{}: upstream `{name}` is missing", dir.display())),
        }
    }
    problems
}

/// An upstream stage that must exist with intact outputs; returns its record
/// and the hash to reference it by.
pub fn require_stage(workdir: &Path, name: &str) -> Result<(StageRecord, String)> {
    let dir = workdir.join(name);
    let rec = read_record(&dir)?
        .ok_or_else(|| PipelineError::Lineage(format!("stage `{name}` has not been run in {}", workdir.display())))?;
    let mut problems = output_problems(&dir, &rec);
    problems.extend(upstream_problems(workdir, &dir, &rec));
    if !problems.is_empty() {
        return Err(PipelineError::Lineage(format!(
            "stage `{name}` is stale or was modified:\n  {}",
            problems.join("\n  ")
        )));
    }
    Ok((rec, record_hash(&dir)?))
}

/// True when `dir` already holds a completed run with this key.
pub fn is_current(workdir: &Path, dir: &Path, key: &str) -> Result<bool> {
    let Some(rec) = read_record(dir)? else {
        return Ok(false);
    };
    Ok(rec.key == key && output_problems(dir, &rec).is_empty() && upstream_problems(workdir, dir, &rec).is_empty())
}

/// Check every stage under `workdir`; returns the stages checked and any problems.
pub fn verify_workdir(workdir: &Path) -> Result<(Vec<String>, Vec<String>)> {
    let mut stages = Vec::new();
    let mut problems = Vec::new();
    let entries = std::fs::read_dir(workdir).map_err(|e| PipelineError::io(workdir, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && record_path(p).exists())
        .collect();
    dirs.sort();
    for dir in dirs {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        match read_record(&dir) {
            Ok(Some(rec)) => {
                problems.extend(output_problems(&dir, &rec));
                problems.extend(upstream_problems(workdir, &dir, &rec));
            }
            Ok(None) => {}
            Err(e) => problems.push(e.to_string()),
        }
        stages.push(name);
    }
    Ok((stages, problems))
}
