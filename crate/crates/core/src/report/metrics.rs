//! `metrics.json`: training curves and probe results in one document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::probes::ProbeResult;
use crate::trainer::{EpochRecord, StopReason, TrainRecord};

use super::figures::FigureSummary;

/// JSON Schema (draft 2020-12) that every `metrics.json` conforms to.
pub const METRICS_SCHEMA: &str = include_str!("../../data/metrics.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub network: String,
    pub n_classes: usize,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
    pub best: EpochRecord,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingSummary {
    pub fn new(network: &str, n_classes: usize, record: &TrainRecord) -> TrainingSummary {
        TrainingSummary {
            network: network.to_string(),
            n_classes,
            best_epoch: record.best_epoch,
            stopped_epoch: record.stopped_epoch,
            stop_reason: record.stop_reason,
            best: *record.best(),
            epochs: record.epochs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    #[serde(flatten)]
    pub result: ProbeResult,
    pub chance_low: f64,
    pub chance_high: f64,
    /// Accuracy above the upper end of the chance interval.
    pub above_chance: bool,
}

impl From<ProbeResult> for ProbeSummary {
    fn from(result: ProbeResult) -> Self {
        let (lo, hi) = result.chance_interval();
        ProbeSummary {
            above_chance: result.accuracy > hi,
            chance_low: lo,
            chance_high: hi,
            result,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureEntry {
    pub name: String,
    pub series: Vec<String>,
    pub groups: Vec<String>,
    pub bars: usize,
    pub lines: usize,
    pub chance_lines: usize,
    /// File names relative to the report directory.
    pub files: Vec<String>,
    pub rendered: bool,
}

impl From<&FigureSummary> for FigureEntry {
    fn from(f: &FigureSummary) -> Self {
        FigureEntry {
            name: f.name.clone(),
            series: f.series.clone(),
            groups: f.groups.clone(),
            bars: f.bars,
            lines: f.lines,
            chance_lines: f.chance_lines,
            files: f
                .files
                .iter()
                .map(|p| p.file_name().unwrap_or_default().to_string_lossy().to_string())
                .collect(),
            rendered: f.rendered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub upstream: BTreeMap<String, String>,
    pub training: Vec<TrainingSummary>,
    pub probes: Vec<ProbeSummary>,
    pub figures: Vec<FigureEntry>,
}
