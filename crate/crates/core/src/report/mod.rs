//! Pipeline orchestration: configuration, stage lineage, the stages
//! themselves and the figures and metrics they end in.
//!
//! All stages read and write under the configured workdir:
//!
//! ```text
//! prepare/          manifest.jsonl, errors.json, clips/*.wav, coch/*.f32 + .json
//! train_<task>/     model.ckpt, curve.csv, summary.json, split.json
//! extract_<source>/ features.f32 + .json
//! probe_<source>_<task>/ result.json
//! probes.csv        every probe result, appended
//! report/           metrics.json, fig2_<task>.{csv,svg,png}, fig3_probes.{csv,svg,png}
//! ```
//!
//! Each stage directory also holds `stage.json`; see [`lineage`].

use std::path::Path;

use thiserror::Error;

pub mod config;
pub mod figures;
pub mod lineage;
pub mod metrics;
pub mod stages;

pub use config::PipelineConfig;
pub use figures::FigureSummary;
pub use stages::{StageOutcome, Verification};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("lineage error: {0}")]
    Lineage(String),
    #[error("{count} input file(s) could not be processed; see {report}")]
    PrepareFailed { count: usize, report: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Lexicon(#[from] crate::lexicon::LexiconError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Cochlea(#[from] crate::cochlea::CochleaError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
    #[error(transparent)]
    Probe(#[from] crate::probes::ProbeError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Wav(#[from] crate::wav::WavError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> PipelineError {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
