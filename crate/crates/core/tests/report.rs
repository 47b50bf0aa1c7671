use std::collections::BTreeMap;
use std::path::Path;

use duallex::probes::{ProbeResult, ProbeTask, Source};
use duallex::report::config::PipelineConfig;
use duallex::report::lineage::{hash_outputs, write_record, StageRecord, TOOL_VERSION};
use duallex::report::metrics::METRICS_SCHEMA;
use duallex::report::stages::{probe_dir, report, train_dir, verify};
use duallex::report::PipelineError;
use duallex::trainer::{EpochRecord, StopReason, Task, TrainConfig, TrainRecord};

fn record(stage: &str, dir: &Path, outputs: &[&str], notes: serde_json::Value) {
    let rec = StageRecord {
        stage: stage.into(),
        tool_version: TOOL_VERSION.into(),
        config_hash: "0".repeat(64),
        seed: 5,
        key: stage.into(),
        config: serde_json::Value::Null,
        inputs: BTreeMap::new(),
        upstream: BTreeMap::new(),
        outputs: hash_outputs(dir, outputs).unwrap(),
        notes,
    };
    write_record(dir, &rec).unwrap();
}

/// Workdir with two trained networks and all eight dorsal/ventral probes.
fn fake_workdir(work: &Path) {
    for (task, classes) in [(Task::Dorsal, 12), (Task::Ventral, 5)] {
        let dir = work.join(train_dir(task));
        std::fs::create_dir_all(&dir).unwrap();
        let epochs: Vec<EpochRecord> = (1..=6)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 2.0 / e as f64,
                train_acc: 0.15 * e as f64,
                val_loss: 2.2 / e as f64,
                val_acc: 0.1 * e as f64,
            })
            .collect();
        let rec = TrainRecord {
            epochs,
            best_epoch: 6,
            stopped_epoch: 6,
            stop_reason: StopReason::MaxEpochs,
        };
        rec.write(&dir, &TrainConfig::new(task)).unwrap();
        record(&train_dir(task), &dir, &["curve.csv", "summary.json"], serde_json::json!({ "classes": classes }));
    }
    for source in [Source::Dorsal, Source::Ventral] {
        for task in ProbeTask::ALL {
            let dir = work.join(probe_dir(source, task));
            std::fs::create_dir_all(&dir).unwrap();
            let r = ProbeResult {
                task: task.name().into(),
                source: source.name().into(),
                accuracy: if source == Source::Dorsal { 0.8 } else { 0.3 },
                chance: task.chance(),
                n_train: 80,
                n_test: 20,
                seed: 5,
                split: "word".into(),
                lambda: 0.01,
            };
            std::fs::write(dir.join("result.json"), serde_json::to_vec(&serde_json::json!({ "result": r })).unwrap()).unwrap();
            record(&probe_dir(source, task), &dir, &["result.json"], serde_json::Value::Null);
        }
    }
}

#[test]
fn metrics_validate_against_the_schema_and_figures_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(dir.path().join("corpus"), dir.path().join("work"), 5);
    fake_workdir(&cfg.paths.workdir);

    let (outcome, metrics) = report(&cfg).unwrap();
    assert!(!outcome.skipped);
    let text = std::fs::read_to_string(outcome.dir.join("metrics.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let schema: serde_json::Value = serde_json::from_str(METRICS_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    assert_eq!(metrics.training.len(), 2);
    assert_eq!(metrics.probes.len(), 8);
    assert_eq!(metrics.seed, 5);
    assert_eq!(metrics.upstream.len(), 10);
    let fig3 = metrics.figures.iter().find(|f| f.name == "fig3_probes").unwrap();
    assert_eq!((fig3.bars, fig3.chance_lines), (8, 4));
    assert_eq!(fig3.series, vec!["dorsal", "ventral"]);
    assert_eq!(metrics.figures.iter().filter(|f| f.name.starts_with("fig2_")).count(), 2);
    for f in &metrics.figures {
        for file in &f.files {
            assert!(outcome.dir.join(file).exists(), "{file}");
        }
    }
    assert!(metrics.probes.iter().filter(|p| p.result.source == "dorsal").all(|p| p.above_chance));

    let (again, _) = report(&cfg).unwrap();
    assert!(again.skipped);
    assert!(verify(&cfg).unwrap().problems.is_empty());

    // a modified upstream result is a lineage error, not a silent re-report
    let p = cfg.paths.workdir.join(probe_dir(Source::Ventral, ProbeTask::Onset)).join("result.json");
    let mut doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    doc["result"]["accuracy"] = serde_json::json!(0.99);
    std::fs::write(&p, serde_json::to_vec(&doc).unwrap()).unwrap();
    assert!(matches!(report(&cfg), Err(PipelineError::Lineage(_))));
    assert_eq!(verify(&cfg).unwrap().problems.len(), 1);
}

#[test]
fn schema_rejects_malformed_metrics() {
    let schema: serde_json::Value = serde_json::from_str(METRICS_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let good = serde_json::json!({
        "tool_version": "0.1.0",
        "config_hash": "a".repeat(64),
        "seed": 1,
        "upstream": {},
        "training": [],
        "probes": [{
            "task": "onset", "source": "dorsal", "accuracy": 0.5, "chance": 0.2,
            "n_train": 8, "n_test": 2, "seed": 1, "split": "word", "lambda": 0.01,
            "chance_low": 0.0, "chance_high": 0.4, "above_chance": true
        }],
        "figures": []
    });
    assert!(validator.is_valid(&good));
    for (path, value) in [
        ("/probes/0/accuracy", serde_json::json!(1.5)),
        ("/probes/0/task", serde_json::json!("colour")),
        ("/probes/0/split", serde_json::json!("clip")),
        ("/config_hash", serde_json::json!("xyz")),
    ] {
        let mut bad = good.clone();
        *bad.pointer_mut(path).unwrap() = value;
        assert!(!validator.is_valid(&bad), "{path}");
    }
    let mut bad = good.clone();
    bad.as_object_mut().unwrap().remove("probes");
    assert!(!validator.is_valid(&bad));
}
