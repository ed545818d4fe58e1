use std::io::Write;

use peft_forge::finetune::{Algorithm, EpisodeReport};
use peft_forge_cli::store::{read_store, ResultsStore, StoredReport};
use peft_forge_cli::summary::summarize;
use peft_forge_cli::CliError;

fn record(experiment: &str, hash: &str, spec: &str, domain: &str, seed: u64, accuracy: f64) -> StoredReport {
    StoredReport {
        experiment: experiment.into(),
        config_hash: hash.into(),
        report: EpisodeReport {
            spec: spec.into(),
            algorithm: Algorithm::ProtoNcc,
            domain: domain.into(),
            episode_seed: seed,
            num_classes: 5,
            support_size: 25,
            query_size: 50,
            accuracy,
            initial_accuracy: accuracy / 2.0,
            losses: vec![1.0, 0.5],
            setup_secs: 0.1,
            step_secs: vec![0.01, 0.01],
            total_secs: 0.2,
            lr: 1e-3,
            trainable_params: 80,
            backbone_grad_buffers: 0,
        },
    }
}

#[test]
fn hundred_reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/results.jsonl");
    let mut store = ResultsStore::open(&path).unwrap();
    let written: Vec<StoredReport> = (0..100).map(|i| record("e", "h", "ln_tune", "d", i, i as f64 / 100.0)).collect();
    for r in &written {
        store.append(r).unwrap();
    }
    let back = read_store(&path).unwrap();
    assert_eq!(back.records, written);
    assert!(back.malformed.is_empty());
}

#[test]
fn truncated_final_line_is_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let mut store = ResultsStore::open(&path).unwrap();
    for i in 0..100 {
        store.append(&record("e", "h", "ln_tune", "d", i, 0.5)).unwrap();
    }
    drop(store);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
    let back = read_store(&path).unwrap();
    assert_eq!(back.records.len(), 99);
    assert_eq!(back.malformed, vec![100]);
}

#[test]
fn appends_continue_an_existing_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    ResultsStore::open(&path).unwrap().append(&record("e", "h", "a", "d", 0, 0.1)).unwrap();
    ResultsStore::open(&path).unwrap().append(&record("e", "h", "a", "d", 1, 0.2)).unwrap();
    assert_eq!(read_store(&path).unwrap().records.len(), 2);
}

#[test]
fn hash_mismatch_within_an_experiment_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    let mut store = ResultsStore::open(&path).unwrap();
    store.append(&record("e", "aaaa", "a", "d", 0, 0.1)).unwrap();
    store.append(&record("other", "bbbb", "a", "d", 0, 0.1)).unwrap();
    store.append(&record("e", "cccc", "a", "d", 1, 0.1)).unwrap();
    let err = read_store(&path).unwrap_err();
    assert!(matches!(err, CliError::Integrity(_)), "{err}");
    assert_eq!(err.category(), "integrity");
}

#[test]
fn unwritable_path_fails_at_open() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::File::create(&blocker).unwrap().write_all(b"x").unwrap();
    let err = ResultsStore::open(blocker.join("results.jsonl")).err().expect("open must fail");
    assert_eq!(err.category(), "io");
}

#[test]
fn summary_has_one_row_per_method() {
    let mut records = Vec::new();
    for (spec, base) in [("ln_tune", 0.8), ("attn_scale", 0.6)] {
        for i in 0..10 {
            records.push(record("e", "h", spec, "synth", i, base + i as f64 / 100.0));
        }
    }
    let t = summarize(&records);
    assert_eq!(t.domains, ["synth"]);
    assert_eq!(t.rows.len(), 2);
    let ln = t.rows.iter().find(|r| r.spec == "ln_tune").unwrap();
    let m = ln.cells[0].unwrap();
    assert_eq!(m.n, 10);
    assert!((m.mean - 0.845).abs() < 1e-12 && m.ci95 > 0.0);
    let csv = t.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "experiment,spec,algorithm,synth_mean,synth_ci95,synth_n");
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 6 && !l.contains(",,")));
}

#[test]
fn missing_domain_cells_are_empty() {
    let records = vec![record("e", "h", "a", "d1", 0, 0.5), record("e", "h", "b", "d2", 0, 0.5)];
    let t = summarize(&records);
    assert_eq!(t.domains, ["d1", "d2"]);
    assert!(t.rows[0].cells[1].is_none() && t.rows[1].cells[0].is_none());
}
