use std::path::Path;
use std::sync::Arc;

use ragrank_core::config::AppConfig;
use ragrank_core::embedding::HashingEmbedder;
use ragrank_core::evaluation::{load_dataset, EvalInstance, Pipeline, SweepSpec};
use ragrank_core::generation::{MockBackend, RecordStatus};
use ragrank_core::provenance::{replay, ProvenanceEvent, ProvenanceLog};
use ragrank_core::synthetic::{write_planted_set, SyntheticSet, SyntheticSpec};
use ragrank_core::tokenizer::WhitespaceCounter;
use ragrank_core::{normalize_text, VectorStore};
use serde_json::Value;

fn planted(dir: &Path, n: usize, seed: u64) -> SyntheticSet {
    write_planted_set(dir, &SyntheticSpec { instances: n, seed, ..Default::default() }).unwrap()
}

fn mock_pipeline() -> Pipeline {
    Pipeline::from_config(AppConfig::default(), Arc::new(VectorStore::new())).unwrap()
}

#[test]
fn planted_batch_is_answered_from_the_planted_chunk() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 10, 3);
    let out = mock_pipeline().run_batch(&set.instances, None).unwrap();
    assert_eq!(out.report.accuracy, 1.0);
    assert_eq!(out.report.macro_f1, 1.0);
    assert_eq!(out.report.counts.failed, 0);
    let keys: Vec<&str> = out.report.per_difficulty.keys().map(String::as_str).collect();
    assert_eq!(keys, ["easy", "hard", "medium"]);
    for (rec, fact) in out.records.iter().zip(&set.planted) {
        assert!(rec.snippets.iter().any(|s| s.text.contains(&fact.sentence)), "{}", fact.instance_id);
        assert_eq!(rec.status, RecordStatus::Ok);
        assert_eq!(rec.correct, Some(true));
        assert!(rec.source_files.contains(&fact.file.file_name().unwrap().to_string_lossy().into_owned()));
    }
}

#[test]
fn snippets_trace_back_to_own_documents_only() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 6, 4);
    let out = mock_pipeline().run_batch(&set.instances, None).unwrap();
    let texts: Vec<Vec<String>> = set
        .instances
        .iter()
        .map(|i| i.background_docs.iter().map(|p| normalize_text(&std::fs::read_to_string(p).unwrap())).collect())
        .collect();
    for (i, rec) in out.records.iter().enumerate() {
        assert!(!rec.snippets.is_empty());
        for s in &rec.snippets {
            assert!(texts[i].iter().any(|t| t.contains(&s.text)));
            for (j, fact) in set.planted.iter().enumerate() {
                if j != i {
                    assert!(!s.text.contains(&fact.marker), "instance {i} saw marker of {j}");
                }
            }
        }
    }
}

#[test]
fn sessions_are_disjoint_and_destroyed_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 8, 5);
    let log_path = dir.path().join("prov.jsonl");
    let store = Arc::new(VectorStore::with_provenance(Arc::new(ProvenanceLog::open(&log_path).unwrap())));
    let p = Pipeline::from_config(AppConfig::default(), store.clone()).unwrap();
    let out = p.run_batch(&set.instances, None).unwrap();
    assert!(store.live_sessions().is_empty());

    let events = ProvenanceLog::read_events(&log_path).unwrap();
    let lives = replay(&events);
    assert_eq!(lives.len(), 8);
    assert!(lives.values().all(|l| l.created && l.destroyed));
    let ids: std::collections::BTreeSet<&str> = out.records.iter().map(|r| r.session_id.as_str()).collect();
    assert_eq!(ids.len(), 8);
    // Sequential batch: each session is destroyed before the next is created,
    // and its answer is logged while it is still alive.
    let mut open: Option<String> = None;
    for e in &events {
        match e {
            ProvenanceEvent::SessionCreated { session_id, .. } => {
                assert!(open.is_none());
                open = Some(session_id.clone());
            }
            ProvenanceEvent::AnswerRecorded { session_id, .. } => assert_eq!(open.as_ref(), Some(session_id)),
            ProvenanceEvent::SessionDestroyed { session_id, .. } => {
                assert_eq!(open.take().as_ref(), Some(session_id));
            }
            ProvenanceEvent::ChunksIngested { .. } => {}
        }
    }
}

#[test]
fn parallel_batch_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 12, 6);
    let seq = mock_pipeline().run_batch(&set.instances, None).unwrap();
    let cfg = AppConfig::default().with_override("eval.parallelism", 4.into()).unwrap();
    let par = Pipeline::from_config(cfg, Arc::new(VectorStore::new())).unwrap().run_batch(&set.instances, None).unwrap();
    assert_eq!(seq.report, par.report);
    for (a, b) in seq.records.iter().zip(&par.records) {
        assert_eq!(a.instance_id, b.instance_id);
        assert_eq!(a.snippets, b.snippets);
        assert_eq!(a.prediction, b.prediction);
    }
}

#[test]
fn empty_background_still_completes() {
    let inst = EvalInstance {
        id: "lonely".into(),
        question: "Which object is closest?".into(),
        options: Some(vec![
            ragrank_core::McqOption::new('A', "moon"),
            ragrank_core::McqOption::new('B', "sun"),
        ]),
        gold: "A".into(),
        difficulty: None,
        background_docs: vec![],
    };
    let backend = Arc::new(MockBackend::context_reader());
    let p = Pipeline::with_parts(
        AppConfig::default(),
        Arc::new(WhitespaceCounter),
        Arc::new(HashingEmbedder::new(64)),
        backend.clone(),
        Arc::new(VectorStore::new()),
    );
    let rec = p.run_instance(&inst).unwrap();
    assert_eq!(rec.status, RecordStatus::Ok);
    assert!(rec.snippets.is_empty());
    assert!(rec.warnings.iter().any(|w| w.contains("no background documents")));
    assert!(rec.warnings.iter().any(|w| w.contains("empty context")));
    assert_eq!(rec.correct, Some(false));
    let prompt = &backend.requests()[0].prompt;
    assert!(prompt.starts_with("Context:\n\n\nQuestion:\nWhich object is closest?"));
}

#[test]
fn backend_outage_fails_one_record_and_batch_continues() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 3, 8);
    let cfg = AppConfig::default().with_override("llm.retry_backoff_ms", 1.into()).unwrap();
    // Three failures: all attempts of the first instance.
    let backend = Arc::new(MockBackend::context_reader().failing(3));
    let p = Pipeline::with_parts(
        cfg,
        Arc::new(WhitespaceCounter),
        Arc::new(HashingEmbedder::new(64)),
        backend.clone(),
        Arc::new(VectorStore::new()),
    );
    let out = p.run_batch(&set.instances, None).unwrap();
    assert_eq!(out.records[0].status, RecordStatus::Failed);
    assert_eq!(out.records[0].attempts, 3);
    assert!(out.records[0].error.is_some());
    assert_eq!(out.records[1].status, RecordStatus::Ok);
    assert_eq!(out.records[2].status, RecordStatus::Ok);
    assert_eq!(out.report.counts.failed, 1);
    assert!((out.report.accuracy - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(backend.call_count(), 5);
}

#[test]
fn gold_is_never_marked_in_requests() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 4, 9);
    let backend = Arc::new(MockBackend::context_reader());
    let p = Pipeline::with_parts(
        AppConfig::default(),
        Arc::new(WhitespaceCounter),
        Arc::new(HashingEmbedder::new(64)),
        backend.clone(),
        Arc::new(VectorStore::new()),
    );
    p.run_batch(&set.instances, None).unwrap();
    for req in backend.requests() {
        let lower = req.prompt.to_lowercase();
        assert!(!lower.contains("gold") && !lower.contains("correct answer:") && !lower.contains("\"gold\""));
    }
}

fn strip_volatile(line: &str) -> Value {
    let mut v: Value = serde_json::from_str(line).unwrap();
    if let Some(o) = v.as_object_mut() {
        o.remove("session_id");
        o.remove("timings");
    }
    v
}

#[test]
fn results_file_is_deterministic_and_ends_with_summary() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 5, 10);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    mock_pipeline().run_batch(&set.instances, Some(&a)).unwrap();
    mock_pipeline().run_batch(&set.instances, Some(&b)).unwrap();
    let la: Vec<Value> = std::fs::read_to_string(&a).unwrap().lines().map(strip_volatile).collect();
    let lb: Vec<Value> = std::fs::read_to_string(&b).unwrap().lines().map(strip_volatile).collect();
    assert_eq!(la.len(), 6);
    assert_eq!(la, lb);
    let summary = la.last().unwrap();
    assert_eq!(summary["summary"]["accuracy"], 1.0);
    assert!(summary["config"]["pr"]["top_k"].is_u64());
    for rec in &la[..5] {
        assert!(rec["snippets"].is_array());
    }
}

#[test]
fn dataset_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 3, 11);
    let (loaded, _) = load_dataset(&set.dataset_path, true).unwrap();
    let out = mock_pipeline().run_batch(&loaded, None).unwrap();
    assert_eq!(out.report.accuracy, 1.0);
}

#[test]
fn sweeps_emit_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let set = planted(dir.path(), 3, 12);
    let p = mock_pipeline();
    for (spec, values) in [
        ("llm.max_new_tokens=16,32,64,128,256", vec!["16", "32", "64", "128", "256"]),
        ("pr.top_k=1,3,6,9,12", vec!["1", "3", "6", "9", "12"]),
    ] {
        let table = p.run_sweep(&set.instances, &SweepSpec::parse(spec).unwrap(), Some(&dir.path().join("sweep"))).unwrap();
        let got: Vec<&str> = table.rows.iter().map(|r| r.value.as_str()).collect();
        assert_eq!(got, values);
        assert!(table.rows.iter().all(|r| r.mean_latency_ms > 0.0));
        let csv = table.to_csv();
        assert_eq!(
            csv.lines().next().unwrap(),
            "parameter,value,accuracy,macro_f1,rouge_l,rouge_n,mean_latency_ms"
        );
        assert_eq!(csv.lines().count(), 6);
    }
    let single = p.run_sweep(&set.instances, &SweepSpec::parse("pr.top_k=3").unwrap(), None).unwrap();
    let plain = p.run_batch(&set.instances, None).unwrap();
    assert_eq!(single.rows[0].report, plain.report);
    assert!(SweepSpec::parse("pr.top_k=0").and_then(|s| s.configs(p.config())).is_err());
    assert!(SweepSpec::parse("pr.alpha=0.5,1.0").and_then(|s| s.configs(p.config())).is_err());
}
