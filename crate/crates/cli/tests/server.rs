use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use ragrank_cli::server::{self, ServerState};
use ragrank_core::config::AppConfig;
use ragrank_core::provenance::{replay, ProvenanceEvent, ProvenanceLog};
use reqwest::blocking::{multipart, Client};
use serde_json::{json, Value};

struct Running {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    state: Arc<ServerState>,
}

impl Running {
    fn start(dir: &Path, idle_secs: u64) -> Self {
        let cfg = AppConfig::default()
            .with_override("server.provenance_log", dir.join("prov.jsonl").to_str().unwrap().into())
            .unwrap()
            .with_override("server.idle_timeout_secs", idle_secs.into())
            .unwrap();
        let state = ServerState::from_config(cfg).unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let st = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                server::run(st, listener, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self {
            base: format!("http://{addr}"),
            stop: Some(tx),
            thread: Some(thread),
            state,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn stop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().unwrap();
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        self.stop();
    }
}

fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(30)).build().unwrap()
}

const FACT: &str = "The remnant designated QX-41 is a white dwarf.";

fn write_doc(dir: &Path) -> String {
    let p = dir.join("notes.txt");
    std::fs::write(&p, format!("Faint nebula surrounds hot cloud.\n\n{FACT} Dusty disk feeds young jet.\n")).unwrap();
    p.to_string_lossy().into_owned()
}

fn session(c: &Client, s: &Running, overrides: Value) -> String {
    let r = c.post(s.url("/sessions")).json(&overrides).send().unwrap();
    assert_eq!(r.status(), 201);
    r.json::<Value>().unwrap()["session_id"].as_str().unwrap().to_string()
}

#[test]
fn health_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let s = Running::start(dir.path(), 1800);
    let c = client();
    let h: Value = c.get(s.url("/health")).send().unwrap().json().unwrap();
    assert_eq!(h["status"], "ok");
    assert_eq!(h["version"], env!("CARGO_PKG_VERSION"));
    let cfg: Value = c.get(s.url("/config")).send().unwrap().json().unwrap();
    assert_eq!(cfg["pr"]["top_k"], 3);
    let r = c.get(s.url("/nowhere")).send().unwrap();
    assert_eq!(r.status(), 404);
    assert_eq!(r.json::<Value>().unwrap()["code"], "not_found");
}

#[test]
fn path_ingest_and_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let doc = write_doc(dir.path());
    let s = Running::start(dir.path(), 1800);
    let c = client();
    let id = session(&c, &s, json!({ "pr": { "top_k": 2 } }));

    let r: Value = c
        .post(s.url(&format!("/sessions/{id}/documents")))
        .json(&json!([{ "path": doc }]))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(r["added_documents"], 1);
    assert_eq!(r["doc_count"], 1);
    assert!(r["chunk_count"].as_u64().unwrap() >= 1);

    let q: Value = c
        .post(s.url(&format!("/sessions/{id}/query")))
        .json(&json!({
            "question": "What is the remnant designated QX-41?",
            "options": [{ "label": "A", "text": "red giant" }, { "label": "B", "text": "white dwarf" }],
        }))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(q["parsed_label"], "B");
    assert_eq!(q["answer"], "B. white dwarf");
    let src = &q["sources"][0];
    assert_eq!(src["filename"], "notes.txt");
    assert!(src["snippet"].as_str().unwrap().contains(FACT));
    assert!(q["timings"]["total_ms"].as_f64().unwrap() > 0.0);

    let h: Value = c.get(s.url(&format!("/sessions/{id}"))).send().unwrap().json().unwrap();
    assert_eq!(h["overrides"], json!({ "pr.top_k": 2 }));
    assert_eq!(h["files"], json!(["notes.txt"]));

    let d = c.delete(s.url(&format!("/sessions/{id}"))).send().unwrap();
    assert_eq!(d.status(), 200);
    let gone = c.get(s.url(&format!("/sessions/{id}"))).send().unwrap();
    assert_eq!(gone.status(), 404);
    let body: Value = gone.json().unwrap();
    assert_eq!(body["code"], "session_not_found");
    assert!(body["message"].is_string() && body["detail"].is_object());
}

#[test]
fn multipart_upload_and_query_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let s = Running::start(dir.path(), 1800);
    let c = client();
    let id = session(&c, &s, json!({}));
    let form = multipart::Form::new()
        .part("file", multipart::Part::text(format!("{FACT}\n")).file_name("upload.md"))
        .part(
            "pages",
            multipart::Part::text("{\"page\": 1, \"text\": \"Cold halo traces dense shell.\"}\n{\"page\": 2, \"text\": \"Bright jet crosses cold telescope.\"}\n")
                .file_name("report.pages.jsonl"),
        );
    let r: Value = c.post(s.url(&format!("/sessions/{id}/documents"))).multipart(form).send().unwrap().json().unwrap();
    assert_eq!(r["added_documents"], 2);
    assert_eq!(r["chunk_count"], 3);

    let ask = |overrides: Value| -> Value {
        c.post(s.url(&format!("/sessions/{id}/query")))
            .json(&json!({ "question": "What is QX-41?", "overrides": overrides }))
            .send()
            .unwrap()
            .json()
            .unwrap()
    };
    assert_eq!(ask(json!({ "pr.top_k": 1 }))["sources"].as_array().unwrap().len(), 1);
    assert_eq!(ask(json!({ "pr": { "top_k": 3 } }))["sources"].as_array().unwrap().len(), 3);
    let denied = c
        .post(s.url(&format!("/sessions/{id}/query")))
        .json(&json!({ "question": "x?", "overrides": { "llm.base_url": "http://elsewhere" } }))
        .send()
        .unwrap();
    assert_eq!(denied.status(), 400);
    assert_eq!(denied.json::<Value>().unwrap()["code"], "override_not_allowed");
    let invalid = c
        .post(s.url(&format!("/sessions/{id}/query")))
        .json(&json!({ "question": "x?", "overrides": { "pr.alpha": 1.5 } }))
        .send()
        .unwrap();
    assert_eq!(invalid.status(), 400);
    assert_eq!(invalid.json::<Value>().unwrap()["code"], "invalid_config");
}

#[test]
fn bad_requests_use_the_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let s = Running::start(dir.path(), 1800);
    let c = client();
    let id = session(&c, &s, json!({}));
    let cases = [
        (format!("/sessions/{id}/documents"), json!([{ "path": "/definitely/missing.txt" }]), 400, "unreadable_document"),
        (format!("/sessions/{id}/query"), json!({ "question": "" }), 400, "bad_request"),
        ("/sessions/nope/query".to_string(), json!({ "question": "q?" }), 404, "session_not_found"),
        ("/sessions".to_string(), json!({ "network": { "deny_outbound": false } }), 400, "override_not_allowed"),
    ];
    for (path, body, status, code) in cases {
        let r = c.post(s.url(&path)).json(&body).send().unwrap();
        assert_eq!(r.status(), status, "{path}");
        assert_eq!(r.json::<Value>().unwrap()["code"], code, "{path}");
    }
}

#[test]
fn shutdown_destroys_open_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let doc = write_doc(dir.path());
    let mut s = Running::start(dir.path(), 1800);
    let c = client();
    let ids: Vec<String> = (0..3).map(|_| session(&c, &s, json!({}))).collect();
    for id in &ids {
        c.post(s.url(&format!("/sessions/{id}/documents"))).json(&json!([{ "path": doc }])).send().unwrap();
    }
    s.stop();
    assert_eq!(s.state.open_sessions(), 0);
    let events = ProvenanceLog::read_events(dir.path().join("prov.jsonl")).unwrap();
    let destroyed: Vec<&str> = events
        .iter()
        .filter_map(|e| match e {
            ProvenanceEvent::SessionDestroyed { session_id, .. } => Some(session_id.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(destroyed.len(), 3);
    for id in &ids {
        assert!(destroyed.contains(&id.as_str()));
    }
    assert!(replay(&events).values().all(|l| l.created && l.destroyed));
}

#[test]
fn idle_sessions_expire() {
    let dir = tempfile::tempdir().unwrap();
    let s = Running::start(dir.path(), 0);
    let c = client();
    let id = session(&c, &s, json!({}));
    std::thread::sleep(Duration::from_millis(300));
    let r = c.get(s.url(&format!("/sessions/{id}"))).send().unwrap();
    assert_eq!(r.status(), 404);
}
