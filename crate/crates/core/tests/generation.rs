mod common;

use std::time::Duration;

use common::FakeServer;
use proptest::prelude::*;
use ragrank_core::embedding::{embed_texts, EmbeddingProvider, HttpEmbedder};
use ragrank_core::generation::{
    build_prompt, build_query_string, extract_choice, generate, GenParams, GenerationError, HttpChatBackend, Label,
    LlmBackend, McqOption, MockBackend, RetryPolicy,
};
use ragrank_core::net::OutboundGate;
use ragrank_core::rerank::ContextPack;
use regex::Regex;

fn abcd(texts: [&str; 4]) -> Vec<McqOption> {
    ['A', 'B', 'C', 'D'].iter().zip(texts).map(|(&l, t)| McqOption::new(l, t)).collect()
}

#[test]
fn query_string_layout() {
    let opts = [McqOption::new('A', "x"), McqOption::new('B', "y")];
    let got = build_query_string("Q?", Some(&opts), "Answer with the letter.").unwrap();
    // The layout rules written out by hand.
    let expected = ["Q?", "", "A. x", "B. y", "", "Answer with the letter."].join("\n");
    assert_eq!(got, expected);
    assert_eq!(build_query_string("Q?", None, "I").unwrap(), "Q?\n\nI");
    assert_eq!(got, build_query_string("Q?", Some(&opts), "Answer with the letter.").unwrap());
    let dup = [McqOption::new('A', "x"), McqOption::new('A', "y")];
    assert!(matches!(build_query_string("Q?", Some(&dup), "I"), Err(GenerationError::DuplicateLabel(_))));
    assert!(matches!(build_query_string("  ", None, "I"), Err(GenerationError::EmptyQuestion)));
}

#[test]
fn prompt_layout() {
    let pack = ContextPack::empty();
    assert_eq!(build_prompt(&pack, "p"), "Context:\n\n\nQuestion:\np");
}

/// Rule 2 written independently as one regular expression.
fn rule_two(raw: &str) -> Option<char> {
    let re = Regex::new(r"(?i)answer\s+is\s*:?\s*\(?([abcd])(?:[^a-z]|$)").unwrap();
    re.captures(raw).map(|c| c[1].chars().next().unwrap().to_ascii_uppercase())
}

#[test]
fn extract_choice_examples() {
    let o = abcd(["red giant", "white dwarf", "neutron star", "black hole"]);
    let l = |c| Label::new(c);
    assert_eq!(extract_choice("B. Because...", &o), l('B'));
    assert_eq!(extract_choice("(C) neutron", &o), l('C'));
    assert_eq!(extract_choice("D:", &o), l('D'));
    assert_eq!(extract_choice("A", &o), l('A'));
    assert_eq!(extract_choice("The answer is c", &o), l('C'));
    assert_eq!(rule_two("The answer is c"), Some('C'));
    assert_eq!(extract_choice("I think it is a white dwarf", &o), l('B'));
    assert_eq!(extract_choice("no idea", &o), None);
    // Rule 1 beats rule 2, rule 2 beats rule 3.
    assert_eq!(extract_choice("A. The answer is B", &o), l('A'));
    assert_eq!(extract_choice("Surely the answer is D, not a red giant", &o), l('D'));
    // Longest option text wins.
    let nested = abcd(["star", "neutron star", "planet", "moon"]);
    assert_eq!(extract_choice("a neutron star", &nested), l('B'));
    // Labels outside the option set are never returned.
    assert_eq!(extract_choice("E.", &o), None);
}

proptest! {
    #[test]
    fn extract_choice_is_total_and_in_range(raw in ".{0,60}", n in 1usize..=4) {
        let o: Vec<McqOption> = abcd(["red giant", "white dwarf", "neutron star", "black hole"]).into_iter().take(n).collect();
        let a = extract_choice(&raw, &o);
        prop_assert_eq!(a, extract_choice(&raw, &o));
        if let Some(l) = a {
            prop_assert!(o.iter().any(|x| x.label == l));
        }
    }

    #[test]
    fn rule_two_agrees_with_regex(prefix in "[a-z ]{0,12}", c in prop::sample::select(vec!['a', 'b', 'c', 'd', 'A', 'D']), tail in "[ .,;!]{0,3}") {
        let o = abcd(["red giant", "white dwarf", "neutron star", "black hole"]);
        // A leading space keeps rule 1 out of the way.
        let raw = format!(" so {prefix} the answer is {c}{tail}");
        prop_assert_eq!(extract_choice(&raw, &o).map(Label::as_char), rule_two(&raw));
    }
}

#[test]
fn mock_retries_then_fails_after_three_attempts() {
    let down = MockBackend::fixed("A").failing(usize::MAX);
    let retry = RetryPolicy { max_retries: 2, backoff: Duration::from_millis(1) };
    let err = generate(&down, "p", &GenParams::default(), &retry).unwrap_err();
    assert_eq!(err.attempts(), 3);
    assert_eq!(down.call_count(), 3);

    let flaky = MockBackend::fixed("A").failing(2);
    let ok = generate(&flaky, "p", &GenParams::default(), &retry).unwrap();
    assert_eq!((ok.text.as_str(), ok.attempts), ("A", 3));
}

fn chat_reply(text: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

#[test]
fn chat_request_carries_decoding_defaults() {
    let server = FakeServer::start(vec![(200, chat_reply("B. white dwarf"))]);
    let gate = OutboundGate::new(false);
    std::env::set_var("RAGRANK_TEST_CHAT_KEY", "sekret");
    let backend = HttpChatBackend::new(
        &server.base_url,
        "astro-model",
        Some("RAGRANK_TEST_CHAT_KEY"),
        Duration::from_secs(5),
        2,
        gate.clone(),
    );
    let out = generate(&backend, "Context:\nx\n\nQuestion:\ny", &GenParams::default(), &RetryPolicy::none()).unwrap();
    assert_eq!(out.text, "B. white dwarf");
    assert_eq!(gate.attempts(), 1);
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    let r = &reqs[0];
    assert!(r.request_line.starts_with("POST /v1/chat/completions "));
    assert_eq!(r.header("authorization"), Some("Bearer sekret"));
    assert_eq!(r.body["model"], "astro-model");
    assert_eq!(r.body["temperature"].as_f64(), Some(0.005));
    assert_eq!(r.body["top_p"].as_f64(), Some(0.95));
    assert_eq!(r.body["max_tokens"].as_u64(), Some(128));
    assert_eq!(r.body["messages"][0]["content"], "Context:\nx\n\nQuestion:\ny");
}

#[test]
fn chat_retries_server_errors_and_flags_over_length() {
    let server = FakeServer::start(vec![
        (503, "{\"error\":\"loading\"}".into()),
        (200, chat_reply("C")),
        (422, "{\"error\":\"Input validation error: too long\"}".into()),
    ]);
    let backend = HttpChatBackend::new(&server.base_url, "m", None, Duration::from_secs(5), 1, OutboundGate::new(false));
    let retry = RetryPolicy { max_retries: 2, backoff: Duration::from_millis(1) };
    let out = generate(&backend, "p", &GenParams::default(), &retry).unwrap();
    assert_eq!((out.text.as_str(), out.attempts), ("C", 2));
    let err = generate(&backend, "p", &GenParams::default(), &retry).unwrap_err();
    match err {
        GenerationError::Failed { attempts, source } => {
            assert_eq!(attempts, 1);
            assert!(matches!(*source, GenerationError::OverLength(_)));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(server.requests()[0].header("authorization").is_none());
}

#[test]
fn clamped_temperature_is_reported() {
    let body = serde_json::json!({ "temperature": 0.01, "choices": [{ "message": { "content": "A" } }] }).to_string();
    let server = FakeServer::start(vec![(200, body)]);
    let backend = HttpChatBackend::new(&server.base_url, "m", None, Duration::from_secs(5), 1, OutboundGate::new(false));
    let out = generate(&backend, "p", &GenParams::default(), &RetryPolicy::none()).unwrap();
    assert!(out.clamped);
}

#[test]
fn denied_gate_never_connects() {
    let gate = OutboundGate::new(true);
    let backend = HttpChatBackend::new("http://127.0.0.1:9", "m", None, Duration::from_secs(1), 1, gate.clone());
    let err = backend
        .complete(&ragrank_core::generation::CompletionRequest { prompt: "p".into(), params: GenParams::default() })
        .unwrap_err();
    assert!(err.to_string().contains("network access is disabled"), "{err}");
    assert_eq!(gate.attempts(), 1);
}

#[test]
fn embeddings_request_and_reordering() {
    let reply = serde_json::json!({
        "data": [
            { "index": 1, "embedding": [0.0, 1.0] },
            { "index": 0, "embedding": [1.0, 0.0] },
        ]
    })
    .to_string();
    let server = FakeServer::start(vec![(200, reply)]);
    let e = HttpEmbedder::new(&server.base_url, "embed-model", None, Duration::from_secs(5), 4, OutboundGate::new(false));
    let out = embed_texts(&e, &["first", "second"]).unwrap();
    assert_eq!(out[0].0, [1.0, 0.0]);
    assert_eq!(out[1].0, [0.0, 1.0]);
    assert_eq!(e.dimension(), Some(2));
    let r = &server.requests()[0];
    assert!(r.request_line.starts_with("POST /v1/embeddings "));
    assert_eq!(r.body, serde_json::json!({ "model": "embed-model", "input": ["first", "second"] }));
}
