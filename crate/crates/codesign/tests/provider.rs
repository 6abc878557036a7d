use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use codesign::provider::{self, FixtureError, HttpChat, OpenError, HTTP_ATTEMPTS};
use codesign_core::llm::{LanguageModel, LlmRequest, PromptTag, ProviderError};
use codesign_core::model::ProviderSpec;

fn request() -> LlmRequest {
    LlmRequest {
        system_prompt: "sys".into(),
        user_prompt: "propose".into(),
        temperature: 0.3,
        max_retries: 2,
        tag: PromptTag::MorphPropose,
    }
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and forwards each request body to the returned channel.
fn server(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(format!("{auth}\n{}", String::from_utf8(buf).unwrap())).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/chat/completions"), rx)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn client(endpoint: &str, env: &str) -> HttpChat {
    std::env::set_var(env, "secret-key");
    HttpChat::new(endpoint, "test-model", env)
        .unwrap()
        .with_backoff(Duration::from_millis(10))
}

#[test]
fn fixtures_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("f.json");
    let mut fx = BTreeMap::new();
    fx.insert(PromptTag::MorphPropose, vec!["a".to_string(), "b".to_string()]);
    fx.insert(PromptTag::RewardRefine, vec!["c".to_string()]);
    provider::save_fixture(&path, &fx).unwrap();
    assert_eq!(provider::load_fixture(&path).unwrap(), fx);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"morph_propose\""));

    std::fs::write(&path, r#"{"morph_propose": "not a list"}"#).unwrap();
    assert!(matches!(
        provider::load_fixture(&path),
        Err(FixtureError::Format { .. })
    ));
    assert!(matches!(
        provider::load_fixture(&tmp.path().join("missing.json")),
        Err(FixtureError::Read { .. })
    ));
}

#[test]
fn missing_key_fails_before_any_request() {
    let err = HttpChat::new("http://127.0.0.1:9/", "m", "CODESIGN_TEST_UNSET_KEY")
        .err()
        .unwrap();
    assert!(matches!(err, ProviderError::Auth(_)));
    let spec = ProviderSpec::HttpChat {
        endpoint: "http://127.0.0.1:9/".into(),
        model: "m".into(),
        api_key_env: "CODESIGN_TEST_UNSET_KEY".into(),
    };
    assert!(matches!(
        provider::open(&spec).err().unwrap(),
        OpenError::Provider(ProviderError::Auth(_))
    ));
}

#[test]
fn successful_completion_sends_chat_body() {
    let (url, rx) = server(vec![(200, ok_body("l1: 0.3"))]);
    let mut c = client(&url, "CODESIGN_TEST_KEY_A");
    assert_eq!(c.complete(&request()).unwrap(), "l1: 0.3");
    let seen = rx.recv().unwrap();
    let (auth, body) = seen.split_once('\n').unwrap();
    assert_eq!(auth, "authorization: Bearer secret-key");
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "test-model");
    assert_eq!(v["temperature"], 0.3);
    assert_eq!(v["messages"][0]["role"], "system");
    assert_eq!(v["messages"][1]["content"], "propose");
}

#[test]
fn unauthorized_is_not_retried() {
    let (url, rx) = server(vec![(401, "{}".into())]);
    let mut c = client(&url, "CODESIGN_TEST_KEY_B");
    assert!(matches!(c.complete(&request()), Err(ProviderError::Auth(_))));
    assert_eq!(rx.try_iter().count(), 1);
}

#[test]
fn server_errors_are_retried() {
    let (url, rx) = server(vec![(500, "{}".into()), (503, "{}".into()), (200, ok_body("done"))]);
    let mut c = client(&url, "CODESIGN_TEST_KEY_C");
    assert_eq!(c.complete(&request()).unwrap(), "done");
    assert_eq!(rx.try_iter().count(), 3);

    let replies = (0..HTTP_ATTEMPTS).map(|_| (500, "{}".to_string())).collect();
    let (url, _rx) = server(replies);
    let mut c = client(&url, "CODESIGN_TEST_KEY_C");
    assert!(matches!(c.complete(&request()), Err(ProviderError::Network(m)) if m.contains("500")));
}

#[test]
fn malformed_reply_is_a_bad_response() {
    let (url, _rx) = server(vec![(200, r#"{"choices": []}"#.into()), (400, "nope".into())]);
    let mut c = client(&url, "CODESIGN_TEST_KEY_D");
    assert!(matches!(c.complete(&request()), Err(ProviderError::BadResponse(_))));
    assert!(matches!(c.complete(&request()), Err(ProviderError::BadResponse(m)) if m.contains("400")));
}
