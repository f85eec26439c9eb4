use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use refuter_core::backend::{call, BackendError, CallKey, ChatBackend, ChatMessage, OpenAiBackend, OpenAiConfig};
use serde_json::{json, Value};

struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per
/// connection, and records what arrived.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let h = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                r.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(l["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { auth, body: serde_json::from_slice(&buf).unwrap() });
            let mut w = stream;
            write!(
                w,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            w.flush().unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen, h)
}

fn ok_body(text: &str) -> String {
    json!({
        "choices": [{
            "message": {"content": text},
            "logprobs": {"content": [{"token": "Yes", "logprob": -0.2,
                "top_logprobs": [{"token": "Yes", "logprob": -0.2}, {"token": "No", "logprob": -1.8}]}]}
        }],
        "usage": {"prompt_tokens": 11, "completion_tokens": 1}
    })
    .to_string()
}

fn cfg(endpoint: String) -> OpenAiConfig {
    OpenAiConfig {
        endpoint,
        model: "test-model".into(),
        auth_env: Some("REFUTER_TEST_TOKEN".into()),
        supports_first_token_logprobs: true,
        max_retries: 2,
        backoff_ms: 1,
        timeout_s: 10,
        ..OpenAiConfig::default()
    }
}

fn msgs() -> Vec<ChatMessage> {
    vec![ChatMessage::system("sys"), ChatMessage::user("is it anomalous?", vec![])]
}

#[test]
fn request_shape_retry_and_logprobs() {
    std::env::set_var("REFUTER_TEST_TOKEN", "sekrit");
    let (url, seen, h) = serve(vec![(503, "{}".into()), (200, ok_body("Yes"))]);
    let b = OpenAiBackend::new(cfg(url)).unwrap();
    let out = call(&b, CallKey::new("i1", "direct", 0), &msgs(), true).unwrap();
    h.join().unwrap();
    assert_eq!(out.text, "Yes");
    let lp = out.first_token_logprobs.unwrap();
    assert_eq!(lp["No"], -1.8);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].auth.as_deref(), Some("Bearer sekrit"));
    let body = &seen[1].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["logprobs"], true);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(b.capabilities().name, "test-model");
}

#[test]
fn client_error_is_not_retried() {
    std::env::set_var("REFUTER_TEST_TOKEN", "sekrit");
    let (url, seen, h) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
    let b = OpenAiBackend::new(cfg(url)).unwrap();
    let err = call(&b, CallKey::new("i1", "direct", 0), &msgs(), false).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, BackendError::Schema(_)));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn missing_token_variable_is_reported() {
    let mut c = cfg("http://127.0.0.1:9/v1".into());
    c.auth_env = Some("REFUTER_SURELY_UNSET_VARIABLE".into());
    assert!(OpenAiBackend::new(c).is_err());
}
