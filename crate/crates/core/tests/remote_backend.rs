use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use irm_core::reasoner::{build_psav_prompt, BackendConfig, BackendKind, ChatBackend, RemoteBackend};
use irm_core::Error;

struct Seen {
    headers: Vec<String>,
    body: String,
}

/// Serves one canned `(status, body)` per connection and reports each request.
fn stub(responses: Vec<(u16, &'static str)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                headers.push(line.trim().to_string());
            }
            let len = headers
                .iter()
                .find_map(|h| h.to_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                .unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(Seen { headers, body: String::from_utf8(buf).unwrap() }).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn config(endpoint: String, retry_budget: u32) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Remote,
        endpoint,
        model: "stub-model".into(),
        retry_budget,
        backoff_ms: 1,
        timeout_secs: 5.0,
        credential_env: Some("IRM_REMOTE_TEST_TOKEN".into()),
        ..BackendConfig::default()
    }
}

const OK_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"(B)"}}]}"#;

#[test]
fn retries_server_errors_then_succeeds() {
    std::env::set_var("IRM_REMOTE_TEST_TOKEN", "token-123");
    let (url, seen) = stub(vec![(500, "{}"), (500, "{}"), (200, OK_BODY)]);
    let backend = RemoteBackend::new(config(url, 3)).unwrap();
    let reply = backend.complete(&build_psav_prompt(&[])).unwrap();
    assert_eq!(reply.text, "(B)");
    assert_eq!(reply.attempts, 3);

    let requests: Vec<Seen> = seen.iter().take(3).collect();
    let ids: Vec<&String> = requests
        .iter()
        .map(|r| r.headers.iter().find(|h| h.to_lowercase().starts_with("x-request-id")).unwrap())
        .collect();
    assert!(ids.iter().all(|id| *id == ids[0]), "retries reuse the request id");
    assert!(requests[0].headers.iter().any(|h| h == "Authorization: Bearer token-123"));
    let body: serde_json::Value = serde_json::from_str(&requests[0].body).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["messages"][0]["role"], "user");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, r#"{"error":"bad"}"#)]);
    let backend = RemoteBackend::new(config(url, 3)).unwrap();
    match backend.complete(&build_psav_prompt(&[])) {
        Err(Error::Protocol { status: 400, .. }) => {}
        other => panic!("expected a protocol error, got {other:?}"),
    }
    assert_eq!(seen.iter().count(), 1);
}

#[test]
fn exhausted_retries_are_a_transport_error() {
    let (url, _seen) = stub(vec![(503, "{}"), (503, "{}")]);
    let backend = RemoteBackend::new(config(url, 1)).unwrap();
    let err = backend.complete(&build_psav_prompt(&[])).unwrap_err();
    assert!(err.is_transport());
    assert!(err.to_string().contains("2 attempts"), "{err}");
}

#[test]
fn malformed_reply_is_a_parse_error() {
    let (url, _seen) = stub(vec![(200, r#"{"choices":[]}"#)]);
    let backend = RemoteBackend::new(config(url, 0)).unwrap();
    assert!(matches!(backend.complete(&build_psav_prompt(&[])), Err(Error::Parse(_))));
}
