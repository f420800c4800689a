//! HTTP backend behavior against a local canned-response server: retry
//! budget, permanent failures, logprob span extraction and capability
//! errors.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use tailor_core::gateway::{
    AgentId, Backend, BackendKind, Gateway, GatewayError, GatewayOptions, HttpBackend,
    HttpSettings, MockBackend, MockSettings, Role,
};
use tailor_core::Prompt;

/// Serves one canned (status, body) per incoming request, in order; repeats
/// the last one when the script runs out.
struct CannedServer {
    address: String,
    requests_seen: Arc<AtomicUsize>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl CannedServer {
    fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind test server");
        let address = format!("http://{}", listener.local_addr().unwrap());
        let requests_seen = Arc::new(AtomicUsize::new(0));
        let seen = requests_seen.clone();
        let handle = std::thread::spawn(move || {
            let mut responses = script.into_iter();
            let mut last: Option<(u16, String)> = None;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                if !read_request(&mut stream) {
                    break;
                }
                seen.fetch_add(1, Ordering::SeqCst);
                let response = responses.next().or_else(|| last.clone());
                let Some((status, body)) = response else { break };
                last = Some((status, body.clone()));
                let reason = if status == 200 { "OK" } else { "ERR" };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\n\
                     content-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                if status == 0 {
                    break;
                }
            }
        });
        CannedServer { address, requests_seen, handle: Some(handle) }
    }

    fn seen(&self) -> usize {
        self.requests_seen.load(Ordering::SeqCst)
    }
}

impl Drop for CannedServer {
    fn drop(&mut self) {
        // Unblock the accept loop so the thread can exit.
        if let Ok(mut stream) = TcpStream::connect(self.address.trim_start_matches("http://")) {
            let _ = stream.write_all(b"\r\n");
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Read one HTTP request (headers + content-length body). Returns false on
/// a bare connection used to unblock the listener.
fn read_request(stream: &mut TcpStream) -> bool {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut content_length = 0usize;
    let mut saw_any = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return false;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            break;
        }
        saw_any = true;
        if let Some(value) = trimmed.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    if content_length > 0 {
        let mut body = vec![0u8; content_length];
        let _ = reader.read_exact(&mut body);
    }
    saw_any
}

fn agent(role: Role, endpoint: &str) -> AgentId {
    AgentId {
        name: "wire".into(),
        role,
        backend: BackendKind::Http,
        endpoint: Some(endpoint.to_string()),
        model: "served-model".into(),
    }
}

fn fast_settings() -> HttpSettings {
    HttpSettings { retries: 3, backoff_ms: 5, request_timeout_ms: 5_000, ..Default::default() }
}

fn gateway_over(backend: HttpBackend) -> Gateway {
    Gateway::with_backends(
        Box::new(MockBackend::new(MockSettings::default())),
        Some(Box::new(backend)),
        GatewayOptions { embedding_dim: 3, max_in_flight: 4 },
    )
}

fn chat_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"content": text}}]}).to_string()
}

#[test]
fn transient_failures_succeed_after_retries() {
    let server = CannedServer::start(vec![
        (500, "overloaded".into()),
        (500, "overloaded".into()),
        (500, "overloaded".into()),
        (200, chat_body("recovered")),
    ]);
    let backend = HttpBackend::new(fast_settings()).unwrap();
    let a = agent(Role::Referee, &server.address);

    let text = backend.generate(&a, &Prompt::user("hello"), 1).unwrap();
    assert_eq!(text, "recovered");
    assert_eq!(backend.retries_attempted(), 3, "three retries were spent");
    assert_eq!(server.seen(), 4, "initial attempt plus three retries");
}

#[test]
fn persistent_failure_exhausts_the_budget() {
    let server = CannedServer::start(vec![(503, "down".into())]);
    let backend = HttpBackend::new(fast_settings()).unwrap();
    let a = agent(Role::Referee, &server.address);

    let err = backend.generate(&a, &Prompt::user("hello"), 1).unwrap_err();
    match err {
        GatewayError::RetriesExhausted { attempts, .. } => assert_eq!(attempts, 4),
        other => panic!("expected RetriesExhausted, got {other}"),
    }
    assert_eq!(server.seen(), 4);
}

#[test]
fn client_errors_are_permanent() {
    let server = CannedServer::start(vec![(404, "no such model".into())]);
    let backend = HttpBackend::new(fast_settings()).unwrap();
    let a = agent(Role::Referee, &server.address);

    let err = backend.generate(&a, &Prompt::user("hello"), 1).unwrap_err();
    assert!(matches!(err, GatewayError::HttpStatus { status: 404, .. }), "{err}");
    assert_eq!(server.seen(), 1, "4xx must not be retried");
}

fn completion_body(tokens: &[&str], logprobs: &[Option<f64>], offsets: &[usize]) -> String {
    serde_json::json!({
        "choices": [{
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": logprobs,
                "text_offset": offsets,
            }
        }]
    })
    .to_string()
}

#[test]
fn logprob_span_follows_the_context_boundary() {
    // Prompt sent conditioned: "ctx: " + "a b" (9 chars, continuation at 5).
    let conditioned = completion_body(
        &["ctx:", " ", "a", " b"],
        &[None, Some(-0.5), Some(-1.25), Some(-2.5)],
        &[0, 4, 5, 6],
    );
    // Unconditioned: prompt is just "a b".
    let unconditioned = completion_body(
        &["a", " b"],
        &[Some(-0.75), Some(-1.5)],
        &[0, 1],
    );
    let server = CannedServer::start(vec![(200, conditioned), (200, unconditioned)]);
    let gateway = gateway_over(HttpBackend::new(fast_settings()).unwrap());
    let a = agent(Role::ScorerSmall, &server.address);

    let with_context = gateway.score_logprobs(&a, Some("ctx: "), "a b").unwrap();
    assert_eq!(with_context.tokens, vec!["a", " b"]);
    assert_eq!(with_context.logprobs, vec![-1.25, -2.5]);

    let without = gateway.score_logprobs(&a, None, "a b").unwrap();
    assert_eq!(without.tokens, vec!["a", " b"]);
    assert_eq!(without.logprobs, vec![-0.75, -1.5]);
}

#[test]
fn straddling_token_boundary_is_an_integrity_error() {
    // The token at offset 3 spans the context boundary at 4.
    let body = completion_body(
        &["ctx", " a", " b"],
        &[None, Some(-0.5), Some(-1.0)],
        &[0, 3, 5],
    );
    let server = CannedServer::start(vec![(200, body)]);
    let gateway = gateway_over(HttpBackend::new(fast_settings()).unwrap());
    let a = agent(Role::ScorerSmall, &server.address);

    let err = gateway.score_logprobs(&a, Some("ctx "), "a b").unwrap_err();
    assert!(matches!(err, GatewayError::Integrity { .. }), "{err}");
}

#[test]
fn missing_logprobs_is_a_capability_error() {
    let body = serde_json::json!({"choices": [{"logprobs": null}]}).to_string();
    let server = CannedServer::start(vec![(200, body)]);
    let gateway = gateway_over(HttpBackend::new(fast_settings()).unwrap());
    let a = agent(Role::ScorerSmall, &server.address);

    let err = gateway.score_logprobs(&a, Some("c "), "a").unwrap_err();
    assert!(matches!(err, GatewayError::Capability { .. }), "{err}");
}

#[test]
fn embedding_dimension_is_validated_against_config() {
    let body = serde_json::json!({"data": [{"embedding": [0.1, 0.2]}]}).to_string();
    let server = CannedServer::start(vec![(200, body)]);
    // Gateway expects dimension 3; the server returns 2.
    let gateway = gateway_over(HttpBackend::new(fast_settings()).unwrap());
    let a = agent(Role::Embedder, &server.address);

    let err = gateway.embed(&a, "text").unwrap_err();
    assert!(matches!(err, GatewayError::Integrity { .. }), "{err}");
}

#[test]
fn positive_logprobs_from_the_wire_are_rejected() {
    let body = completion_body(&["a"], &[Some(0.25)], &[0]);
    let server = CannedServer::start(vec![(200, body)]);
    let gateway = gateway_over(HttpBackend::new(fast_settings()).unwrap());
    let a = agent(Role::ScorerLarge, &server.address);

    let err = gateway.score_logprobs(&a, None, "a").unwrap_err();
    assert!(matches!(err, GatewayError::Integrity { .. }), "{err}");
}
