use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use evrep::llm_client::{
    complete_many, describe, parse_prediction, recognize, BackendConfig, BackendKind, CaptionRequest, HttpBackend,
    LlmBackend, LlmError, MockBackend, Prediction, CAPTION_PROMPT,
};
use evrep::{RepImage, RepKind};
use ndarray::Array3;
use proptest::prelude::*;
use serde_json::Value;

#[derive(Default)]
struct Stats {
    active: AtomicUsize,
    peak: AtomicUsize,
    served: AtomicUsize,
    bodies: Mutex<Vec<(Option<String>, Value)>>,
}

/// Minimal HTTP/1.1 server. `reply(n)` gives status, body and delay for the
/// n-th request (0-based).
fn stub_server(
    reply: impl Fn(usize) -> (u16, String, Duration) + Send + Sync + 'static,
) -> (String, Arc<Stats>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stats = Arc::new(Stats::default());
    let reply = Arc::new(reply);
    let s = stats.clone();
    std::thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(conn) = conn else { break };
            let (s, reply) = (s.clone(), reply.clone());
            std::thread::spawn(move || handle(conn, &s, &*reply));
        }
    });
    (format!("http://{addr}/v1"), stats)
}

fn handle(conn: TcpStream, stats: &Stats, reply: &dyn Fn(usize) -> (u16, String, Duration)) {
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
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
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let n = stats.served.fetch_add(1, Ordering::SeqCst);
    let now = stats.active.fetch_add(1, Ordering::SeqCst) + 1;
    stats.peak.fetch_max(now, Ordering::SeqCst);
    stats
        .bodies
        .lock()
        .unwrap()
        .push((auth, serde_json::from_slice(&body).unwrap_or(Value::Null)));
    let (status, payload, delay) = reply(n);
    std::thread::sleep(delay);
    stats.active.fetch_sub(1, Ordering::SeqCst);
    let mut conn = conn;
    let _ = write!(
        conn,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(endpoint: &str) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        endpoint: Some(endpoint.to_string()),
        model: Some("stub-model".into()),
        api_key_env: "EVREP_TEST_KEY_UNSET".into(),
        timeout_secs: 5.0,
        max_retries: 3,
        backoff_ms: 10,
        concurrency: 2,
        ..Default::default()
    }
}

fn image(seed: usize) -> RepImage {
    RepImage::new(
        Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 7 + x + c + seed) % 11) as f64 / 10.0),
        RepKind::Evrep,
    )
}

#[test]
fn http_returns_stub_payload() {
    let (url, stats) = stub_server(|_| (200, completion("A red sports car."), Duration::ZERO));
    let backend = HttpBackend::new(config(&url)).unwrap();
    let resp = describe(&backend, &image(0)).unwrap();
    assert_eq!(resp.text, "A red sports car.");
    assert_eq!(resp.backend, "http");

    let bodies = stats.bodies.lock().unwrap();
    let (auth, body) = &bodies[0];
    assert!(auth.is_none());
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 64);
    let content = &body["messages"][0]["content"];
    assert_eq!(content[0]["type"], "text");
    assert_eq!(content[0]["text"], CAPTION_PROMPT);
    let url = content[1]["image_url"]["url"].as_str().unwrap();
    let b64 = url.strip_prefix("data:image/png;base64,").unwrap();
    use base64::Engine;
    let png = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    let decoded = evrep::representation::decode_png(&png, RepKind::Evrep).unwrap();
    assert_eq!(decoded.to_rgb8(), image(0).to_rgb8());
}

#[test]
fn bearer_token_from_named_variable() {
    let (url, stats) = stub_server(|_| (200, completion("ok"), Duration::ZERO));
    std::env::set_var("EVREP_TEST_KEY_SET", "sk-test");
    let backend = HttpBackend::new(BackendConfig {
        api_key_env: "EVREP_TEST_KEY_SET".into(),
        ..config(&url)
    })
    .unwrap();
    describe(&backend, &image(1)).unwrap();
    assert_eq!(stats.bodies.lock().unwrap()[0].0.as_deref(), Some("Bearer sk-test"));
}

#[test]
fn resize_option_changes_sent_resolution() {
    let (url, stats) = stub_server(|_| (200, completion("ok"), Duration::ZERO));
    let backend = HttpBackend::new(BackendConfig {
        image_size: Some([14, 10]),
        ..config(&url)
    })
    .unwrap();
    describe(&backend, &image(2)).unwrap();
    let bodies = stats.bodies.lock().unwrap();
    let url = bodies[0].1["messages"][0]["content"][1]["image_url"]["url"].as_str().unwrap().to_string();
    use base64::Engine;
    let png = base64::engine::general_purpose::STANDARD
        .decode(url.strip_prefix("data:image/png;base64,").unwrap())
        .unwrap();
    let decoded = evrep::representation::decode_png(&png, RepKind::Evrep).unwrap();
    assert_eq!((decoded.height(), decoded.width()), (10, 14));
}

#[test]
fn rate_limit_is_retried_then_succeeds() {
    let (url, stats) = stub_server(|n| {
        if n < 2 {
            (429, "{}".into(), Duration::ZERO)
        } else {
            (200, completion("fine"), Duration::ZERO)
        }
    });
    let backend = HttpBackend::new(config(&url)).unwrap();
    assert_eq!(describe(&backend, &image(0)).unwrap().text, "fine");
    assert_eq!(stats.served.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_rate_limit_surfaces_after_retries() {
    let (url, stats) = stub_server(|_| (429, "{}".into(), Duration::ZERO));
    let backend = HttpBackend::new(BackendConfig {
        max_retries: 2,
        ..config(&url)
    })
    .unwrap();
    let err = describe(&backend, &image(0)).unwrap_err();
    assert!(matches!(err, LlmError::RateLimited { attempts: 3 }), "{err:?}");
    assert_eq!(stats.served.load(Ordering::SeqCst), 3);
}

#[test]
fn client_error_is_not_retried() {
    let (url, stats) = stub_server(|_| (400, "{\"error\":\"bad\"}".into(), Duration::ZERO));
    let backend = HttpBackend::new(config(&url)).unwrap();
    let err = describe(&backend, &image(0)).unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 400, .. }), "{err:?}");
    assert_eq!(stats.served.load(Ordering::SeqCst), 1);
}

#[test]
fn server_error_retried_and_surfaced() {
    let (url, stats) = stub_server(|_| (503, "{}".into(), Duration::ZERO));
    let backend = HttpBackend::new(BackendConfig {
        max_retries: 1,
        ..config(&url)
    })
    .unwrap();
    assert!(matches!(describe(&backend, &image(0)), Err(LlmError::Http { status: 503, .. })));
    assert_eq!(stats.served.load(Ordering::SeqCst), 2);
}

#[test]
fn slow_server_times_out() {
    let (url, _) = stub_server(|_| (200, completion("late"), Duration::from_millis(800)));
    let backend = HttpBackend::new(BackendConfig {
        timeout_secs: 0.2,
        max_retries: 1,
        ..config(&url)
    })
    .unwrap();
    let err = describe(&backend, &image(0)).unwrap_err();
    assert!(matches!(err, LlmError::Timeout { attempts: 2 }), "{err:?}");
}

#[test]
fn concurrency_cap_is_respected() {
    let (url, stats) = stub_server(|n| (200, completion(&format!("reply {n}")), Duration::from_millis(60)));
    let backend = HttpBackend::new(BackendConfig {
        concurrency: 3,
        ..config(&url)
    })
    .unwrap();
    let requests: Vec<CaptionRequest> = (0..12).map(|i| CaptionRequest::new(image(i), CAPTION_PROMPT)).collect();
    // more workers than permits
    let results = complete_many(&backend, &requests, 8);
    assert_eq!(results.len(), 12);
    let mut ids: Vec<usize> = results.iter().map(|(i, r)| {
        assert!(r.is_ok());
        *i
    }).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..12).collect::<Vec<_>>());
    let peak = stats.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak concurrency {peak}");
    assert!(peak >= 2, "requests never overlapped (peak {peak})");
}

#[test]
fn mock_is_deterministic() {
    let classes: Vec<String> = ["zero", "one", "two"].iter().map(|s| s.to_string()).collect();
    let a = MockBackend::new();
    let b = MockBackend::new();
    for i in 0..10 {
        let img = image(i);
        assert_eq!(describe(&a, &img).unwrap().text, describe(&b, &img).unwrap().text);
        let r = recognize(&a, &img, &classes).unwrap().text;
        assert!(classes.contains(&r));
    }
    assert_eq!(a.calls(), 20);
    assert_eq!(describe(&a, &RepImage::new(Array3::zeros((8, 8, 3)), RepKind::Evrep)).unwrap().text, "uniform dark image");
}

#[test]
fn unreachable_endpoint_is_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = HttpBackend::new(config(&format!("http://{addr}"))).unwrap();
    let err = backend.complete(&CaptionRequest::new(image(0), CAPTION_PROMPT)).unwrap_err();
    assert!(matches!(err, LlmError::Transport(_) | LlmError::Timeout { .. }), "{err:?}");
}

proptest! {
    #[test]
    fn prediction_is_member_or_unknown(text in "[a-zA-Z ,.]{0,40}", picks in proptest::collection::vec(0usize..6, 1..4)) {
        let pool = ["cat", "dog", "sea horse", "car", "Chair", "x"];
        let classes: Vec<String> = picks.iter().map(|&i| pool[i].to_string()).collect();
        match parse_prediction(&text, &classes) {
            Prediction::Label(l) => prop_assert!(classes.contains(&l)),
            Prediction::Unknown => {}
        }
    }
}
