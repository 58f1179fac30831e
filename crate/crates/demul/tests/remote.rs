use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use demul::remote::{RemoteBackend, RemoteConfig};
use demul_core::encoders::{BackendKind, EmbeddingBackend};
use demul_core::eval::{ExperimentConfig, World};
use serde_json::{json, Value};

const DIM: usize = 4;

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    peak: Arc<AtomicUsize>,
}

/// Deterministic stand-in embedding of a text.
fn vector(text: &str) -> Vec<f64> {
    let b = text.as_bytes();
    vec![
        b.len() as f64,
        b.first().copied().unwrap_or(0) as f64,
        b.last().copied().unwrap_or(0) as f64,
        b.iter().map(|&c| c as f64).sum::<f64>() / 100.0,
    ]
}

fn ok_body(body: &Value, reverse: bool) -> String {
    let input = body["input"].as_array().unwrap();
    let mut data: Vec<Value> = input
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "embedding": vector(t.as_str().unwrap())}))
        .collect();
    if reverse {
        data.reverse();
    }
    json!({ "data": data }).to_string()
}

fn read_request(stream: &mut TcpStream) -> (Option<String>, Value) {
    let mut reader = BufReader::new(stream);
    let mut len = 0;
    let mut auth = None;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().unwrap(),
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    (auth, serde_json::from_slice(&body).unwrap())
}

fn serve(handler: Box<Handler>, delay: Duration) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let peak = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let handler: Arc<Handler> = Arc::from(handler);
    let (s2, p2) = (seen.clone(), peak.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let (seen, peak, active, handler) = (s2.clone(), p2.clone(), active.clone(), handler.clone());
            std::thread::spawn(move || {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let (authorization, body) = read_request(&mut stream);
                let n = {
                    let mut s = seen.lock().unwrap();
                    s.push(Seen {
                        authorization,
                        body: body.clone(),
                    });
                    s.len() - 1
                };
                std::thread::sleep(delay);
                let (status, text) = handler(n, &body);
                active.fetch_sub(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    Server { url, seen, peak }
}

fn ok_server() -> Server {
    serve(Box::new(|_, body| (200, ok_body(body, false))), Duration::ZERO)
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        backoff: Duration::from_millis(1),
        api_key: None,
        ..RemoteConfig::new(url, "test-model", DIM)
    }
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("name-{i:03}")).collect()
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn batches_of_at_most_64_in_submission_order() {
    let srv = ok_server();
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    assert_eq!(backend.kind(), BackendKind::Remote);
    let t = texts(150);
    let out = backend.embed_batch(&refs(&t)).unwrap();
    for (text, v) in t.iter().zip(&out) {
        assert_eq!(v.as_slice(), vector(text).as_slice());
    }
    let seen = srv.seen.lock().unwrap();
    let mut sizes: Vec<usize> = seen.iter().map(|s| s.body["input"].as_array().unwrap().len()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![22, 64, 64]);
    assert!(seen.iter().all(|s| s.body["model"] == "test-model"));
}

#[test]
fn responses_out_of_index_order_are_reassembled() {
    let srv = serve(Box::new(|_, body| (200, ok_body(body, true))), Duration::ZERO);
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    let t = texts(10);
    let out = backend.embed_batch(&refs(&t)).unwrap();
    for (text, v) in t.iter().zip(&out) {
        assert_eq!(v.as_slice(), vector(text).as_slice());
    }
}

#[test]
fn in_flight_requests_are_bounded() {
    let srv = serve(Box::new(|_, body| (200, ok_body(body, false))), Duration::from_millis(40));
    let cfg = RemoteConfig {
        batch_size: 2,
        max_in_flight: 2,
        ..config(&srv.url)
    };
    let backend = RemoteBackend::new(cfg, None).unwrap();
    let t = texts(12);
    backend.embed_batch(&refs(&t)).unwrap();
    assert_eq!(srv.seen.lock().unwrap().len(), 6);
    assert!(srv.peak.load(Ordering::SeqCst) <= 2);
}

#[test]
fn cached_and_repeated_texts_are_not_requested_again() {
    let srv = ok_server();
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    let a = backend.embed("alpha").unwrap();
    let twice = backend.embed_batch(&["alpha", "beta", "beta", "alpha"]).unwrap();
    assert_eq!(twice[0], a);
    assert_eq!(twice[3], a);
    assert_eq!(twice[1], twice[2]);
    let seen = srv.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].body["input"], json!(["beta"]));
}

#[test]
fn cache_file_persists_and_replays_offline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.ndjson");
    let t = texts(70);
    let first = {
        let srv = ok_server();
        let backend = RemoteBackend::new(config(&srv.url), Some(&path)).unwrap();
        backend.embed_batch(&refs(&t)).unwrap()
    };
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 70);
    assert_eq!(lines[0]["text"], "name-000");
    assert_eq!(lines[0]["dim"], DIM);
    assert_eq!(lines[0]["embedding"].as_array().unwrap().len(), DIM);

    // Nothing listens on this port any more: every lookup must hit the cache.
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let replay = RemoteBackend::new(config(&dead), Some(&path)).unwrap();
    assert_eq!(replay.embed_batch(&refs(&t)).unwrap(), first);
    assert_eq!(replay.requests_sent(), 0);
}

#[test]
fn cache_with_other_dimension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.ndjson");
    std::fs::write(&path, "{\"text\":\"a\",\"dim\":2,\"embedding\":[1.0,2.0]}\n").unwrap();
    let err = RemoteBackend::new(config("http://127.0.0.1:9"), Some(&path)).unwrap_err();
    assert!(matches!(err, demul::Error::Format { offset: 0, .. }), "{err:?}");
}

#[test]
fn server_errors_are_retried_with_backoff() {
    let srv = serve(
        Box::new(|n, body| if n < 2 { (503, "busy".into()) } else { (200, ok_body(body, false)) }),
        Duration::ZERO,
    );
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    let v = backend.embed("gamma").unwrap();
    assert_eq!(v.as_slice(), vector("gamma").as_slice());
    assert_eq!(backend.requests_sent(), 3);
}

#[test]
fn rate_limit_exhaustion_reports_attempts() {
    let srv = serve(Box::new(|_, _| (429, "slow down".into())), Duration::ZERO);
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    match backend.embed("delta") {
        Err(demul_core::Error::Backend {
            attempts, retryable, ..
        }) => {
            assert_eq!(attempts, 4);
            assert!(retryable);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(srv.seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let srv = serve(Box::new(|_, _| (400, "bad model".into())), Duration::ZERO);
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    match backend.embed("delta") {
        Err(demul_core::Error::Backend {
            attempts,
            retryable,
            message,
        }) => {
            assert_eq!(attempts, 1);
            assert!(!retryable);
            assert!(message.contains("400"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn refused_connection_is_a_retryable_transport_error() {
    let dead = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let cfg = RemoteConfig {
        max_attempts: 2,
        ..config(&dead)
    };
    let backend = RemoteBackend::new(cfg, None).unwrap();
    match backend.embed("x") {
        Err(demul_core::Error::Backend {
            attempts, retryable, ..
        }) => assert_eq!((attempts, retryable), (2, true)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_dimension_is_rejected() {
    let srv = ok_server();
    let cfg = RemoteConfig {
        dim: DIM + 1,
        ..config(&srv.url)
    };
    let backend = RemoteBackend::new(cfg, None).unwrap();
    match backend.embed("eps") {
        Err(demul_core::Error::Backend { message, retryable, .. }) => {
            assert!(message.contains("dimension"), "{message}");
            assert!(!retryable);
        }
        other => panic!("{other:?}"),
    }
    assert!(backend.cached("eps").is_none());
}

#[test]
fn missing_index_is_rejected() {
    let srv = serve(
        Box::new(|_, _| (200, json!({"data": [{"index": 0, "embedding": [0.0, 0.0, 0.0, 1.0]}]}).to_string())),
        Duration::ZERO,
    );
    let backend = RemoteBackend::new(config(&srv.url), None).unwrap();
    assert!(backend.embed_batch(&["a", "b"]).is_err());
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    let srv = ok_server();
    let with = RemoteBackend::new(
        RemoteConfig {
            api_key: Some("secret".into()),
            ..config(&srv.url)
        },
        None,
    )
    .unwrap();
    with.embed("one").unwrap();
    let without = RemoteBackend::new(config(&srv.url), None).unwrap();
    without.embed("two").unwrap();
    let seen = srv.seen.lock().unwrap();
    let by_text = |t: &str| seen.iter().find(|s| s.body["input"][0] == t).unwrap().authorization.clone();
    assert_eq!(by_text("one").as_deref(), Some("Bearer secret"));
    assert_eq!(by_text("two"), None);
}

#[test]
fn remote_vectors_feed_the_distillation_targets() {
    let cfg = ExperimentConfig::small();
    let world = World::build(&cfg).unwrap();
    let task = world.task(&cfg.task, 0).unwrap();
    let d = cfg.encoder.d_llm;
    let srv = serve(
        Box::new(move |_, body| {
            let data: Vec<Value> = body["input"]
                .as_array()
                .unwrap()
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut v = vec![0.0; d];
                    v[t.as_str().unwrap().len() % d] = 1.0;
                    v[(i + 1) % d] += 0.5;
                    json!({"index": i, "embedding": v})
                })
                .collect();
            (200, json!({ "data": data }).to_string())
        }),
        Duration::ZERO,
    );
    let backend = RemoteBackend::new(RemoteConfig::new(&srv.url, "m", d), None).unwrap();
    let problem = world.problem(&task, cfg.train.loss.tau, Some(&backend)).unwrap();
    for (c, h) in task.class_names.iter().zip(problem.classes.llm()) {
        assert_eq!(h.as_slice(), backend.cached(c).unwrap().as_slice());
    }
}
