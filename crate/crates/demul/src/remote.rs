//! HTTP client for a text-embedding endpoint, with an on-disk cache.
//!
//! Requests go to `{base_url}/embeddings` as
//! `{"model": ..., "input": [...]}` and expect
//! `{"data": [{"index": i, "embedding": [...]}, ...]}`. The cache file holds
//! one JSON record per line: `{"text": ..., "dim": ..., "embedding": [...]}`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use demul_core::encoders::{BackendKind, EmbeddingBackend};
use demul_core::RealVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "DEMUL_EMBED_API_KEY";
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    pub dim: usize,
    /// Texts per request, at most [`MAX_BATCH`].
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff: Duration,
    pub timeout: Duration,
    pub api_key: Option<String>,
}

impl RemoteConfig {
    /// Defaults with the key taken from `DEMUL_EMBED_API_KEY`.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            model: model.into(),
            dim,
            batch_size: MAX_BATCH,
            max_in_flight: 4,
            max_attempts: 4,
            backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(30),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/embeddings", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct Response {
    data: Vec<Item>,
}

#[derive(Deserialize)]
struct Item {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    text: String,
    dim: usize,
    embedding: Vec<f64>,
}

fn backend_error(message: impl Into<String>, attempts: u32, retryable: bool) -> demul_core::Error {
    demul_core::Error::Backend {
        message: message.into(),
        attempts,
        retryable,
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache: RwLock<HashMap<String, Vec<f64>>>,
    cache_file: Option<Mutex<File>>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.config.endpoint())
            .field("model", &self.config.model)
            .field("dim", &self.config.dim)
            .finish_non_exhaustive()
    }
}

impl RemoteBackend {
    /// Client with an optional cache file, which is read if it exists and
    /// appended to as new texts are embedded.
    pub fn new(config: RemoteConfig, cache_path: Option<&Path>) -> Result<Self> {
        if config.dim == 0 || config.batch_size == 0 || config.batch_size > MAX_BATCH {
            return Err(Error::Config(format!(
                "remote backend needs dim > 0 and 1 <= batch_size <= {MAX_BATCH}"
            )));
        }
        if config.max_in_flight == 0 || config.max_attempts == 0 {
            return Err(Error::Config("max_in_flight and max_attempts must be positive".into()));
        }
        let mut cache = HashMap::new();
        let cache_file = match cache_path {
            Some(path) => {
                if path.exists() {
                    load_cache(path, config.dim, &mut cache)?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                Some(Mutex::new(f))
            }
            None => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Ok(RemoteBackend {
            config,
            agent,
            cache: RwLock::new(cache),
            cache_file,
            requests: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn cached(&self, text: &str) -> Option<Vec<f64>> {
        self.cache.read().expect("cache lock").get(text).cloned()
    }

    fn post(&self, texts: &[&str]) -> std::result::Result<Response, (String, bool)> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.config.endpoint());
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = Request {
            model: &self.config.model,
            input: texts,
        };
        match req.send_json(&body) {
            Ok(resp) => resp
                .into_json::<Response>()
                .map_err(|e| (format!("malformed response: {e}"), false)),
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let retryable = code == 429 || code >= 500;
                Err((format!("HTTP {code}: {}", detail.trim()), retryable))
            }
            Err(ureq::Error::Transport(t)) => Err((format!("transport: {t}"), true)),
        }
    }

    /// One batch with retries; vectors come back in the order of `texts`.
    fn fetch(&self, texts: &[&str]) -> demul_core::Result<Vec<Vec<f64>>> {
        let mut attempt = 0;
        let resp = loop {
            attempt += 1;
            match self.post(texts) {
                Ok(r) => break r,
                Err((msg, retryable)) => {
                    if !retryable || attempt >= self.config.max_attempts {
                        return Err(backend_error(msg, attempt, retryable));
                    }
                    tracing::warn!(attempt, "embedding request failed, retrying: {msg}");
                    std::thread::sleep(self.config.backoff * 2u32.saturating_pow(attempt - 1));
                }
            }
        };
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for item in resp.data {
            let slot = out
                .get_mut(item.index)
                .ok_or_else(|| backend_error(format!("response index {} out of range", item.index), attempt, false))?;
            if slot.is_some() {
                return Err(backend_error(format!("duplicate response index {}", item.index), attempt, false));
            }
            if item.embedding.len() != self.config.dim {
                return Err(backend_error(
                    format!(
                        "embedding dimension {} does not match the configured {}",
                        item.embedding.len(),
                        self.config.dim
                    ),
                    attempt,
                    false,
                ));
            }
            if item.embedding.iter().any(|v| !v.is_finite()) {
                return Err(backend_error("non-finite embedding value", attempt, false));
            }
            *slot = Some(item.embedding);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| backend_error(format!("response is missing index {i}"), attempt, false)))
            .collect()
    }

    /// Sends the chunks with at most `max_in_flight` requests at a time.
    fn fetch_all(&self, chunks: &[Vec<&str>]) -> Vec<demul_core::Result<Vec<Vec<f64>>>> {
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<demul_core::Result<Vec<Vec<f64>>>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.config.max_in_flight.min(chunks.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(chunk) = chunks.get(i) else { break };
                    *results[i].lock().expect("result slot") = Some(self.fetch(chunk));
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("every chunk fetched"))
            .collect()
    }

    fn store(&self, fresh: Vec<(String, Vec<f64>)>) -> demul_core::Result<()> {
        if let Some(file) = &self.cache_file {
            let mut f = file.lock().expect("cache file lock");
            let mut buf = Vec::new();
            for (text, embedding) in &fresh {
                let rec = CacheRecord {
                    text: text.clone(),
                    dim: embedding.len(),
                    embedding: embedding.clone(),
                };
                serde_json::to_writer(&mut buf, &rec).expect("record serializes");
                buf.push(b'\n');
            }
            f.write_all(&buf)
                .and_then(|_| f.flush())
                .map_err(|e| backend_error(format!("writing the embedding cache: {e}"), 0, false))?;
        }
        let mut cache = self.cache.write().expect("cache lock");
        cache.extend(fresh);
        Ok(())
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, text: &str) -> demul_core::Result<RealVec> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> demul_core::Result<Vec<RealVec>> {
        let missing: Vec<&str> = {
            let cache = self.cache.read().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        if !missing.is_empty() {
            let chunks: Vec<Vec<&str>> = missing.chunks(self.config.batch_size).map(<[_]>::to_vec).collect();
            let mut fresh = Vec::with_capacity(missing.len());
            let mut failure = None;
            for (chunk, result) in chunks.iter().zip(self.fetch_all(&chunks)) {
                match result {
                    Ok(vs) => fresh.extend(chunk.iter().map(|t| t.to_string()).zip(vs)),
                    Err(e) => {
                        failure.get_or_insert(e);
                    }
                }
            }
            // Successful chunks are kept even when another chunk failed.
            self.store(fresh)?;
            if let Some(e) = failure {
                return Err(e);
            }
        }
        let cache = self.cache.read().expect("cache lock");
        texts
            .iter()
            .map(|t| RealVec::new(cache[*t].clone()))
            .collect()
    }
}

fn load_cache(path: &Path, dim: usize, into: &mut HashMap<String, Vec<f64>>) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    for line in BufReader::new(f).split(b'\n') {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() + 1;
        if !line.iter().all(u8::is_ascii_whitespace) {
            let rec: CacheRecord = serde_json::from_slice(&line).map_err(|e| Error::Format {
                offset,
                message: format!("{}: bad cache record: {e}", path.display()),
            })?;
            if rec.dim != dim || rec.embedding.len() != dim {
                return Err(Error::Format {
                    offset,
                    message: format!(
                        "{}: cached embedding for {:?} has dimension {}, expected {dim}",
                        path.display(),
                        rec.text,
                        rec.embedding.len()
                    ),
                });
            }
            into.insert(rec.text, rec.embedding);
        }
        offset += len;
    }
    Ok(())
}

/// Path of the default cache next to a run directory.
pub fn default_cache_path(dir: &Path) -> PathBuf {
    dir.join("embed_cache.ndjson")
}
