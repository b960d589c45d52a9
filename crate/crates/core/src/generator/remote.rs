use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Generator, GeneratorError, GeneratorReply, GeneratorRequest};

/// Vendor-agnostic HTTP client settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Header carrying the API key, e.g. `Authorization` or `x-api-key`.
    pub auth_header: String,
    /// Prefix placed before the key in the header value (e.g. `Bearer `).
    pub auth_prefix: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub max_concurrency: usize,
    pub max_attempts: u32,
    pub timeout_secs: f64,
    pub requests_per_second: f64,
    pub retry_base_delay_secs: f64,
    /// JSON pointer to the answer text in the response body.
    pub response_text_pointer: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://localhost:8443/v1/generate".into(),
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            api_key_env: "FFAA_API_KEY".into(),
            max_concurrency: 4,
            max_attempts: 4,
            timeout_secs: 60.0,
            requests_per_second: 2.0,
            retry_base_delay_secs: 0.5,
            response_text_pointer: "/text".into(),
        }
    }
}

struct TokenBucket {
    tokens: f64,
    capacity: f64,
    rate: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        let capacity = rate.max(1.0);
        Self {
            tokens: capacity,
            capacity,
            rate,
            last: Instant::now(),
        }
    }

    /// Takes one token or returns how long to wait for it.
    fn try_take(&mut self) -> Result<(), Duration> {
        let now = Instant::now();
        let dt = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + dt * self.rate).min(self.capacity);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - self.tokens) / self.rate))
        }
    }
}

struct Slots {
    used: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.max {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteGenerator {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    bucket: Mutex<TokenBucket>,
    slots: Slots,
    jitter: Mutex<ChaCha8Rng>,
    id: String,
}

impl std::fmt::Debug for RemoteGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // The key is never printed.
        f.debug_struct("RemoteGenerator")
            .field("endpoint", &self.config.endpoint)
            .field("has_api_key", &self.api_key.is_some())
            .finish()
    }
}

impl RemoteGenerator {
    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: RemoteConfig) -> Self {
        let key = std::env::var(&config.api_key_env).ok();
        Self::new(config, key)
    }

    pub fn new(config: RemoteConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(
                config.timeout_secs.max(0.001),
            )))
            .http_status_as_error(false)
            .build()
            .into();
        let rate = if config.requests_per_second > 0.0 {
            config.requests_per_second
        } else {
            f64::INFINITY
        };
        Self {
            id: format!("remote:{}", config.endpoint),
            bucket: Mutex::new(TokenBucket::new(if rate.is_finite() { rate } else { 1e9 })),
            slots: Slots {
                used: Mutex::new(0),
                freed: Condvar::new(),
                max: config.max_concurrency.max(1),
            },
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos() as u64)
                    .unwrap_or(0),
            )),
            api_key,
            agent,
            config,
        }
    }

    /// Wire payload for a request.
    pub fn payload(request: &GeneratorRequest) -> Result<Value, GeneratorError> {
        let encode = |p: &std::path::Path| -> Result<String, GeneratorError> {
            std::fs::read(p).map(|b| B64.encode(b)).map_err(|e| {
                GeneratorError::BackendUnavailable(format!("cannot read {}: {e}", p.display()))
            })
        };
        let mut messages = Vec::new();
        let mut first_text = Vec::new();
        first_text.extend(request.forgery_specific_prompt.as_deref());
        if request.reference_prompt.is_none() {
            first_text.push(request.question.text.as_str());
        }
        messages.push(json!({
            "role": "user",
            "text": first_text.join("\n"),
            "image_b64": [encode(&request.image_path)?],
        }));
        if let Some(rp) = &request.reference_prompt {
            let refs = request
                .reference_images
                .iter()
                .map(|p| encode(p))
                .collect::<Result<Vec<_>, _>>()?;
            messages.push(json!({
                "role": "user",
                "text": format!("{rp}\n{}", request.question.text),
                "image_b64": refs,
            }));
        }
        Ok(json!({
            "system": request.system_prompt,
            "messages": messages,
        }))
    }

    fn wait_for_token(&self) {
        loop {
            let wait = match self.bucket.lock().unwrap().try_take() {
                Ok(()) => return,
                Err(w) => w,
            };
            std::thread::sleep(wait);
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.retry_base_delay_secs * 2f64.powi(attempt as i32);
        let j: f64 = self.jitter.lock().unwrap().random_range(0.5..1.5);
        Duration::from_secs_f64((base * j).min(60.0))
    }

    fn attempt_once(&self, payload: &Value) -> Result<String, GeneratorError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header(
                self.config.auth_header.as_str(),
                format!("{}{}", self.config.auth_prefix, key),
            );
        }
        let mut resp = req
            .send_json(payload)
            .map_err(|e| GeneratorError::BackendUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {
                let body: Value = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| GeneratorError::BackendUnavailable(format!("bad body: {e}")))?;
                body.pointer(&self.config.response_text_pointer)
                    .and_then(Value::as_str)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .ok_or_else(|| {
                        GeneratorError::BackendUnavailable(format!(
                            "no text at `{}`",
                            self.config.response_text_pointer
                        ))
                    })
            }
            401 | 403 => Err(GeneratorError::Auth(format!("HTTP {status}"))),
            429 => {
                let retry_after = resp
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok())
                    .and_then(|v| v.trim().parse::<f64>().ok());
                Err(GeneratorError::RateLimited { retry_after })
            }
            _ => Err(GeneratorError::BackendUnavailable(format!("HTTP {status}"))),
        }
    }
}

impl Generator for RemoteGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorReply, GeneratorError> {
        let payload = Self::payload(request)?;
        let _slot = self.slots.acquire();
        let start = Instant::now();
        let max_attempts = self.config.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            self.wait_for_token();
            attempt += 1;
            let err = match self.attempt_once(&payload) {
                Ok(text) => {
                    return Ok(GeneratorReply {
                        text,
                        backend_id: self.id.clone(),
                        latency: start.elapsed().as_secs_f64(),
                    })
                }
                Err(e @ GeneratorError::Auth(_)) => return Err(e),
                Err(e) => e,
            };
            if attempt >= max_attempts {
                return Err(err);
            }
            let delay = match &err {
                GeneratorError::RateLimited {
                    retry_after: Some(s),
                } => Duration::from_secs_f64(s.max(0.0)),
                _ => self.backoff(attempt - 1),
            };
            std::thread::sleep(delay);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Prompt;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves scripted (status, extra header, body) replies; the last entry repeats.
    fn stub(
        script: Vec<(u16, &'static str, String)>,
    ) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (h, s) = (hits.clone(), seen.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 {
                        break;
                    }
                    if line.to_ascii_lowercase().starts_with("content-length:") {
                        len = line[15..].trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                s.lock().unwrap().push(head);
                let i = h.fetch_add(1, Ordering::SeqCst).min(script.len() - 1);
                let (status, extra, body) = &script[i];
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\n{extra}content-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/gen"), hits, seen)
    }

    fn request(dir: &tempfile::TempDir) -> GeneratorRequest {
        let img = dir.path().join("i.png");
        image::RgbImage::new(4, 4).save(&img).unwrap();
        GeneratorRequest {
            system_prompt: "sys".into(),
            forgery_specific_prompt: None,
            reference_prompt: None,
            reference_images: vec![],
            question: Prompt::non_hypothetical("real or fake?"),
            image_path: img,
            attempt: 0,
        }
    }

    fn config(endpoint: String) -> RemoteConfig {
        RemoteConfig {
            endpoint,
            auth_header: "x-api-key".into(),
            auth_prefix: String::new(),
            max_attempts: 3,
            timeout_secs: 5.0,
            requests_per_second: 0.0,
            retry_base_delay_secs: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn returns_text_and_sends_key() {
        let dir = tempfile::tempdir().unwrap();
        let (url, hits, seen) = stub(vec![(200, "", r#"{"text":"hello"}"#.into())]);
        let g = RemoteGenerator::new(config(url), Some("s3cret".into()));
        let reply = g.generate(&request(&dir)).unwrap();
        assert_eq!(reply.text, "hello");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert!(seen.lock().unwrap()[0].contains("x-api-key: s3cret"));
        assert!(!format!("{g:?}").contains("s3cret"));
    }

    #[test]
    fn honours_retry_after_then_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let (url, hits, _) = stub(vec![
            (429, "retry-after: 0\r\n", "{}".into()),
            (200, "", r#"{"text":"ok"}"#.into()),
        ]);
        let g = RemoteGenerator::new(config(url), None);
        assert_eq!(g.generate(&request(&dir)).unwrap().text, "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn attempts_are_capped() {
        let dir = tempfile::tempdir().unwrap();
        let (url, hits, _) = stub(vec![(429, "", "{}".into())]);
        let g = RemoteGenerator::new(config(url), None);
        assert!(matches!(
            g.generate(&request(&dir)),
            Err(GeneratorError::RateLimited { .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let dir = tempfile::tempdir().unwrap();
        let (url, hits, _) = stub(vec![(401, "", "{}".into())]);
        let g = RemoteGenerator::new(config(url), Some("bad".into()));
        assert!(matches!(
            g.generate(&request(&dir)),
            Err(GeneratorError::Auth(_))
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn unreachable_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/gen", listener.local_addr().unwrap());
        drop(listener);
        let g = RemoteGenerator::new(config(url), None);
        assert!(matches!(
            g.generate(&request(&dir)),
            Err(GeneratorError::BackendUnavailable(_))
        ));
    }

    #[test]
    fn payload_shape() {
        let dir = tempfile::tempdir().unwrap();
        let v = RemoteGenerator::payload(&request(&dir)).unwrap();
        assert_eq!(v["system"], "sys");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["image_b64"].as_array().unwrap().len(), 1);
    }
}
