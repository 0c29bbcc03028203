//! JSON-over-HTTP adapters for the four backend interfaces.
//!
//! Wire formats:
//!
//! | backend   | request body                                        | response field                 |
//! |-----------|-----------------------------------------------------|--------------------------------|
//! | chat      | `{model, messages: [{role, content}], temperature, max_tokens, seed?}` | `choices[0].message.content` |
//! | image     | `{prompt, seed}`                                    | `{image: base64, id}`          |
//! | embedder  | `{text, image_id}`                                  | `{cosine}`                     |
//! | vqa       | `{question, image_id}`                              | `{yes_probability}`            |
//!
//! A bearer token is read from the configured environment variable when the
//! adapter is built. Transient failures (429, 5xx, timeouts, transport) are
//! retried up to three times with exponential backoff; 401/403 never are.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendResult, Embedder, GenerationParams, ImageGenerator, QuestionAnswerer, TextGenerator};
use crate::digest::sha256_hex;
use crate::error::BackendError;
use crate::model::ImageRef;

pub const MAX_RETRIES: u32 = 3;
const BODY_EXCERPT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    /// Model name sent to chat endpoints; also used as the backend id so that
    /// cache keys survive endpoint moves.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: None,
            api_key_env: None,
            timeout_secs: default_timeout(),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

pub struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Shared request machinery: auth, retries, concurrency limit.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: EndpointConfig,
    token: Option<String>,
    limit: Arc<Semaphore>,
    retries: AtomicU64,
    backoff: Duration,
}

impl HttpClient {
    pub fn new(endpoint: EndpointConfig, limit: Arc<Semaphore>) -> BackendResult<Self> {
        let token = match &endpoint.api_key_env {
            Some(var) => match std::env::var(var) {
                Ok(t) if !t.is_empty() => Some(t),
                _ => return Err(BackendError::MissingCredential(var.clone())),
            },
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint,
            token,
            limit,
            retries: AtomicU64::new(0),
            backoff: Duration::from_millis(500),
        })
    }

    /// Overrides the first backoff delay (doubled after each retry).
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    /// Number of retries performed so far.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    pub fn backend_id(&self) -> String {
        self.endpoint
            .model
            .clone()
            .unwrap_or_else(|| self.endpoint.url.clone())
    }

    fn attempt(&self, body: &Value) -> BackendResult<Value> {
        let mut req = self.agent.post(&self.endpoint.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .header("Content-Type", "application/json")
            .send(body.to_string().as_bytes())
            .map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(map_transport)?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::Decode(format!("{e}: {}", excerpt(&text)))),
            401 | 403 => Err(BackendError::Auth {
                status,
                body: excerpt(&text),
            }),
            _ => Err(BackendError::Status {
                status,
                body: excerpt(&text),
            }),
        }
    }

    pub fn post_json(&self, body: &Value) -> BackendResult<Value> {
        let _permit = self.limit.acquire();
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(body) {
                Err(e) if e.is_transient() && attempt < MAX_RETRIES => {
                    attempt += 1;
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    log::warn!(
                        "{}: {e}; retry {attempt}/{MAX_RETRIES} in {delay:?}",
                        self.endpoint.url
                    );
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }
}

fn excerpt(text: &str) -> String {
    match text.char_indices().nth(BODY_EXCERPT) {
        Some((i, _)) => format!("{}...", &text[..i]),
        None => text.to_string(),
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Transport(other.to_string()),
    }
}

fn field<'a>(v: &'a Value, path: &[&str]) -> BackendResult<&'a Value> {
    let mut cur = v;
    for p in path {
        cur = match p.parse::<usize>() {
            Ok(i) => cur.get(i),
            Err(_) => cur.get(*p),
        }
        .ok_or_else(|| BackendError::Decode(format!("response lacks {}", path.join("."))))?;
    }
    Ok(cur)
}

fn number(v: &Value, name: &str) -> BackendResult<f64> {
    let x = field(v, &[name])?
        .as_f64()
        .ok_or_else(|| BackendError::Decode(format!("{name} is not a number")))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(BackendError::NonFinite)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HttpPayload {
    id: String,
    file: String,
}

/// Server-side id of an image produced by [`HttpImages`].
pub fn image_id(image: &ImageRef) -> BackendResult<String> {
    serde_json::from_str::<HttpPayload>(&image.payload)
        .map(|p| p.id)
        .map_err(|_| BackendError::InvalidImage(image.payload.clone()))
}

pub struct HttpChat {
    client: HttpClient,
}

impl HttpChat {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }

    pub fn client(&self) -> &HttpClient {
        &self.client
    }
}

impl TextGenerator for HttpChat {
    fn backend_id(&self) -> String {
        self.client.backend_id()
    }

    fn generate(&self, system: Option<&str>, user: &str, params: &GenerationParams) -> BackendResult<String> {
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(json!({ "role": "system", "content": s }));
        }
        messages.push(json!({ "role": "user", "content": user }));
        let mut body = json!({
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(m) = &self.client.endpoint.model {
            body["model"] = json!(m);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.client.post_json(&body)?;
        field(&resp, &["choices", "0", "message", "content"])?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Decode("message content is not a string".into()))
    }
}

pub struct HttpImages {
    client: HttpClient,
    image_dir: PathBuf,
}

impl HttpImages {
    pub fn new(client: HttpClient, image_dir: impl Into<PathBuf>) -> Self {
        Self {
            client,
            image_dir: image_dir.into(),
        }
    }
}

impl ImageGenerator for HttpImages {
    fn backend_id(&self) -> String {
        self.client.backend_id()
    }

    fn generate(&self, prompt: &str, seed: u64) -> BackendResult<ImageRef> {
        let resp = self.client.post_json(&json!({ "prompt": prompt, "seed": seed }))?;
        let encoded = field(&resp, &["image"])?
            .as_str()
            .ok_or_else(|| BackendError::Decode("image is not a string".into()))?;
        let id = match field(&resp, &["id"])? {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(encoded)
            .map_err(|e| BackendError::Decode(format!("image is not base64: {e}")))?;
        fs::create_dir_all(&self.image_dir)?;
        let file = self.image_dir.join(format!("{}.img", sha256_hex(&bytes)));
        if !file.exists() {
            fs::write(&file, &bytes)?;
        }
        let payload = HttpPayload {
            id,
            file: file.to_string_lossy().into_owned(),
        };
        Ok(ImageRef {
            backend_id: self.backend_id(),
            prompt_digest: sha256_hex(prompt),
            seed,
            payload: serde_json::to_string(&payload).map_err(|e| BackendError::Decode(e.to_string()))?,
        })
    }
}

pub struct HttpEmbedder {
    client: HttpClient,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl Embedder for HttpEmbedder {
    fn backend_id(&self) -> String {
        self.client.backend_id()
    }

    fn similarity(&self, text: &str, image: &ImageRef) -> BackendResult<f64> {
        let resp = self
            .client
            .post_json(&json!({ "text": text, "image_id": image_id(image)? }))?;
        number(&resp, "cosine")
    }
}

pub struct HttpVqa {
    client: HttpClient,
}

impl HttpVqa {
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl QuestionAnswerer for HttpVqa {
    fn backend_id(&self) -> String {
        self.client.backend_id()
    }

    fn answer(&self, question: &str, image: &ImageRef) -> BackendResult<f64> {
        let resp = self
            .client
            .post_json(&json!({ "question": question, "image_id": image_id(image)? }))?;
        number(&resp, "yes_probability")
    }
}
