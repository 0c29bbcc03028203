//! Content-addressed, append-only cache of backend calls.
//!
//! Layout: `<root>/<hex[..2]>/<hex>.json`, where `hex` is the SHA-256 of the
//! canonical request JSON `{"backend":..,"op":..,"request":..}`. Each record
//! stores the key, the request, the response and the response digest. A
//! record whose digest does not match, or that fails to parse, counts as a
//! miss. Records are never overwritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendResult, Embedder, GenerationParams, ImageGenerator, QuestionAnswerer, TextGenerator};
use crate::digest::sha256_hex;
use crate::model::ImageRef;

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    key: String,
    request: Value,
    response: Value,
    response_sha256: String,
}

#[derive(Debug)]
pub struct CallCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CallCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn key(backend: &str, op: &str, request: &Value) -> (String, Value) {
        let canonical = json!({ "backend": backend, "op": op, "request": request });
        // serde_json maps are ordered by key, so this text is canonical.
        let text = canonical.to_string();
        (sha256_hex(text.as_bytes()), canonical)
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn lookup(&self, key: &str) -> Option<Value> {
        let path = self.path(key);
        let bytes = fs::read(&path).ok()?;
        let record: Record = match serde_json::from_slice(&bytes) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("ignoring unreadable cache record {}: {e}", path.display());
                return None;
            }
        };
        if record.key != key || sha256_hex(record.response.to_string()) != record.response_sha256 {
            log::warn!("ignoring corrupted cache record {}", path.display());
            return None;
        }
        Some(record.response)
    }

    pub fn store(&self, key: &str, request: Value, response: &Value) {
        let path = self.path(key);
        if path.exists() {
            return;
        }
        let record = Record {
            key: key.to_string(),
            request,
            response: response.clone(),
            response_sha256: sha256_hex(response.to_string()),
        };
        if let Err(e) = write_new(&path, &record) {
            log::warn!("cache write failed for {}: {e}; continuing uncached", path.display());
        }
    }

    /// Replays a stored response or performs `call` and records the result.
    pub fn call<T, F>(&self, backend: &str, op: &str, request: Value, call: F) -> BackendResult<T>
    where
        T: Serialize + for<'de> Deserialize<'de>,
        F: FnOnce() -> BackendResult<T>,
    {
        let (key, canonical) = Self::key(backend, op, &request);
        if let Some(stored) = self.lookup(&key) {
            match serde_json::from_value(stored) {
                Ok(v) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(v);
                }
                Err(e) => log::warn!("cache record {key} has the wrong shape: {e}"),
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = call()?;
        match serde_json::to_value(&value) {
            Ok(response) => self.store(&key, canonical, &response),
            Err(e) => log::warn!("response for {key} is not serializable: {e}"),
        }
        Ok(value)
    }
}

fn write_new(path: &Path, record: &Record) -> std::io::Result<()> {
    let dir = path.parent().expect("cache paths have a parent");
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(&serde_json::to_vec_pretty(record)?)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    // Losing the race to another writer of the same key is harmless: both
    // records carry the same request.
    if path.exists() {
        let _ = fs::remove_file(&tmp.0);
        return Ok(());
    }
    fs::rename(&tmp.0, path)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, fs::File)> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    let file = fs::OpenOptions::new().write(true).create_new(true).open(&path)?;
    Ok((path, file))
}

/// Backend wrapper that routes every call through a [`CallCache`].
pub struct Cached<T: ?Sized> {
    inner: Arc<T>,
    cache: Arc<CallCache>,
}

impl<T: ?Sized> Cached<T> {
    pub fn new(inner: Arc<T>, cache: Arc<CallCache>) -> Self {
        Self { inner, cache }
    }
}

impl TextGenerator for Cached<dyn TextGenerator> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn generate(&self, system: Option<&str>, user: &str, params: &GenerationParams) -> BackendResult<String> {
        let mut request = json!({
            "system": system,
            "user": user,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            request["seed"] = json!(seed);
        }
        self.cache.call(&self.inner.backend_id(), "generate", request, || {
            self.inner.generate(system, user, params)
        })
    }
}

impl ImageGenerator for Cached<dyn ImageGenerator> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn generate(&self, prompt: &str, seed: u64) -> BackendResult<ImageRef> {
        let request = json!({ "prompt": prompt, "seed": seed });
        self.cache.call(&self.inner.backend_id(), "image", request, || {
            self.inner.generate(prompt, seed)
        })
    }
}

impl Embedder for Cached<dyn Embedder> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn similarity(&self, text: &str, image: &ImageRef) -> BackendResult<f64> {
        let request = json!({ "text": text, "image": image });
        self.cache.call(&self.inner.backend_id(), "similarity", request, || {
            self.inner.similarity(text, image)
        })
    }
}

impl QuestionAnswerer for Cached<dyn QuestionAnswerer> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn answer(&self, question: &str, image: &ImageRef) -> BackendResult<f64> {
        let request = json!({ "question": question, "image": image });
        self.cache.call(&self.inner.backend_id(), "answer", request, || {
            self.inner.answer(question, image)
        })
    }
}

impl super::Backends {
    /// Routes the four model backends through `cache`.
    pub fn cached(self, cache: Arc<CallCache>) -> super::Backends {
        let llm: Arc<dyn TextGenerator> = Arc::new(Cached::new(self.llm, Arc::clone(&cache)));
        super::Backends {
            graphs: self.graphs.rebind_llm(llm.clone()).unwrap_or(self.graphs),
            llm,
            images: Arc::new(Cached::new(self.images, Arc::clone(&cache))),
            embedder: Arc::new(Cached::new(self.embedder, Arc::clone(&cache))),
            vqa: Arc::new(Cached::new(self.vqa, cache)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::BackendError;
    use std::sync::atomic::AtomicUsize;

    struct Counting(AtomicUsize);

    impl ImageGenerator for Counting {
        fn backend_id(&self) -> String {
            "counting".into()
        }
        fn generate(&self, prompt: &str, seed: u64) -> BackendResult<ImageRef> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(ImageRef {
                backend_id: "counting".into(),
                prompt_digest: sha256_hex(prompt),
                seed,
                payload: format!("{prompt}#{seed}"),
            })
        }
    }

    fn setup() -> (tempfile::TempDir, Arc<Counting>, Cached<dyn ImageGenerator>) {
        let dir = tempfile::tempdir().unwrap();
        let inner = Arc::new(Counting(AtomicUsize::new(0)));
        let cached = Cached::new(
            inner.clone() as Arc<dyn ImageGenerator>,
            Arc::new(CallCache::new(dir.path())),
        );
        (dir, inner, cached)
    }

    #[test]
    fn second_identical_call_is_replayed() {
        let (_dir, inner, cached) = setup();
        let a = cached.generate("a cat", 1).unwrap();
        let b = cached.generate("a cat", 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(inner.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn seed_is_part_of_the_key() {
        let (_dir, inner, cached) = setup();
        cached.generate("a cat", 1).unwrap();
        cached.generate("a cat", 2).unwrap();
        assert_eq!(inner.0.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn corrupted_record_is_a_miss() {
        let (dir, inner, cached) = setup();
        cached.generate("a cat", 1).unwrap();
        let (key, _) = CallCache::key("counting", "image", &json!({"prompt": "a cat", "seed": 1}));
        let path = dir.path().join(&key[..2]).join(format!("{key}.json"));
        let text = fs::read_to_string(&path).unwrap().replace("a cat#1", "a dog#1");
        fs::write(&path, text).unwrap();
        let again = cached.generate("a cat", 1).unwrap();
        assert_eq!(again.payload, "a cat#1");
        assert_eq!(inner.0.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unwritable_store_degrades_to_pass_through() {
        let file = tempfile::NamedTempFile::new().unwrap();
        let inner = Arc::new(Counting(AtomicUsize::new(0)));
        // A regular file as root makes every directory creation fail.
        let cached = Cached::new(
            inner.clone() as Arc<dyn ImageGenerator>,
            Arc::new(CallCache::new(file.path())),
        );
        assert!(cached.generate("x", 0).is_ok());
        assert!(cached.generate("x", 0).is_ok());
        assert_eq!(inner.0.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn errors_are_not_cached() {
        struct Failing;
        impl QuestionAnswerer for Failing {
            fn backend_id(&self) -> String {
                "f".into()
            }
            fn answer(&self, _: &str, _: &ImageRef) -> BackendResult<f64> {
                Err(BackendError::Timeout)
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(CallCache::new(dir.path()));
        let c = Cached::new(Arc::new(Failing) as Arc<dyn QuestionAnswerer>, cache.clone());
        let img = ImageRef {
            backend_id: "b".into(),
            prompt_digest: "d".into(),
            seed: 0,
            payload: String::new(),
        };
        assert!(c.answer("q?", &img).is_err());
        assert_eq!(cache.misses(), 1);
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
