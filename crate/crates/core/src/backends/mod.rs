//! Interfaces to the external models, their HTTP adapters and the on-disk
//! call cache.
//!
//! Every backend method is synchronous and must be safe to call from several
//! threads at once.

pub mod cache;
pub mod http;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::BackendError;
use crate::model::ImageRef;
use crate::scoring::QuestionGraphGenerator;

pub type BackendResult<T> = std::result::Result<T, BackendError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Sampling seed, for APIs that accept one. Distinguishes repeated
    /// identical requests that should be sampled afresh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_tokens: 2048,
            seed: None,
        }
    }
}

/// The LLM.
pub trait TextGenerator: Send + Sync {
    fn backend_id(&self) -> String;
    fn generate(&self, system: Option<&str>, user: &str, params: &GenerationParams) -> BackendResult<String>;
}

/// The text-to-image model.
pub trait ImageGenerator: Send + Sync {
    fn backend_id(&self) -> String;
    fn generate(&self, prompt: &str, seed: u64) -> BackendResult<ImageRef>;
}

/// Text-image embedding similarity; returns a cosine in `[-1, 1]`.
pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> String;
    fn similarity(&self, text: &str, image: &ImageRef) -> BackendResult<f64>;
}

/// Visual question answering; returns the probability of "yes".
pub trait QuestionAnswerer: Send + Sync {
    fn backend_id(&self) -> String;
    fn answer(&self, question: &str, image: &ImageRef) -> BackendResult<f64>;
}

/// Everything the optimizer needs, behind shared handles.
#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn TextGenerator>,
    pub images: Arc<dyn ImageGenerator>,
    pub embedder: Arc<dyn Embedder>,
    pub vqa: Arc<dyn QuestionAnswerer>,
    pub graphs: Arc<dyn QuestionGraphGenerator>,
}

/// Call count and cumulative latency of one backend.
#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicU64,
    errors: AtomicU64,
    micros: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallSnapshot {
    pub calls: u64,
    pub errors: u64,
    pub micros: u64,
}

impl CallStats {
    pub fn snapshot(&self) -> CallSnapshot {
        CallSnapshot {
            calls: self.calls.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            micros: self.micros.load(Ordering::Relaxed),
        }
    }

    fn record<T>(&self, started: Instant, result: &BackendResult<T>) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if result.is_err() {
            self.errors.fetch_add(1, Ordering::Relaxed);
        }
        self.micros
            .fetch_add(started.elapsed().as_micros() as u64, Ordering::Relaxed);
    }
}

/// Wrapper counting calls and latency of the wrapped backend.
pub struct Metered<T: ?Sized> {
    inner: Arc<T>,
    stats: Arc<CallStats>,
}

impl<T: ?Sized> Metered<T> {
    pub fn new(inner: Arc<T>) -> Self {
        Self {
            inner,
            stats: Arc::new(CallStats::default()),
        }
    }

    pub fn stats(&self) -> Arc<CallStats> {
        Arc::clone(&self.stats)
    }
}

impl TextGenerator for Metered<dyn TextGenerator> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn generate(&self, system: Option<&str>, user: &str, params: &GenerationParams) -> BackendResult<String> {
        let t = Instant::now();
        let r = self.inner.generate(system, user, params);
        self.stats.record(t, &r);
        r
    }
}

impl ImageGenerator for Metered<dyn ImageGenerator> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn generate(&self, prompt: &str, seed: u64) -> BackendResult<ImageRef> {
        let t = Instant::now();
        let r = self.inner.generate(prompt, seed);
        self.stats.record(t, &r);
        r
    }
}

impl Embedder for Metered<dyn Embedder> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn similarity(&self, text: &str, image: &ImageRef) -> BackendResult<f64> {
        let t = Instant::now();
        let r = self.inner.similarity(text, image);
        self.stats.record(t, &r);
        r
    }
}

impl QuestionAnswerer for Metered<dyn QuestionAnswerer> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
    fn answer(&self, question: &str, image: &ImageRef) -> BackendResult<f64> {
        let t = Instant::now();
        let r = self.inner.answer(question, image);
        self.stats.record(t, &r);
        r
    }
}

/// Per-backend statistics handles for a metered [`Backends`] bundle.
#[derive(Clone)]
pub struct BackendStats {
    pub llm: Arc<CallStats>,
    pub images: Arc<CallStats>,
    pub embedder: Arc<CallStats>,
    pub vqa: Arc<CallStats>,
}

impl BackendStats {
    pub fn snapshot(&self) -> [(&'static str, CallSnapshot); 4] {
        [
            ("llm", self.llm.snapshot()),
            ("images", self.images.snapshot()),
            ("embedder", self.embedder.snapshot()),
            ("vqa", self.vqa.snapshot()),
        ]
    }
}

impl Backends {
    /// Wraps every model backend in a [`Metered`] layer.
    pub fn metered(self) -> (Backends, BackendStats) {
        let llm = Metered::new(self.llm);
        let images = Metered::new(self.images);
        let embedder = Metered::new(self.embedder);
        let vqa = Metered::new(self.vqa);
        let stats = BackendStats {
            llm: llm.stats(),
            images: images.stats(),
            embedder: embedder.stats(),
            vqa: vqa.stats(),
        };
        let llm: Arc<dyn TextGenerator> = Arc::new(llm);
        (
            Backends {
                graphs: self.graphs.rebind_llm(llm.clone()).unwrap_or(self.graphs),
                llm,
                images: Arc::new(images),
                embedder: Arc::new(embedder),
                vqa: Arc::new(vqa),
            },
            stats,
        )
    }
}
