//! Builds backends from settings.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use opt2i_core::backends::cache::CallCache;
use opt2i_core::backends::http::{EndpointConfig, HttpChat, HttpClient, HttpEmbedder, HttpImages, HttpVqa, Semaphore};
use opt2i_core::backends::{BackendStats, Backends, TextGenerator};
use opt2i_core::scoring::{FixtureGraphs, LlmGraphGenerator, QuestionGraphGenerator};
use opt2i_core::simulation::{SimParams, SimWorld};

use crate::settings::{BackendKind, BackendSettings};
use crate::ConfigError;

/// Backends ready for use, plus the handles needed for reporting.
pub struct Wired {
    pub backends: Backends,
    pub stats: BackendStats,
    pub cache: Option<Arc<CallCache>>,
    pub world: Option<Arc<SimWorld>>,
}

pub fn world(b: &BackendSettings) -> anyhow::Result<Arc<SimWorld>> {
    let world = match b.world.as_str() {
        "paper" => {
            let w = SimWorld::paper_examples();
            match b.world_seed {
                Some(seed) => {
                    let mut spec = w.spec().clone();
                    spec.seed = seed;
                    SimWorld::new(spec)?
                }
                None => w,
            }
        }
        "synthetic" => SimWorld::synthetic(b.world_seed.unwrap_or(0), b.world_prompts, SimParams::default()),
        path => {
            let mut spec = SimWorld::load(Path::new(path))
                .map_err(|e| ConfigError(format!("cannot load world {path}: {e}")))?
                .spec()
                .clone();
            if let Some(seed) = b.world_seed {
                spec.seed = seed;
            }
            SimWorld::new(spec)?
        }
    };
    Ok(Arc::new(world))
}

fn require<'a>(name: &str, ep: &'a Option<EndpointConfig>, missing: &mut Vec<String>) -> Option<&'a EndpointConfig> {
    if ep.is_none() {
        missing.push(format!("[backend.{name}] is required for the http backend"));
    }
    ep.as_ref()
}

/// Wires all backends. Credentials are resolved here, so a missing token
/// fails before any work starts. `cache_dir` wins over the configured one.
pub fn wire(b: &BackendSettings, image_dir: &Path, cache_dir: Option<PathBuf>) -> anyhow::Result<Wired> {
    let (backends, world) = match b.kind {
        BackendKind::Sim => {
            let w = world(b)?;
            let mut backends = w.backends();
            if let Some(path) = &b.graph_fixtures {
                backends.graphs = Arc::new(load_graphs(path)?);
            }
            (backends, Some(w))
        }
        BackendKind::Http => (http(b, image_dir)?, None),
    };
    let cache = match cache_dir.or_else(|| b.cache_dir.clone()) {
        Some(dir) if b.cache_enabled() => Some(Arc::new(CallCache::new(dir))),
        _ => None,
    };
    let backends = match &cache {
        Some(c) => backends.cached(c.clone()),
        None => backends,
    };
    let (backends, stats) = backends.metered();
    Ok(Wired {
        backends,
        stats,
        cache,
        world,
    })
}

fn load_graphs(path: &Path) -> anyhow::Result<FixtureGraphs> {
    FixtureGraphs::load(path).map_err(|e| ConfigError(format!("cannot load graph fixtures {}: {e}", path.display())).into())
}

fn http(b: &BackendSettings, image_dir: &Path) -> anyhow::Result<Backends> {
    let mut missing = Vec::new();
    let llm = require("llm", &b.llm, &mut missing);
    let images = require("images", &b.images, &mut missing);
    let embedder = require("embedder", &b.embedder, &mut missing);
    let vqa = require("vqa", &b.vqa, &mut missing);
    let (Some(llm), Some(images), Some(embedder), Some(vqa)) = (llm, images, embedder, vqa) else {
        return Err(ConfigError(missing.join("; ")).into());
    };
    let limit = Arc::new(Semaphore::new(b.max_concurrent_requests));
    let client = |ep: &EndpointConfig| HttpClient::new(ep.clone(), limit.clone());
    let llm: Arc<dyn TextGenerator> = Arc::new(HttpChat::new(client(llm)?));
    let graphs: Arc<dyn QuestionGraphGenerator> = match &b.graph_fixtures {
        Some(path) => Arc::new(load_graphs(path)?),
        None => Arc::new(LlmGraphGenerator::new(llm.clone())),
    };
    Ok(Backends {
        llm,
        images: Arc::new(HttpImages::new(client(images)?, image_dir)),
        embedder: Arc::new(HttpEmbedder::new(client(embedder)?)),
        vqa: Arc::new(HttpVqa::new(client(vqa)?)),
        graphs,
    })
}
