//! Layered settings: built-in defaults, then an optional TOML file, then
//! command-line flags. The merged result is what gets snapshotted into run
//! directories as `settings.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use opt2i_core::backends::http::EndpointConfig;
use opt2i_core::optimizer::Method;
use opt2i_core::{MetaPromptVariant, Objective, OptimizationConfig};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub run: RunSettings,
    pub backend: BackendSettings,
    pub benchmark: BenchmarkSettings,
}

/// Optimization knobs. `fixed_seeds` defaults to `0..images`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub objective: Objective,
    pub iterations: u32,
    pub prompts_per_iter: u32,
    pub history: u32,
    pub images: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_seeds: Option<Vec<u64>>,
    /// Draw new image seeds per candidate instead of reusing fixed ones.
    pub fresh_seeds: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    pub target: f64,
    /// Meta-prompt instruction flags for the dcs objective.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        let c = OptimizationConfig::default();
        Self {
            objective: c.objective,
            iterations: c.max_iterations,
            prompts_per_iter: c.prompts_per_iter,
            history: c.history_capacity,
            images: c.images_per_prompt,
            fixed_seeds: None,
            fresh_seeds: false,
            temperature: c.llm_temperature,
            max_tokens: c.llm_max_tokens,
            target: c.target_score,
            variant: None,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Sim,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    /// `paper`, `synthetic`, or the path of a world JSON file.
    pub world: String,
    /// Overrides the world's RNG seed (the generator seed for `synthetic`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world_seed: Option<u64>,
    /// Number of prompts in a synthetic world.
    pub world_prompts: usize,
    /// Record every backend call in a cache directory. Defaults to on for
    /// http and off for sim.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<bool>,
    /// Cache location for commands without a run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub max_concurrent_requests: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm: Option<EndpointConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<EndpointConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EndpointConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vqa: Option<EndpointConfig>,
    /// Question graphs read from a file instead of generated by the LLM.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_fixtures: Option<PathBuf>,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Sim,
            world: "paper".into(),
            world_seed: None,
            world_prompts: 50,
            cache: None,
            cache_dir: None,
            max_concurrent_requests: 8,
            llm: None,
            images: None,
            embedder: None,
            vqa: None,
            graph_fixtures: None,
        }
    }
}

impl BackendSettings {
    pub fn cache_enabled(&self) -> bool {
        self.cache.unwrap_or(self.kind == BackendKind::Http)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSettings {
    /// Dataset file (csv, tsv or one prompt per line). Without one, the sim
    /// world's own prompts are used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub methods: Vec<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    /// Drop prompts whose user prompt already scores 1 (dsg only).
    pub filter_perfect: bool,
    /// Per-method changes to the loop shape. Methods must still end up with
    /// equal budgets.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<Method, MethodOverride>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_per_iter: Option<u32>,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            methods: vec![Method::Opt2i],
            parallelism: None,
            filter_perfect: false,
            overrides: BTreeMap::new(),
        }
    }
}

/// Command-line values that override the file. Every field has a settings
/// key of the same meaning.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// [run] objective
    #[arg(long, global = true)]
    pub objective: Option<Objective>,
    /// [run] iterations
    #[arg(long, global = true)]
    pub iters: Option<u32>,
    /// [run] prompts_per_iter
    #[arg(long, global = true)]
    pub ppi: Option<u32>,
    /// [run] history
    #[arg(long, global = true)]
    pub history: Option<u32>,
    /// [run] images
    #[arg(long, global = true)]
    pub images: Option<u32>,
    /// [run] fixed_seeds, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// [run] fresh_seeds
    #[arg(long, global = true)]
    pub fresh_seeds: bool,
    /// [run] temperature
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// [run] max_tokens
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
    /// [run] target
    #[arg(long, global = true)]
    pub target: Option<f64>,
    /// [run] variant, comma separated
    #[arg(long, global = true, value_delimiter = ',')]
    pub variant: Option<Vec<String>>,
    /// [run] seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// [backend] kind
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// [backend] world
    #[arg(long, global = true)]
    pub world: Option<String>,
    /// [backend] world_seed
    #[arg(long, global = true)]
    pub world_seed: Option<u64>,
    /// [backend] world_prompts
    #[arg(long, global = true)]
    pub world_prompts: Option<usize>,
    /// [backend] cache
    #[arg(long, global = true, value_name = "BOOL")]
    pub cache: Option<bool>,
    /// [backend] cache_dir
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// [backend] max_concurrent_requests
    #[arg(long, global = true)]
    pub max_concurrency: Option<usize>,
    /// [backend] graph_fixtures
    #[arg(long, global = true)]
    pub graph_fixtures: Option<PathBuf>,
    /// [benchmark] dataset
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// [benchmark] methods, comma separated
    #[arg(long = "method", global = true, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// [benchmark] parallelism
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// [benchmark] filter_perfect
    #[arg(long, global = true)]
    pub filter_perfect: bool,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid settings: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("invalid settings in {}: {e}", path.display()))),
            _ => Self::from_toml(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0))),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let r = &mut self.run;
        set(&mut r.objective, o.objective);
        set(&mut r.iterations, o.iters);
        set(&mut r.prompts_per_iter, o.ppi);
        set(&mut r.history, o.history);
        set(&mut r.images, o.images);
        if o.seeds.is_some() {
            r.fixed_seeds = o.seeds.clone();
        }
        r.fresh_seeds |= o.fresh_seeds;
        set(&mut r.temperature, o.temperature);
        set(&mut r.max_tokens, o.max_tokens);
        set(&mut r.target, o.target);
        if o.variant.is_some() {
            r.variant = o.variant.clone();
        }
        set(&mut r.seed, o.seed);

        let b = &mut self.backend;
        set(&mut b.kind, o.backend);
        set(&mut b.world, o.world.clone());
        if o.world_seed.is_some() {
            b.world_seed = o.world_seed;
        }
        set(&mut b.world_prompts, o.world_prompts);
        if o.cache.is_some() {
            b.cache = o.cache;
        }
        if o.cache_dir.is_some() {
            b.cache_dir = o.cache_dir.clone();
        }
        set(&mut b.max_concurrent_requests, o.max_concurrency);
        if o.graph_fixtures.is_some() {
            b.graph_fixtures = o.graph_fixtures.clone();
        }

        let m = &mut self.benchmark;
        if o.dataset.is_some() {
            m.dataset = o.dataset.clone();
        }
        set(&mut m.methods, o.methods.clone());
        if o.parallelism.is_some() {
            m.parallelism = o.parallelism;
        }
        m.filter_perfect |= o.filter_perfect;
    }

    /// The optimizer configuration, with every violated constraint listed.
    pub fn optimization(&self) -> Result<OptimizationConfig, ConfigError> {
        let r = &self.run;
        let mut problems = Vec::new();
        let fixed_seeds = match (r.fresh_seeds, &r.fixed_seeds) {
            (true, Some(_)) => {
                problems.push("fresh_seeds and fixed_seeds are mutually exclusive".to_string());
                None
            }
            (true, None) => None,
            (false, Some(s)) => Some(s.clone()),
            (false, None) => Some((0..u64::from(r.images)).collect()),
        };
        let metaprompt_variant = match &r.variant {
            Some(names) => MetaPromptVariant::from_names(names).unwrap_or_else(|e| {
                problems.push(e.to_string());
                MetaPromptVariant::default()
            }),
            None => MetaPromptVariant::default(),
        };
        let config = OptimizationConfig {
            max_iterations: r.iterations,
            prompts_per_iter: r.prompts_per_iter,
            history_capacity: r.history,
            images_per_prompt: r.images,
            fixed_seeds,
            llm_temperature: r.temperature,
            llm_max_tokens: r.max_tokens,
            target_score: r.target,
            objective: r.objective,
            metaprompt_variant,
            seed: r.seed,
        };
        problems.extend(config.violations());
        if self.backend.max_concurrent_requests == 0 {
            problems.push("max_concurrent_requests must be >= 1".into());
        }
        if self.benchmark.methods.is_empty() {
            problems.push("at least one benchmark method is required".into());
        }
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError(format!("invalid configuration: {}", problems.join("; "))))
        }
    }
}

impl Settings {
    /// One configuration per benchmark method.
    pub fn plans(&self, base: &OptimizationConfig) -> Vec<(Method, OptimizationConfig)> {
        self.benchmark
            .methods
            .iter()
            .map(|m| {
                let mut c = base.clone();
                if let Some(o) = self.benchmark.overrides.get(m) {
                    set(&mut c.max_iterations, o.iterations);
                    set(&mut c.prompts_per_iter, o.prompts_per_iter);
                }
                (*m, c)
            })
            .collect()
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
