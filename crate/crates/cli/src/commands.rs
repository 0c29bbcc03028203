use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use opt2i_core::backends::{BackendStats, CallSnapshot};
use opt2i_core::evaluation::{filter_initially_perfect, run_comparison, BenchmarkOptions, PromptDataset};
use opt2i_core::model::normalize_score;
use opt2i_core::optimizer::{run_optimization_with, IterationRecord, TerminationReason};
use opt2i_core::rundir::{write_json, DirLock, RunDirectory};
use opt2i_core::scoring::{build_question_graph, decompose_noun_phrases, Scorer};
use opt2i_core::simulation::SimWorld;
use opt2i_core::{ImageRef, OptimizationConfig, UserPrompt};
use serde_json::{json, Value};

use crate::settings::{Overrides, Settings};
use crate::wiring::{self, wire};
use crate::ConfigError;

pub const SETTINGS_FILE: &str = "settings.json";

pub fn load_settings(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Settings> {
    let mut s = match path {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.apply(overrides);
    Ok(s)
}

#[derive(Debug, clap::Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["prompt", "prompt_file", "prompt_id"])))]
pub struct OptimizeArgs {
    /// Prompt text.
    #[arg(long)]
    prompt: Option<String>,
    /// File holding the prompt text.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Id of a prompt of the simulated world.
    #[arg(long)]
    prompt_id: Option<String>,
    /// Run directory; re-running the same command resumes it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
#[command(group(clap::ArgGroup::new("dir").required(true).args(["out", "resume"])))]
pub struct BenchmarkArgs {
    /// Sweep directory for a new run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the sweep in this directory with its snapshotted settings.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ScoreArgs {
    #[arg(long)]
    prompt: String,
    /// Image reference: ImageRef JSON (inline or a file). With the sim
    /// backend, also a list of rendered elements such as `sim:bike|snow`.
    #[arg(long)]
    image: String,
}

#[derive(Debug, clap::Args)]
pub struct DecomposeArgs {
    prompt: String,
    /// Also print the question graph.
    #[arg(long)]
    questions: bool,
}

#[derive(Debug, clap::Args)]
pub struct SimWorldArgs {
    /// Print the full world description as JSON.
    #[arg(long)]
    json: bool,
}

fn delta(now: CallSnapshot, before: CallSnapshot) -> Value {
    json!({
        "calls": now.calls - before.calls,
        "errors": now.errors - before.errors,
        "ms": (now.micros - before.micros) as f64 / 1000.0,
    })
}

/// Per-backend call counts and latencies since `before`.
fn call_stats(stats: &BackendStats, before: &[(&'static str, CallSnapshot); 4]) -> Value {
    let now = stats.snapshot();
    let mut out = serde_json::Map::new();
    for ((name, n), (_, b)) in now.iter().zip(before.iter()) {
        out.insert(name.to_string(), delta(*n, *b));
    }
    Value::Object(out)
}

fn cache_stats(wired: &wiring::Wired) -> Value {
    match &wired.cache {
        Some(c) => json!({ "hits": c.hits(), "misses": c.misses() }),
        None => Value::Null,
    }
}

const ZERO: CallSnapshot = CallSnapshot {
    calls: 0,
    errors: 0,
    micros: 0,
};

fn user_prompt(args: &OptimizeArgs, world: Option<&SimWorld>) -> anyhow::Result<UserPrompt> {
    let prompt = if let Some(text) = &args.prompt {
        UserPrompt::new("prompt", text.trim())
    } else if let Some(path) = &args.prompt_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        UserPrompt::new("prompt", text.trim())
    } else {
        let id = args.prompt_id.as_deref().unwrap_or_default();
        let world = world.ok_or_else(|| ConfigError("--prompt-id needs the sim backend".into()))?;
        return world
            .user_prompts()
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| ConfigError(format!("the simulated world has no prompt {id:?}")).into());
    };
    prompt.map_err(|e| ConfigError(e.to_string()).into())
}

fn ensure_same<T: serde::de::DeserializeOwned + serde::Serialize + PartialEq>(dir: &RunDirectory, file: &str, value: &T) -> anyhow::Result<()> {
    let path = dir.path().join(file);
    if path.exists() {
        let stored: T = opt2i_core::rundir::read_json(&path)?;
        if stored != *value {
            return Err(ConfigError(format!(
                "{} was created with different settings; use a new directory",
                dir.path().display()
            ))
            .into());
        }
    }
    Ok(())
}

pub fn optimize(args: OptimizeArgs, settings: Settings) -> anyhow::Result<()> {
    let config = settings.optimization()?;
    let wired = wire(&settings.backend, &args.out.join("images"), Some(args.out.join("cache")))?;
    let prompt = user_prompt(&args, wired.world.as_deref())?;

    let dir = RunDirectory::open(&args.out)?;
    ensure_same(&dir, SETTINGS_FILE, &settings)?;
    ensure_same::<OptimizationConfig>(&dir, opt2i_core::rundir::CONFIG_FILE, &config)?;
    write_json(&dir.path().join(SETTINGS_FILE), &settings)?;
    dir.write_config(&config)?;

    if let Some(log) = dir.load_runlog()? {
        if log.user_prompt == prompt {
            log::info!("run already complete in {}", dir.path().display());
            println!("{}", log.optimized_prompt);
            return Ok(());
        }
    }
    let prior = dir.load_records()?;
    if prior.first().is_some_and(|r| r.proposals.first().map(|c| c.text()) != Some(prompt.text.as_str())) {
        return Err(ConfigError(format!("{} holds a run for another prompt", dir.path().display())).into());
    }
    if !prior.is_empty() {
        log::info!("resuming after iteration {}", prior.len() - 1);
    }

    let scorer = Scorer::new(wired.backends.clone(), config.objective);
    let mut before = wired.stats.snapshot();
    let mut sink = |r: &IterationRecord| {
        dir.write_record(r)?;
        let event = json!({
            "event": "iteration",
            "iteration": r.iteration,
            "best": r.best_so_far,
            "proposals": r.proposals.len(),
            "shortfall": r.shortfall,
            "failed": r.failed,
            "backends": call_stats(&wired.stats, &before),
        });
        log::info!("{event}");
        before = wired.stats.snapshot();
        Ok(())
    };
    let log = run_optimization_with(&prompt, &config, &scorer, prior, &mut sink)?;
    dir.write_runlog(&log)?;

    let init = log.initial_score().unwrap_or(0.0);
    let best = log.best_score().unwrap_or(0.0);
    let summary = json!({
        "event": "finished",
        "termination": log.termination_reason,
        "iterations": log.records.len() - 1,
        "initial": init,
        "best": best,
        "improvement": config.objective.relative_improvement(init, best).ok(),
        "backends": call_stats(&wired.stats, &[("llm", ZERO), ("images", ZERO), ("embedder", ZERO), ("vqa", ZERO)]),
        "cache": cache_stats(&wired),
    });
    log::info!("{summary}");
    if log.termination_reason == TerminationReason::ProposalFailure {
        log::warn!("the LLM returned no usable prompts; reporting the best prompt found so far");
    }
    println!("{}", log.optimized_prompt);
    Ok(())
}

pub fn benchmark(args: BenchmarkArgs, settings: Settings, overrides: &Overrides) -> anyhow::Result<()> {
    let (out, settings) = match (&args.resume, &args.out) {
        (Some(dir), _) => {
            let path = dir.join(SETTINGS_FILE);
            if !path.exists() {
                return Err(ConfigError(format!("{} has no {SETTINGS_FILE} to resume from", dir.display())).into());
            }
            let mut s = Settings::load(&path)?;
            s.apply(overrides);
            (dir.clone(), s)
        }
        (None, Some(dir)) => (dir.clone(), settings),
        (None, None) => unreachable!("clap requires --out or --resume"),
    };
    let config = settings.optimization()?;
    let wired = wire(&settings.backend, &out.join("images"), Some(out.join("cache")))?;
    let dataset = match (&settings.benchmark.dataset, &wired.world) {
        (Some(path), _) => PromptDataset::load(path).map_err(|e| ConfigError(format!("dataset {}: {e}", path.display())))?,
        (None, Some(world)) => PromptDataset::from_world(world),
        (None, None) => return Err(ConfigError("the http backend needs [benchmark] dataset".into()).into()),
    };
    let plans = settings.plans(&config);
    for (m, c) in &plans {
        c.validate().with_context(|| format!("[benchmark.overrides.{}]", m.as_str()))?;
    }
    opt2i_core::evaluation::check_budgets(&plans)?;

    let _lock = DirLock::acquire(&out)?;
    if args.resume.is_none() {
        let path = out.join(SETTINGS_FILE);
        if path.exists() {
            let stored = Settings::load(&path)?;
            if stored != settings {
                return Err(ConfigError(format!(
                    "{} holds a sweep with different settings; pass --resume to continue it",
                    out.display()
                ))
                .into());
            }
        }
    }
    write_json(&out.join(SETTINGS_FILE), &settings)?;

    let dataset = if settings.benchmark.filter_perfect {
        let (kept, excluded) = filter_initially_perfect(&dataset, &config, &wired.backends)?;
        log::info!("{}", json!({ "event": "filtered", "kept": kept.len(), "excluded": excluded }));
        write_json(&out.join("filtered.json"), &excluded)?;
        kept
    } else {
        dataset
    };
    log::info!("{}", json!({ "event": "benchmark", "dataset": dataset.name, "prompts": dataset.len() }));

    let options = BenchmarkOptions {
        out_dir: Some(out.clone()),
        parallelism: settings.benchmark.parallelism,
    };
    let (runs, summary) = run_comparison(&dataset, &plans, &wired.backends, &options)?;
    let before = [("llm", ZERO), ("images", ZERO), ("embedder", ZERO), ("vqa", ZERO)];
    log::info!("{}", json!({ "event": "calls", "backends": call_stats(&wired.stats, &before), "cache": cache_stats(&wired) }));

    println!("budget {}", summary.budget);
    for run in &runs {
        let r = &run.report;
        let mean = r.mean_improvement.map_or_else(|| "n/a".to_string(), |m| format!("{m:.2}"));
        println!(
            "{}\tmean improvement {mean}\tprompts {}\texcluded {}",
            r.method.as_str(),
            r.prompts.len(),
            r.excluded.len()
        );
    }
    let failed: usize = runs
        .iter()
        .map(|r| r.report.excluded.iter().filter(|e| e.infrastructure).count())
        .sum();
    if failed > 0 {
        return Err(anyhow!("{failed} prompt runs failed on backend errors; re-run with --resume to retry them"));
    }
    Ok(())
}

fn parse_image(reference: &str, world: Option<&SimWorld>) -> anyhow::Result<ImageRef> {
    let invalid = || format!("invalid image reference {reference:?}");
    let bad = |e: &dyn std::fmt::Display| ConfigError(format!("{}: {e}", invalid()));
    let trimmed = reference.trim();
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| bad(&e).into());
    }
    let path = Path::new(trimmed);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| bad(&e))?;
        return serde_json::from_str(&text).map_err(|e| bad(&e).into());
    }
    let world = world.ok_or_else(|| ConfigError(format!("{}: expected ImageRef JSON", invalid())))?;
    let elements: Vec<&str> = trimmed
        .strip_prefix("sim:")
        .unwrap_or(trimmed)
        .split(['|', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    world
        .image_with(&elements)
        .map_err(|e| bad(&e).into())
}

pub fn score(args: ScoreArgs, settings: Settings) -> anyhow::Result<()> {
    let objective = settings.run.objective;
    let wired = wire(&settings.backend, Path::new("images"), None)?;
    let image = parse_image(&args.image, wired.world.as_deref())?;
    let prompt = UserPrompt::new("prompt", args.prompt.trim()).map_err(|e| ConfigError(e.to_string()))?;
    let scorer = Scorer::new(wired.backends, objective);
    let elements = scorer.elements(&prompt).context("decomposing the prompt")?;
    let report = scorer
        .score_image(&elements, &image)
        .with_context(|| format!("scoring image {:?}", args.image))?;
    println!("{objective}\tscore");
    for e in report.elements() {
        println!("{}\t{}", e.label, normalize_score(e.subscore)?);
    }
    println!("global\t{}", normalize_score(report.global())?);
    Ok(())
}

pub fn decompose(args: DecomposeArgs, settings: Settings) -> anyhow::Result<()> {
    let wired = wire(&settings.backend, Path::new("images"), None)?;
    let set = decompose_noun_phrases(&args.prompt, wired.backends.llm.as_ref())?;
    println!("{}", set.phrases.join(", "));
    if args.questions {
        let graph = build_question_graph(&args.prompt, wired.backends.graphs.as_ref())?;
        for q in graph.questions() {
            let parents: Vec<String> = graph
                .dependencies()
                .iter()
                .filter(|(c, _)| *c == q.id)
                .map(|(_, p)| p.to_string())
                .collect();
            println!("{} | {} | {}", q.id, q.text, if parents.is_empty() { "0".into() } else { parents.join(",") });
        }
    }
    Ok(())
}

pub fn sim_world(args: SimWorldArgs, settings: Settings) -> anyhow::Result<()> {
    let world = wiring::world(&settings.backend)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(world.spec())?);
    } else {
        for p in world.user_prompts() {
            println!("{}\t{}\t{}", p.id, p.category.as_deref().unwrap_or("-"), p.text);
        }
    }
    Ok(())
}
