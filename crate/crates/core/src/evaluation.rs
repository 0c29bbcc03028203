//! Datasets, benchmark sweeps and reports.
//!
//! Dataset files come in two shapes:
//!
//! - a line-oriented list, one prompt per non-empty line (`#` starts a
//!   comment line); ids are `p-0001`, `p-0002`, ... in file order;
//! - a CSV (or TSV) table with a header row holding a `prompt` (or `text`)
//!   column and optional `id` and `category` columns. A category cell
//!   listing several labels separated by `,`, `;` or `|` is assigned its
//!   first label.
//!
//! A sweep writes `report.json` (schema version [`REPORT_FORMAT_VERSION`])
//! and `curves.csv` next to one run directory per prompt under `runs/`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::error::{Error, Result};
use crate::model::{Objective, OptimizationConfig, UserPrompt};
use crate::optimizer::{
    iteration_stats, run_optimization_with, run_paraphrase_baseline_with, seeds_for, Method, RunLog,
    TerminationReason,
};
use crate::rundir::{write_atomic, write_json, RunDirectory};
use crate::scoring::Scorer;
use crate::simulation::SimWorld;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const UNCATEGORIZED: &str = "uncategorized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDataset {
    pub name: String,
    pub prompts: Vec<UserPrompt>,
}

impl PromptDataset {
    pub fn new(name: impl Into<String>, prompts: Vec<UserPrompt>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate prompt id {:?}", p.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            prompts,
        })
    }

    /// Like [`PromptDataset::new`], additionally requiring every category to
    /// come from `labels`.
    pub fn with_labels(name: impl Into<String>, prompts: Vec<UserPrompt>, labels: &[&str]) -> Result<Self> {
        for p in &prompts {
            if let Some(c) = &p.category {
                if !labels.contains(&c.as_str()) {
                    return Err(Error::InvalidInput(format!("prompt {} has undeclared category {c:?}", p.id)));
                }
            }
        }
        Self::new(name, prompts)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn from_lines(name: impl Into<String>, text: &str) -> Result<Self> {
        let prompts = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(i, l)| UserPrompt::new(format!("p-{:04}", i + 1), l))
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, prompts)
    }

    pub fn from_csv(name: impl Into<String>, reader: impl std::io::Read, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("dataset table: {e}"));
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let col = |names: &[&str]| {
            headers
                .iter()
                .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
        };
        let text_col = col(&["prompt", "text"])
            .ok_or_else(|| Error::InvalidInput("dataset table needs a `prompt` column".into()))?;
        let id_col = col(&["id"]);
        let cat_col = col(&["category", "categories"]);
        let mut prompts = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(csv_err)?;
            let text = row.get(text_col).unwrap_or("");
            let id = id_col
                .and_then(|c| row.get(c))
                .filter(|s| !s.is_empty())
                .map_or_else(|| format!("p-{:04}", i + 1), str::to_string);
            let mut p = UserPrompt::new(id, text)?;
            if let Some(c) = cat_col.and_then(|c| row.get(c)).and_then(first_label) {
                p = p.with_category(c);
            }
            prompts.push(p);
        }
        Self::new(name, prompts)
    }

    /// Loads a `.csv`/`.tsv` table or, for any other extension, a line list.
    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .file_stem()
            .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned());
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "csv" => Self::from_csv(name, std::fs::File::open(path)?, b','),
            "tsv" => Self::from_csv(name, std::fs::File::open(path)?, b'\t'),
            _ => Self::from_lines(name, &std::fs::read_to_string(path)?),
        }
    }

    pub fn from_world(world: &SimWorld) -> Self {
        Self {
            name: world.id().to_string(),
            prompts: world.user_prompts(),
        }
    }
}

fn first_label(cell: &str) -> Option<String> {
    cell.split([',', ';', '|'])
        .map(str::trim)
        .find(|s| !s.is_empty())
        .map(str::to_string)
}

/// The configuration a method actually runs with. The 1-shot baseline
/// spends the whole budget in a single iteration.
pub fn effective_config(method: Method, config: &OptimizationConfig) -> Result<OptimizationConfig> {
    let mut c = config.clone();
    if method == Method::Icl1Shot {
        c.prompts_per_iter = u32::try_from(config.budget())
            .map_err(|_| Error::Config(vec![format!("budget {} is too large", config.budget())]))?;
        c.max_iterations = 1;
    }
    c.validate()?;
    Ok(c)
}

/// Refuses a comparison whose methods would score different numbers of
/// prompts.
pub fn check_budgets(plans: &[(Method, OptimizationConfig)]) -> Result<u64> {
    let budgets: Vec<(Method, u64)> = plans.iter().map(|(m, c)| (*m, c.budget())).collect();
    let Some(&(_, first)) = budgets.first() else {
        return Err(Error::InvalidInput("no methods to compare".into()));
    };
    if budgets.iter().any(|(_, b)| *b != first) {
        let listing = budgets
            .iter()
            .map(|(m, b)| format!("{} = {b}", m.as_str()))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::BudgetMismatch(format!(
            "{listing}; compared methods must score the same total number of prompts"
        )));
    }
    Ok(first)
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkOptions {
    /// Sweep directory; per-prompt runs go to `<dir>/runs/<id>/`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for concurrent prompts; `None` uses the global pool.
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub id: String,
    pub text: String,
    pub category: Option<String>,
    pub init_score: f64,
    pub best_score: f64,
    /// In the objective's unit: percent for dCS, percentage points for DSG.
    pub improvement: f64,
    pub optimized_prompt: String,
    pub termination_reason: TerminationReason,
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excluded {
    pub id: String,
    pub reason: String,
    /// Set when the prompt failed on a backend rather than being filtered.
    #[serde(default)]
    pub infrastructure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAggregate {
    pub count: usize,
    pub mean_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u32,
    /// Mean over prompts of the cumulative max relative improvement.
    pub cumulative_max_mean: Option<f64>,
    /// Mean over prompts of the per-iteration mean relative improvement.
    pub proposal_mean: Option<f64>,
    /// Mean proposal length in characters (Unicode scalar values).
    pub prompt_length_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    pub dataset: String,
    pub method: Method,
    pub objective: Objective,
    pub config: OptimizationConfig,
    pub budget: u64,
    pub prompts: Vec<PromptOutcome>,
    pub excluded: Vec<Excluded>,
    /// `None` when no prompt was included.
    pub mean_improvement: Option<f64>,
    pub categories: BTreeMap<String, CategoryAggregate>,
    pub curve: Vec<CurvePoint>,
}

impl BenchmarkReport {
    /// Builds a report from run logs alone. Failed prompts and dCS prompts
    /// with a zero initial score are listed as excluded.
    pub fn from_logs(
        dataset: &str,
        method: Method,
        config: &OptimizationConfig,
        results: &[(UserPrompt, std::result::Result<RunLog, Excluded>)],
    ) -> Result<Self> {
        let objective = config.objective;
        let mut prompts = Vec::new();
        let mut excluded = Vec::new();
        let mut included_logs = Vec::new();
        for (prompt, result) in results {
            let log = match result {
                Ok(log) => log,
                Err(e) => {
                    excluded.push(e.clone());
                    continue;
                }
            };
            let (Some(init), Some(best)) = (log.initial_score(), log.best_score()) else {
                excluded.push(Excluded {
                    id: prompt.id.clone(),
                    reason: "run log has no records".into(),
                    infrastructure: false,
                });
                continue;
            };
            let improvement = match objective.relative_improvement(init, best) {
                Ok(v) => v,
                Err(Error::UndefinedRelativeImprovement) => {
                    excluded.push(Excluded {
                        id: prompt.id.clone(),
                        reason: "initial score is zero".into(),
                        infrastructure: false,
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            prompts.push(PromptOutcome {
                id: prompt.id.clone(),
                text: prompt.text.clone(),
                category: prompt.category.clone(),
                init_score: init,
                best_score: best,
                improvement,
                optimized_prompt: log.optimized_prompt.clone(),
                termination_reason: log.termination_reason,
                iterations: log.records.len().saturating_sub(1) as u32,
            });
            included_logs.push(log);
        }
        let mean_improvement =
            (!prompts.is_empty()).then(|| prompts.iter().map(|p| p.improvement).sum::<f64>() / prompts.len() as f64);
        let categories = stratify(&prompts);
        let curve = curve(&included_logs)?;
        Ok(Self {
            format_version: REPORT_FORMAT_VERSION,
            dataset: dataset.to_string(),
            method,
            objective,
            config: config.clone(),
            budget: config.budget(),
            prompts,
            excluded,
            mean_improvement,
            categories,
            curve,
        })
    }

    /// `iteration,cumulative_max_mean,proposal_mean,prompt_length_mean`
    /// with empty cells for absent values.
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidInput(e.to_string());
        w.write_record(["iteration", "cumulative_max_mean", "proposal_mean", "prompt_length_mean"])
            .map_err(csv_err)?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.curve {
            w.write_record([
                p.iteration.to_string(),
                cell(p.cumulative_max_mean),
                cell(p.proposal_mean),
                cell(p.prompt_length_mean),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn has_infrastructure_failures(&self) -> bool {
        self.excluded.iter().any(|e| e.infrastructure)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        write_atomic(&dir.join("curves.csv"), self.curves_csv()?.as_bytes())
    }
}

/// Mean improvement per category; prompts without one go to
/// [`UNCATEGORIZED`].
pub fn stratify(outcomes: &[PromptOutcome]) -> BTreeMap<String, CategoryAggregate> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        let key = o.category.clone().unwrap_or_else(|| UNCATEGORIZED.to_string());
        groups.entry(key).or_default().push(o.improvement);
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let agg = CategoryAggregate {
                count: v.len(),
                mean_improvement: v.iter().sum::<f64>() / v.len() as f64,
            };
            (k, agg)
        })
        .collect()
}

/// Number of iterations a run would have had without early stopping,
/// counting iteration 0.
fn horizon(log: &RunLog) -> usize {
    match log.method {
        Method::Paraphrasing => 2,
        _ => log.config.max_iterations as usize + 1,
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn curve(logs: &[&RunLog]) -> Result<Vec<CurvePoint>> {
    let len = logs.iter().map(|l| horizon(l)).max().unwrap_or(0);
    let mut cummax: Vec<Vec<f64>> = Vec::with_capacity(logs.len());
    let mut means: Vec<Vec<Option<f64>>> = Vec::with_capacity(logs.len());
    for log in logs {
        let stats = iteration_stats(log)?;
        let mut c = stats.cumulative_max;
        let last = *c.last().unwrap_or(&0.0);
        c.resize(horizon(log), last);
        cummax.push(c);
        let mut m = vec![None];
        m.extend(stats.iterations.iter().map(|s| s.mean_rel));
        means.push(m);
    }
    let lengths = prompt_length_series(logs.iter().copied());
    Ok((0..len)
        .map(|t| CurvePoint {
            iteration: t as u32,
            cumulative_max_mean: mean_of(cummax.iter().filter_map(|c| c.get(t).copied())),
            proposal_mean: mean_of(means.iter().filter_map(|m| m.get(t).copied().flatten())),
            prompt_length_mean: lengths.get(t).copied().flatten(),
        })
        .collect())
}

/// Mean proposal length per iteration index (0 is the user prompt),
/// averaged first within each run, then over the runs that have proposals
/// at that index. Lengths count Unicode scalar values.
pub fn prompt_length_series<'a>(logs: impl IntoIterator<Item = &'a RunLog>) -> Vec<Option<f64>> {
    let mut per_iter: Vec<Vec<f64>> = Vec::new();
    for log in logs {
        for r in &log.records {
            let Some(m) = mean_of(r.proposals.iter().map(|p| p.text().chars().count() as f64)) else {
                continue;
            };
            let t = r.iteration as usize;
            if per_iter.len() <= t {
                per_iter.resize(t + 1, Vec::new());
            }
            per_iter[t].push(m);
        }
    }
    per_iter.into_iter().map(|v| mean_of(v.into_iter())).collect()
}

/// Mean of the `k` largest values.
pub fn topk_mean(scores: &[f64], k: usize) -> Result<f64> {
    if k == 0 || scores.len() < k {
        return Err(Error::PoolTooSmall {
            available: scores.len(),
            k,
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Per-image global scores of the revised prompts a run generated, in
/// generation order. Proposals that reused earlier reports generated no
/// images and are skipped.
pub fn image_pool(log: &RunLog) -> Vec<f64> {
    log.records
        .iter()
        .skip(1)
        .flat_map(|r| {
            r.proposals
                .iter()
                .enumerate()
                .filter(|(j, _)| !r.reused.contains(&(*j as u32)))
                .flat_map(|(_, p)| p.reports().iter().map(|rep| rep.global()))
        })
        .collect()
}

/// Mean over runs of the top-`k` image scores among the first `budget`
/// images each run generated.
pub fn posthoc_topk(logs: &[RunLog], k: usize, budget: usize) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::InvalidInput("no run logs".into()));
    }
    let mut total = 0.0;
    for log in logs {
        let mut pool = image_pool(log);
        pool.truncate(budget);
        total += topk_mean(&pool, k)?;
    }
    Ok(total / logs.len() as f64)
}

/// Splits off prompts whose user prompt already scores 1.0 at iteration 0.
/// Prompts that fail to score are kept, so the sweep reports their failure.
pub fn filter_initially_perfect(
    dataset: &PromptDataset,
    config: &OptimizationConfig,
    backends: &Backends,
) -> Result<(PromptDataset, Vec<Excluded>)> {
    if config.objective == Objective::Dcs {
        return Err(Error::FilterUndefinedForDcs);
    }
    let scorer = Scorer::new(backends.clone(), config.objective);
    let perfect: Vec<bool> = dataset
        .prompts
        .par_iter()
        .map(|p| {
            let seeds = seeds_for(config, p, 0, 0);
            match scorer.generate_and_score(crate::model::CandidatePrompt::User(p.clone()), p, &seeds) {
                Ok(c) => c.mean_score() >= 1.0,
                Err(e) => {
                    log::warn!("prompt {}: initial scoring failed: {e}", p.id);
                    false
                }
            }
        })
        .collect();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (p, perfect) in dataset.prompts.iter().zip(perfect) {
        if perfect {
            excluded.push(Excluded {
                id: p.id.clone(),
                reason: "initially perfect".into(),
                infrastructure: false,
            });
        } else {
            kept.push(p.clone());
        }
    }
    log::info!("kept {} prompts, excluded {} initially perfect", kept.len(), excluded.len());
    Ok((PromptDataset::new(dataset.name.clone(), kept)?, excluded))
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    /// Logs of the prompts that completed, in dataset order.
    pub logs: Vec<RunLog>,
}

fn dir_name(id: &str) -> String {
    if !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && id != "." && id != ".." {
        id.to_string()
    } else {
        format!("id-{}", &crate::digest::sha256_hex(id)[..16])
    }
}

fn run_prompt(
    method: Method,
    config: &OptimizationConfig,
    scorer: &Scorer,
    prompt: &UserPrompt,
    dir: Option<&RunDirectory>,
) -> Result<RunLog> {
    if let Some(d) = dir {
        if let Some(log) = d.load_runlog()? {
            if log.method == method && log.config == *config && log.user_prompt == *prompt {
                return Ok(log);
            }
            log::warn!("{}: stale run log ignored", d.path().display());
        }
    }
    let prior = match dir {
        Some(d) => d.load_records()?,
        None => Vec::new(),
    };
    let mut sink = |r: &crate::optimizer::IterationRecord| match dir {
        Some(d) => d.write_record(r),
        None => Ok(()),
    };
    let mut log = match method {
        Method::Opt2i | Method::Icl1Shot => run_optimization_with(prompt, config, scorer, prior, &mut sink)?,
        Method::Paraphrasing => {
            let budget = u32::try_from(config.budget())
                .map_err(|_| Error::Config(vec![format!("budget {} is too large", config.budget())]))?;
            run_paraphrase_baseline_with(prompt, config, scorer, budget, prior, &mut sink)?
        }
    };
    log.method = method;
    if let Some(d) = dir {
        d.write_runlog(&log)?;
    }
    Ok(log)
}

/// Runs `method` on every prompt of `dataset`. A prompt that fails is
/// listed as excluded in the report; it never aborts the sweep. With an
/// output directory, completed prompts are skipped on a re-run and
/// interrupted ones resume from their last complete iteration.
pub fn run_benchmark(
    dataset: &PromptDataset,
    method: Method,
    config: &OptimizationConfig,
    backends: &Backends,
    options: &BenchmarkOptions,
) -> Result<BenchmarkRun> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let config = effective_config(method, config)?;
    let scorer = Scorer::new(backends.clone(), config.objective);
    let sweep = match &options.out_dir {
        Some(d) => {
            let dir = RunDirectory::open(d)?;
            dir.write_config(&config)?;
            Some(dir)
        }
        None => None,
    };
    let one = |p: &UserPrompt| -> std::result::Result<RunLog, Excluded> {
        let result = match &sweep {
            Some(s) => RunDirectory::open_unlocked(s.path().join("runs").join(dir_name(&p.id)))
                .and_then(|d| run_prompt(method, &config, &scorer, p, Some(&d))),
            None => run_prompt(method, &config, &scorer, p, None),
        };
        result.map_err(|e| {
            log::error!("prompt {}: {e}", p.id);
            Excluded {
                id: p.id.clone(),
                reason: e.to_string(),
                infrastructure: e.is_infrastructure(),
            }
        })
    };
    let results: Vec<_> = match options.parallelism {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(|| dataset.prompts.par_iter().map(one).collect()),
        None => dataset.prompts.par_iter().map(one).collect(),
    };
    let results: Vec<(UserPrompt, _)> = dataset.prompts.iter().cloned().zip(results).collect();
    let report = BenchmarkReport::from_logs(&dataset.name, method, &config, &results)?;
    if let Some(s) = &sweep {
        report.write(s.path())?;
    }
    let logs = results.into_iter().filter_map(|(_, r)| r.ok()).collect();
    Ok(BenchmarkRun { report, logs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub format_version: u32,
    pub budget: u64,
    pub methods: Vec<(Method, Option<f64>)>,
}

/// Runs several methods at equal budget, each into `<out_dir>/<method>/`
/// when an output directory is given.
pub fn run_comparison(
    dataset: &PromptDataset,
    plans: &[(Method, OptimizationConfig)],
    backends: &Backends,
    options: &BenchmarkOptions,
) -> Result<(Vec<BenchmarkRun>, ComparisonSummary)> {
    let budget = check_budgets(plans)?;
    let mut runs = Vec::new();
    for (method, config) in plans {
        let opts = BenchmarkOptions {
            out_dir: options.out_dir.as_ref().map(|d| d.join(method.as_str())),
            parallelism: options.parallelism,
        };
        runs.push(run_benchmark(dataset, *method, config, backends, &opts)?);
    }
    let summary = ComparisonSummary {
        format_version: REPORT_FORMAT_VERSION,
        budget,
        methods: runs.iter().map(|r| (r.report.method, r.report.mean_improvement)).collect(),
    };
    if let Some(d) = &options.out_dir {
        write_json(&d.join("comparison.json"), &summary)?;
    }
    Ok((runs, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, category: Option<&str>, improvement: f64) -> PromptOutcome {
        PromptOutcome {
            id: id.into(),
            text: id.into(),
            category: category.map(str::to_string),
            init_score: 0.5,
            best_score: 0.5,
            improvement,
            optimized_prompt: id.into(),
            termination_reason: TerminationReason::MaxIterations,
            iterations: 1,
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_mean(&[10.0, 30.0, 20.0], 2).unwrap(), 25.0);
        assert_eq!(topk_mean(&[10.0, 30.0, 20.0], 3).unwrap(), 20.0);
        assert_eq!(topk_mean(&[10.0, 30.0, 20.0], 1).unwrap(), 30.0);
        assert!(matches!(
            topk_mean(&[1.0], 2),
            Err(Error::PoolTooSmall { available: 1, k: 2 })
        ));
    }

    #[test]
    fn stratify_examples() {
        let s = stratify(&[
            outcome("a", Some("A"), 2.0),
            outcome("b", Some("A"), 4.0),
            outcome("c", Some("B"), 6.0),
            outcome("d", None, 1.0),
        ]);
        assert_eq!(s["A"].mean_improvement, 3.0);
        assert_eq!(s["B"].mean_improvement, 6.0);
        assert_eq!(s[UNCATEGORIZED].count, 1);
    }

    #[test]
    fn line_and_table_datasets() {
        let d = PromptDataset::from_lines("x", "# header\na cat\n\n  a dog  \n").unwrap();
        assert_eq!(d.prompts.iter().map(|p| p.text.as_str()).collect::<Vec<_>>(), ["a cat", "a dog"]);
        assert_eq!(d.prompts[1].id, "p-0002");

        let t = "id,prompt,category\nq1,a red cube,\"imagination, quantity\"\nq2,a blue ball,\n";
        let d = PromptDataset::from_csv("t", t.as_bytes(), b',').unwrap();
        assert_eq!(d.prompts[0].category.as_deref(), Some("imagination"));
        assert_eq!(d.prompts[1].category, None);

        let dup = "id,prompt\nq,a\nq,b\n";
        assert!(PromptDataset::from_csv("t", dup.as_bytes(), b',').is_err());
        assert!(PromptDataset::from_csv("t", "id,caption\nq,a\n".as_bytes(), b',').is_err());
    }

    #[test]
    fn budgets_must_match() {
        let a = OptimizationConfig::default();
        let mut b = a.clone();
        b.max_iterations = 10;
        assert_eq!(check_budgets(&[(Method::Opt2i, a.clone()), (Method::Paraphrasing, a.clone())]).unwrap(), 150);
        let e = check_budgets(&[(Method::Opt2i, a), (Method::Paraphrasing, b)]).unwrap_err();
        assert!(e.to_string().contains("opt2i = 150"), "{e}");
    }

    #[test]
    fn icl_spends_budget_in_one_iteration() {
        let c = effective_config(Method::Icl1Shot, &OptimizationConfig::default()).unwrap();
        assert_eq!((c.max_iterations, c.prompts_per_iter), (1, 150));
    }

    #[test]
    fn unsafe_ids_are_hashed_for_directories() {
        assert_eq!(dir_name("syn-001"), "syn-001");
        assert!(dir_name("../x").starts_with("id-"));
        assert!(dir_name("..").starts_with("id-"));
    }
}
