//! The optimization loop and the paraphrasing baseline.
//!
//! Iteration 0 scores the user prompt. Every later iteration renders the
//! history into a meta-prompt, asks the LLM for `prompts_per_iter` revised
//! prompts in one call, scores each against the user prompt's elements and
//! merges them into the history. The loop stops after `max_iterations` or
//! once the best score reaches `target_score`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::GenerationParams;
use crate::digest::{sha256_hex, SeedHasher};
use crate::error::{Error, Result};
use crate::history::{dedupe_key, PromptHistory};
use crate::metaprompt::{build_optimize, build_paraphrase, parse_revised_prompts, MetaPromptKind, RenderedMetaPrompt};
use crate::model::{CandidatePrompt, OptimizationConfig, PromptCandidate, RevisedPrompt, UserPrompt};
use crate::scoring::Scorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Opt2i,
    Paraphrasing,
    /// A single optimization iteration proposing the whole budget at once.
    Icl1Shot,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Opt2i => "opt2i",
            Method::Paraphrasing => "paraphrasing",
            Method::Icl1Shot => "icl_1shot",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "opt2i" => Ok(Method::Opt2i),
            "paraphrasing" | "paraphrase" => Ok(Method::Paraphrasing),
            "icl_1shot" | "icl" => Ok(Method::Icl1Shot),
            other => Err(Error::InvalidInput(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    MaxIterations,
    TargetReached,
    ProposalFailure,
}

/// Digest pair of one LLM proposal call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmCall {
    pub request_sha256: String,
    pub response_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub proposals: Vec<PromptCandidate>,
    pub history_snapshot: PromptHistory,
    pub best_so_far: f64,
    /// Kept out of persisted records so that runs compare byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
    #[serde(default)]
    pub llm_calls: Vec<LlmCall>,
    /// Requested minus parsed proposals.
    #[serde(default)]
    pub shortfall: u32,
    /// No proposal could be parsed, even after the retry.
    #[serde(default)]
    pub failed: bool,
    /// Ordinals of proposals that repeated an already scored text and reuse
    /// its reports.
    #[serde(default)]
    pub reused: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub method: Method,
    pub config: OptimizationConfig,
    /// Total number of revised prompts the method may score.
    pub budget: u64,
    pub user_prompt: UserPrompt,
    pub records: Vec<IterationRecord>,
    pub optimized_prompt: String,
    pub termination_reason: TerminationReason,
}

impl RunLog {
    pub fn initial_score(&self) -> Option<f64> {
        self.records.first().map(|r| r.proposals[0].mean_score())
    }

    pub fn best_score(&self) -> Option<f64> {
        self.records.last().map(|r| r.best_so_far)
    }
}

/// Called with every completed record, before the next iteration starts.
pub type RecordSink<'a> = dyn FnMut(&IterationRecord) -> Result<()> + 'a;

pub(crate) fn seeds_for(config: &OptimizationConfig, user: &UserPrompt, iteration: u32, ordinal: u32) -> Vec<u64> {
    match &config.fixed_seeds {
        Some(s) => s.clone(),
        None => (0..config.images_per_prompt)
            .map(|i| {
                SeedHasher::new()
                    .u64(config.seed)
                    .part("image-seed")
                    .part(&user.text)
                    .u64(u64::from(iteration))
                    .u64(u64::from(ordinal))
                    .u64(u64::from(i))
                    .finish()
            })
            .collect(),
    }
}

fn llm_call(scorer: &Scorer, mp: &RenderedMetaPrompt, params: &GenerationParams) -> Result<(String, LlmCall)> {
    let request = json!({
        "system": mp.system,
        "user": mp.user,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "seed": params.seed,
    });
    let reply = scorer.backends().llm.generate(mp.system.as_deref(), &mp.user, params)?;
    let call = LlmCall {
        request_sha256: sha256_hex(request.to_string()),
        response_sha256: sha256_hex(&reply),
    };
    Ok((reply, call))
}

/// Asks for proposals, retrying once with a fresh sampling seed when nothing
/// parses. Returns `None` for the prompts when both attempts fail.
fn propose(
    scorer: &Scorer,
    mp: &RenderedMetaPrompt,
    params: &GenerationParams,
    expected: usize,
) -> Result<(Option<Vec<String>>, Vec<LlmCall>)> {
    let mut calls = Vec::new();
    for attempt in 0..2u64 {
        let params = GenerationParams {
            seed: params.seed.map(|s| SeedHasher::new().u64(s).u64(attempt).finish()),
            ..*params
        };
        let (reply, call) = llm_call(scorer, mp, &params)?;
        calls.push(call);
        match parse_revised_prompts(&reply, expected) {
            Ok(mut prompts) => {
                prompts.truncate(expected);
                return Ok((Some(prompts), calls));
            }
            Err(e) => log::warn!("proposal attempt {}: {e}", attempt + 1),
        }
    }
    Ok((None, calls))
}

struct RunState<'a> {
    scorer: &'a Scorer,
    config: &'a OptimizationConfig,
    user: &'a UserPrompt,
    history: PromptHistory,
    scored: HashMap<String, PromptCandidate>,
    records: Vec<IterationRecord>,
}

impl<'a> RunState<'a> {
    fn new(scorer: &'a Scorer, config: &'a OptimizationConfig, user: &'a UserPrompt) -> Result<Self> {
        if scorer.objective() != config.objective {
            return Err(Error::Config(vec![format!(
                "scorer objective {} does not match configured objective {}",
                scorer.objective(),
                config.objective
            )]));
        }
        Ok(Self {
            scorer,
            config,
            user,
            history: PromptHistory::new(config.history_capacity as usize)?,
            scored: HashMap::new(),
            records: Vec::new(),
        })
    }

    fn adopt(&mut self, record: IterationRecord) -> Result<()> {
        if record.iteration as usize != self.records.len() {
            return Err(Error::InvalidInput(format!(
                "prior record for iteration {} found where {} was expected",
                record.iteration,
                self.records.len()
            )));
        }
        if record.iteration == 0 && record.proposals.first().map(PromptCandidate::text) != Some(self.user.text.as_str()) {
            return Err(Error::InvalidInput("prior records belong to another user prompt".into()));
        }
        for p in &record.proposals {
            self.scored.entry(dedupe_key(p.text())).or_insert_with(|| p.clone());
        }
        self.history = record.history_snapshot.clone();
        self.records.push(record);
        Ok(())
    }

    fn score_new(&self, prompts: Vec<CandidatePrompt>) -> Result<Vec<PromptCandidate>> {
        prompts
            .into_par_iter()
            .map(|p| {
                let seeds = seeds_for(self.config, self.user, p.iteration(), p.ordinal());
                self.scorer.generate_and_score(p, self.user, &seeds)
            })
            .collect()
    }

    fn iteration_zero(&mut self) -> Result<&IterationRecord> {
        let started = Instant::now();
        self.scorer.elements(self.user)?;
        let candidate = self
            .score_new(vec![CandidatePrompt::User(self.user.clone())])?
            .remove(0);
        self.scored.insert(dedupe_key(candidate.text()), candidate.clone());
        self.history.insert_in_place(candidate.clone());
        self.push(0, vec![candidate], Vec::new(), 0, false, Vec::new(), started)
    }

    /// Scores `texts` as iteration `t`, reusing reports of repeated texts.
    fn score_proposals(&mut self, t: u32, texts: Vec<String>) -> Result<(Vec<PromptCandidate>, Vec<u32>)> {
        enum Slot {
            Known(PromptCandidate),
            New(usize),
            SameAs(usize),
        }
        let mut fresh = Vec::new();
        let mut batch_keys: HashMap<String, usize> = HashMap::new();
        let mut slots = Vec::with_capacity(texts.len());
        for (j, text) in texts.iter().enumerate() {
            let key = dedupe_key(text);
            let prompt = CandidatePrompt::Revised(RevisedPrompt::new(text.clone(), t, j as u32)?);
            if let Some(prev) = self.scored.get(&key) {
                slots.push((prompt, Slot::Known(prev.clone())));
            } else if let Some(&k) = batch_keys.get(&key) {
                slots.push((prompt, Slot::SameAs(k)));
            } else {
                batch_keys.insert(key, j);
                slots.push((prompt.clone(), Slot::New(fresh.len())));
                fresh.push(prompt);
            }
        }
        let scored_fresh = self.score_new(fresh)?;
        let mut out: Vec<PromptCandidate> = Vec::with_capacity(slots.len());
        let mut reused = Vec::new();
        for (j, (prompt, slot)) in slots.into_iter().enumerate() {
            let c = match slot {
                Slot::Known(prev) => {
                    reused.push(j as u32);
                    prev.with_prompt(prompt)
                }
                Slot::SameAs(k) => {
                    reused.push(j as u32);
                    out[k].with_prompt(prompt)
                }
                Slot::New(i) => scored_fresh[i].clone(),
            };
            out.push(c);
        }
        for c in &out {
            self.scored.entry(dedupe_key(c.text())).or_insert_with(|| c.clone());
            self.history.insert_in_place(c.clone());
        }
        Ok((out, reused))
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        iteration: u32,
        proposals: Vec<PromptCandidate>,
        llm_calls: Vec<LlmCall>,
        shortfall: u32,
        failed: bool,
        reused: Vec<u32>,
        started: Instant,
    ) -> Result<&IterationRecord> {
        let best_so_far = self.history.best()?.mean_score();
        self.records.push(IterationRecord {
            iteration,
            proposals,
            history_snapshot: self.history.clone(),
            best_so_far,
            wall_time: started.elapsed(),
            llm_calls,
            shortfall,
            failed,
            reused,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    fn best_reached_target(&self) -> bool {
        self.history
            .best()
            .is_ok_and(|b| b.mean_score() >= self.config.target_score)
    }

    fn finish(self, method: Method, budget: u64, reason: TerminationReason) -> Result<RunLog> {
        Ok(RunLog {
            method,
            config: self.config.clone(),
            budget,
            user_prompt: self.user.clone(),
            optimized_prompt: self.history.best()?.text().to_string(),
            records: self.records,
            termination_reason: reason,
        })
    }
}

/// Generation parameters for the proposal call of `iteration`. The sampling
/// seed is derived from the run seed, so repeated identical meta-prompts are
/// sampled afresh yet every run is reproducible.
fn params(config: &OptimizationConfig, user: &UserPrompt, iteration: u32) -> GenerationParams {
    let seed = SeedHasher::new()
        .u64(config.seed)
        .part("llm-sample")
        .part(&user.text)
        .u64(u64::from(iteration))
        .finish();
    GenerationParams {
        temperature: config.llm_temperature,
        max_tokens: config.llm_max_tokens,
        seed: Some(seed),
    }
}

pub fn run_optimization(user_prompt: &UserPrompt, config: &OptimizationConfig, scorer: &Scorer) -> Result<RunLog> {
    run_optimization_with(user_prompt, config, scorer, Vec::new(), &mut |_| Ok(()))
}

/// Runs (or resumes, given the `prior` records of an interrupted run) the
/// optimization loop, handing each new record to `sink`.
pub fn run_optimization_with(
    user_prompt: &UserPrompt,
    config: &OptimizationConfig,
    scorer: &Scorer,
    prior: Vec<IterationRecord>,
    sink: &mut RecordSink<'_>,
) -> Result<RunLog> {
    config.validate()?;
    let method = Method::Opt2i;
    let budget = config.budget();
    let mut state = RunState::new(scorer, config, user_prompt)?;
    for r in prior {
        state.adopt(r)?;
    }
    if state.records.is_empty() {
        sink(state.iteration_zero()?)?;
    }
    if let Some(last) = state.records.last() {
        if last.failed {
            return state.finish(method, budget, TerminationReason::ProposalFailure);
        }
    }
    if state.best_reached_target() {
        return state.finish(method, budget, TerminationReason::TargetReached);
    }

    let kind = MetaPromptKind::optimize(config.objective, config.metaprompt_variant);
    let m = config.prompts_per_iter as usize;
    for t in state.records.len() as u32..=config.max_iterations {
        let started = Instant::now();
        let mp = build_optimize(kind, &user_prompt.text, &state.history, config.prompts_per_iter)?;
        let (prompts, calls) = propose(scorer, &mp, &params(config, user_prompt, t), m)?;
        let Some(prompts) = prompts else {
            sink(state.push(t, Vec::new(), calls, config.prompts_per_iter, true, Vec::new(), started)?)?;
            return state.finish(method, budget, TerminationReason::ProposalFailure);
        };
        let shortfall = (m - prompts.len()) as u32;
        let (proposals, reused) = state.score_proposals(t, prompts)?;
        sink(state.push(t, proposals, calls, shortfall, false, reused, started)?)?;
        if state.best_reached_target() {
            return state.finish(method, budget, TerminationReason::TargetReached);
        }
    }
    state.finish(method, budget, TerminationReason::MaxIterations)
}

/// The paraphrasing baseline: one call requesting `budget` paraphrases of
/// the user prompt, no score feedback.
pub fn run_paraphrase_baseline(
    user_prompt: &UserPrompt,
    config: &OptimizationConfig,
    scorer: &Scorer,
    budget: u32,
) -> Result<RunLog> {
    run_paraphrase_baseline_with(user_prompt, config, scorer, budget, Vec::new(), &mut |_| Ok(()))
}

pub fn run_paraphrase_baseline_with(
    user_prompt: &UserPrompt,
    config: &OptimizationConfig,
    scorer: &Scorer,
    budget: u32,
    prior: Vec<IterationRecord>,
    sink: &mut RecordSink<'_>,
) -> Result<RunLog> {
    if budget == 0 {
        return Err(Error::InvalidInput("paraphrasing budget must be >= 1".into()));
    }
    config.validate()?;
    let mut state = RunState::new(scorer, config, user_prompt)?;
    for r in prior {
        state.adopt(r)?;
    }
    if state.records.is_empty() {
        sink(state.iteration_zero()?)?;
    }
    if state.records.len() == 1 {
        let started = Instant::now();
        let mp = build_paraphrase(&user_prompt.text, budget)?;
        let (prompts, calls) = propose(scorer, &mp, &params(config, user_prompt, 1), budget as usize)?;
        match prompts {
            Some(prompts) => {
                let shortfall = budget - prompts.len() as u32;
                let (proposals, reused) = state.score_proposals(1, prompts)?;
                sink(state.push(1, proposals, calls, shortfall, false, reused, started)?)?;
            }
            None => {
                sink(state.push(1, Vec::new(), calls, budget, true, Vec::new(), started)?)?;
            }
        }
    }
    let reason = if state.records.last().is_some_and(|r| r.failed) {
        TerminationReason::ProposalFailure
    } else {
        TerminationReason::MaxIterations
    };
    state.finish(Method::Paraphrasing, u64::from(budget), reason)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStat {
    pub iteration: u32,
    /// `None` when the iteration produced no proposals.
    pub mean_rel: Option<f64>,
    pub max_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    /// One entry per proposal iteration (1, 2, ...).
    pub iterations: Vec<IterationStat>,
    /// Running maximum of the per-iteration maxima, starting at 0 for
    /// iteration 0. Indexed by iteration.
    pub cumulative_max: Vec<f64>,
}

/// Running maximum over `values`, skipping gaps. Starts from the first
/// present value; leading gaps take `floor`.
pub fn running_max(values: &[Option<f64>], floor: Option<f64>) -> Vec<f64> {
    let mut cur = floor;
    values
        .iter()
        .map(|v| {
            if let Some(x) = v {
                cur = Some(cur.map_or(*x, |c| c.max(*x)));
            }
            cur.unwrap_or(f64::NAN)
        })
        .collect()
}

/// Per-iteration mean and max relative improvement of the proposals over the
/// user prompt, in the objective's unit, plus the cumulative max curve.
pub fn iteration_stats(log: &RunLog) -> Result<IterationStats> {
    let init = log
        .initial_score()
        .ok_or_else(|| Error::InvalidInput("run log has no records".into()))?;
    let objective = log.config.objective;
    let mut iterations = Vec::new();
    for r in log.records.iter().skip(1) {
        let rels = r
            .proposals
            .iter()
            .map(|p| objective.relative_improvement(init, p.mean_score()))
            .collect::<Result<Vec<_>>>()?;
        let (mean_rel, max_rel) = if rels.is_empty() {
            (None, None)
        } else {
            let mean = rels.iter().sum::<f64>() / rels.len() as f64;
            let max = rels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (Some(mean), Some(max))
        };
        iterations.push(IterationStat {
            iteration: r.iteration,
            mean_rel,
            max_rel,
        });
    }
    let mut series = vec![Some(0.0)];
    series.extend(iterations.iter().map(|s| s.max_rel));
    Ok(IterationStats {
        iterations,
        cumulative_max: running_max(&series, Some(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_max_examples() {
        let v = running_max(&[Some(2.0), Some(1.0), Some(5.0)], None);
        assert_eq!(v, vec![2.0, 2.0, 5.0]);
        let v = running_max(&[Some(0.0), None, Some(-3.0), Some(4.0)], Some(0.0));
        assert_eq!(v, vec![0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Opt2i, Method::Paraphrasing, Method::Icl1Shot] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
