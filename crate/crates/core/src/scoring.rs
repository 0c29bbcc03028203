//! Prompt-image consistency scoring.
//!
//! Two objectives are supported. Decomposed CLIPScore splits the user prompt
//! into noun phrases and scores each phrase against the image with an
//! embedder. The question-graph score asks a VQA model a DAG of binary
//! questions and zeroes every question whose ancestor was answered "no".
//! Either way the elements come from the user prompt only, never from the
//! candidate being scored.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Embedder, GenerationParams, QuestionAnswerer, TextGenerator};
use crate::error::{BackendError, Error, Result};
use crate::metaprompt::{build_decompose, parse_noun_phrases};
use crate::model::{
    CandidatePrompt, ConsistencyReport, ElementKind, ElementScore, ImageRef, Objective,
    PromptCandidate, UserPrompt,
};

/// CLIPScore rescaling: `w * max(cos, 0)`, clamped to `[0, 1]`.
pub const CLIP_SCALE: f64 = 2.5;
/// VQA answers below this invalidate every descendant question.
pub const DEPENDENCY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPhraseSet {
    pub source_prompt: String,
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    pub text: String,
}

/// Binary questions with `(child, parent)` dependency edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuestionGraph {
    questions: Vec<Question>,
    dependencies: Vec<(u32, u32)>,
    /// Question indices in an order where parents precede children.
    #[serde(skip)]
    topo: Vec<usize>,
}

impl QuestionGraph {
    pub fn new(mut questions: Vec<Question>, dependencies: Vec<(u32, u32)>) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::InvalidGraph("no questions".into()));
        }
        questions.sort_by_key(|q| q.id);
        for (i, q) in questions.iter().enumerate() {
            if q.id as usize != i + 1 {
                return Err(Error::InvalidGraph(format!(
                    "question ids must be 1..={} without gaps or repeats",
                    questions.len()
                )));
            }
        }
        let n = questions.len();
        let mut indegree = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        for &(child, parent) in &dependencies {
            for id in [child, parent] {
                if id == 0 || id as usize > n {
                    return Err(Error::InvalidGraph(format!("edge references unknown question {id}")));
                }
            }
            if child == parent {
                return Err(Error::InvalidGraph(format!("question {child} depends on itself")));
            }
            indegree[child as usize - 1] += 1;
            children[parent as usize - 1].push(child as usize - 1);
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).rev().collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(i) = ready.pop() {
            topo.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if topo.len() != n {
            return Err(Error::InvalidGraph("dependencies contain a cycle".into()));
        }
        Ok(Self {
            questions,
            dependencies,
            topo,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn dependencies(&self) -> &[(u32, u32)] {
        &self.dependencies
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Applies the dependency rule to raw answers given in question order:
    /// a question with any ancestor answered below `threshold` scores 0.
    pub fn apply_dependencies(&self, answers: &[f64], threshold: f64) -> Vec<f64> {
        assert_eq!(answers.len(), self.len(), "one answer per question");
        let mut invalid = vec![false; self.len()];
        for &i in &self.topo {
            let id = i as u32 + 1;
            invalid[i] = self
                .dependencies
                .iter()
                .filter(|(c, _)| *c == id)
                .any(|&(_, p)| {
                    let p = p as usize - 1;
                    invalid[p] || answers[p] < threshold
                });
        }
        answers
            .iter()
            .zip(&invalid)
            .map(|(&a, &bad)| if bad { 0.0 } else { a })
            .collect()
    }
}

#[derive(Deserialize)]
struct RawGraph {
    questions: Vec<Question>,
    #[serde(default)]
    dependencies: Vec<(u32, u32)>,
}

impl<'de> Deserialize<'de> for QuestionGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawGraph::deserialize(d)?;
        QuestionGraph::new(raw.questions, raw.dependencies).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub question_id: u32,
    pub answer: f64,
}

/// Source of question graphs for user prompts.
pub trait QuestionGraphGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<QuestionGraph>;

    /// The same generator issuing its LLM calls through `llm`, for
    /// generators that use one. Lets cache and metering wrappers see them.
    fn rebind_llm(&self, _llm: Arc<dyn TextGenerator>) -> Option<Arc<dyn QuestionGraphGenerator>> {
        None
    }
}

/// One record of a graph fixture file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub prompt_id: String,
    pub prompt: String,
    #[serde(flatten)]
    pub graph: QuestionGraph,
}

/// Question graphs read from a fixture, looked up by prompt text.
#[derive(Debug, Clone, Default)]
pub struct FixtureGraphs {
    by_prompt: HashMap<String, QuestionGraph>,
}

impl FixtureGraphs {
    pub fn new(records: impl IntoIterator<Item = GraphRecord>) -> Self {
        Self {
            by_prompt: records
                .into_iter()
                .map(|r| (r.prompt.trim().to_string(), r.graph))
                .collect(),
        }
    }

    /// Reads a JSON array of [`GraphRecord`]s.
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<GraphRecord> = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(Self::new(records))
    }

    pub fn insert(&mut self, prompt: &str, graph: QuestionGraph) {
        self.by_prompt.insert(prompt.trim().to_string(), graph);
    }

    pub fn get(&self, prompt: &str) -> Option<&QuestionGraph> {
        self.by_prompt.get(prompt.trim())
    }
}

impl QuestionGraphGenerator for FixtureGraphs {
    fn generate(&self, prompt: &str) -> Result<QuestionGraph> {
        self.get(prompt)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("no fixture question graph for {prompt:?}")))
    }
}

/// Generic LLM-backed question generation. The instruction text here is a
/// plain working prompt, not a reproduction of any published generator.
pub struct LlmGraphGenerator {
    llm: Arc<dyn TextGenerator>,
}

pub const GRAPH_SYSTEM: &str = "Write atomic yes/no questions that check whether an image \
depicts the given description. Cover every entity, attribute and relation once. Output one \
question per line as: id | question | comma separated ids of the questions it depends on \
(empty if none). Ids start at 1. Output nothing else.";

impl LlmGraphGenerator {
    pub fn new(llm: Arc<dyn TextGenerator>) -> Self {
        Self { llm }
    }
}

/// Parses `id | question | parents` lines.
pub fn parse_graph_lines(raw: &str) -> Result<QuestionGraph> {
    let mut questions = Vec::new();
    let mut deps = Vec::new();
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split('|').map(str::trim).collect();
        if cols.len() < 2 {
            continue;
        }
        let Ok(id) = cols[0].trim_end_matches('.').parse::<u32>() else {
            continue;
        };
        questions.push(Question {
            id,
            text: cols[1].to_string(),
        });
        if let Some(parents) = cols.get(2) {
            for p in parents.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let p = p
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidGraph(format!("bad parent id {p:?}")))?;
                deps.push((id, p));
            }
        }
    }
    QuestionGraph::new(questions, deps)
}

impl QuestionGraphGenerator for LlmGraphGenerator {
    fn rebind_llm(&self, llm: Arc<dyn TextGenerator>) -> Option<Arc<dyn QuestionGraphGenerator>> {
        Some(Arc::new(LlmGraphGenerator::new(llm)))
    }

    fn generate(&self, prompt: &str) -> Result<QuestionGraph> {
        let params = GenerationParams {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        };
        let raw = self.llm.generate(Some(GRAPH_SYSTEM), prompt, &params)?;
        parse_graph_lines(&raw)
    }
}

/// Checks an embedder output, clamping slight excursions outside `[-1, 1]`.
fn checked_cosine(x: f64) -> std::result::Result<f64, BackendError> {
    if !x.is_finite() {
        return Err(BackendError::NonFinite);
    }
    if !(-1.0..=1.0).contains(&x) {
        log::warn!("embedder returned {x}, clamping to [-1, 1]");
        return Ok(x.clamp(-1.0, 1.0));
    }
    Ok(x)
}

fn checked_probability(x: f64) -> std::result::Result<f64, BackendError> {
    if !x.is_finite() {
        return Err(BackendError::NonFinite);
    }
    if !(0.0..=1.0).contains(&x) {
        log::warn!("VQA returned {x}, clamping to [0, 1]");
        return Ok(x.clamp(0.0, 1.0));
    }
    Ok(x)
}

pub fn clip_subscore(cosine: f64, scale: f64) -> f64 {
    (scale * cosine.max(0.0)).clamp(0.0, 1.0)
}

/// Decomposes `prompt` into noun phrases with the LLM at temperature 0,
/// retrying once when the reply cannot be parsed.
pub fn decompose_noun_phrases(prompt: &str, llm: &dyn TextGenerator) -> Result<NounPhraseSet> {
    let mp = build_decompose(prompt)?;
    let params = GenerationParams {
        temperature: 0.0,
        max_tokens: 256,
        seed: None,
    };
    let mut last = Error::NoPhrases;
    for _ in 0..2 {
        let raw = llm.generate(mp.system.as_deref(), &mp.user, &params)?;
        match parse_noun_phrases(&raw) {
            Ok(phrases) => {
                return Ok(NounPhraseSet {
                    source_prompt: prompt.to_string(),
                    phrases,
                })
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

pub fn dcs_score(
    decomposition: &NounPhraseSet,
    image: &ImageRef,
    embedder: &dyn Embedder,
    scale: f64,
) -> Result<ConsistencyReport> {
    let mut elements = Vec::with_capacity(decomposition.phrases.len());
    for (index, phrase) in decomposition.phrases.iter().enumerate() {
        let cos = embedder
            .similarity(phrase, image)
            .and_then(checked_cosine)
            .map_err(|source| Error::Embedder { index, source })?;
        elements.push(ElementScore {
            label: phrase.clone(),
            subscore: clip_subscore(cos, scale),
            kind: ElementKind::NounPhrase,
        });
    }
    ConsistencyReport::new(elements, image.clone())
}

pub fn build_question_graph(prompt: &str, generator: &dyn QuestionGraphGenerator) -> Result<QuestionGraph> {
    if prompt.trim().is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    generator.generate(prompt)
}

pub fn dsg_score(
    graph: &QuestionGraph,
    image: &ImageRef,
    vqa: &dyn QuestionAnswerer,
    threshold: f64,
) -> Result<ConsistencyReport> {
    let mut answers = Vec::with_capacity(graph.len());
    for q in graph.questions() {
        let a = vqa
            .answer(&q.text, image)
            .and_then(checked_probability)
            .map_err(|source| Error::Vqa {
                question_id: q.id,
                source,
            })?;
        answers.push(a);
    }
    let subscores = graph.apply_dependencies(&answers, threshold);
    let elements = graph
        .questions()
        .iter()
        .zip(subscores)
        .map(|(q, s)| ElementScore {
            label: q.text.clone(),
            subscore: s,
            kind: ElementKind::Question,
        })
        .collect();
    ConsistencyReport::new(elements, image.clone())
}

/// Single-scalar CLIPScore of the whole prompt. Diagnostic only; never fed
/// back into the optimizer.
pub fn plain_clip_score(text: &str, image: &ImageRef, embedder: &dyn Embedder, scale: f64) -> Result<f64> {
    let cos = embedder
        .similarity(text, image)
        .and_then(checked_cosine)
        .map_err(|source| Error::Embedder { index: 0, source })?;
    Ok(clip_subscore(cos, scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub clip_scale: f64,
    pub dependency_threshold: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            clip_scale: CLIP_SCALE,
            dependency_threshold: DEPENDENCY_THRESHOLD,
        }
    }
}

/// The scoring elements derived from a user prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elements {
    Phrases(NounPhraseSet),
    Graph(QuestionGraph),
}

/// Objective-specific scorer with per-user-prompt element caches.
pub struct Scorer {
    backends: Backends,
    objective: Objective,
    config: ScoringConfig,
    phrases: Mutex<HashMap<String, NounPhraseSet>>,
    graphs: Mutex<HashMap<String, QuestionGraph>>,
}

impl Scorer {
    pub fn new(backends: Backends, objective: Objective) -> Self {
        Self::with_config(backends, objective, ScoringConfig::default())
    }

    pub fn with_config(backends: Backends, objective: Objective, config: ScoringConfig) -> Self {
        Self {
            backends,
            objective,
            config,
            phrases: Mutex::new(HashMap::new()),
            graphs: Mutex::new(HashMap::new()),
        }
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// Noun phrases or question graph of the user prompt, computed once per
    /// prompt text.
    pub fn elements(&self, user_prompt: &UserPrompt) -> Result<Elements> {
        let key = user_prompt.text.clone();
        match self.objective {
            Objective::Dcs => {
                if let Some(p) = lock(&self.phrases).get(&key) {
                    return Ok(Elements::Phrases(p.clone()));
                }
                let set = decompose_noun_phrases(&key, self.backends.llm.as_ref())?;
                lock(&self.phrases).insert(key, set.clone());
                Ok(Elements::Phrases(set))
            }
            Objective::Dsg => {
                if let Some(g) = lock(&self.graphs).get(&key) {
                    return Ok(Elements::Graph(g.clone()));
                }
                let graph = build_question_graph(&key, self.backends.graphs.as_ref())?;
                lock(&self.graphs).insert(key, graph.clone());
                Ok(Elements::Graph(graph))
            }
        }
    }

    pub fn score_image(&self, elements: &Elements, image: &ImageRef) -> Result<ConsistencyReport> {
        match elements {
            Elements::Phrases(p) => dcs_score(p, image, self.backends.embedder.as_ref(), self.config.clip_scale),
            Elements::Graph(g) => dsg_score(g, image, self.backends.vqa.as_ref(), self.config.dependency_threshold),
        }
    }

    /// Scores already generated images of `prompt` against the user prompt.
    pub fn score_prompt(
        &self,
        prompt: CandidatePrompt,
        user_prompt: &UserPrompt,
        images: &[ImageRef],
    ) -> Result<PromptCandidate> {
        if images.is_empty() {
            return Err(Error::InvalidInput("no images to score".into()));
        }
        let elements = self.elements(user_prompt)?;
        let reports = images
            .iter()
            .map(|img| self.score_image(&elements, img))
            .collect::<Result<Vec<_>>>()?;
        PromptCandidate::new(prompt, reports)
    }

    /// Generates one image per seed for `prompt` and scores them.
    pub fn generate_and_score(
        &self,
        prompt: CandidatePrompt,
        user_prompt: &UserPrompt,
        seeds: &[u64],
    ) -> Result<PromptCandidate> {
        let images = seeds
            .iter()
            .map(|&s| self.backends.images.generate(prompt.text(), s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        self.score_prompt(prompt, user_prompt, &images)
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}
