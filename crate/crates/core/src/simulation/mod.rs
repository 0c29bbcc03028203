//! A deterministic synthetic world that implements every backend interface.
//!
//! Prompts are matched against a lexicon of elements. An element mentioned
//! at rank `r` (order of first mention) with `d` descriptor words right in
//! front of it renders with probability
//! `clamp(base - position_penalty * r + emphasis_bonus * d, 0.02, 0.98)`.
//! Each draw is a pure function of `(world seed, prompt text, image seed)`.
//!
//! The simulated LLM reads the meta-prompt text itself (see [`llm`]), so a
//! template change that breaks parsing also breaks the simulation.

mod llm;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendResult, Backends, Embedder, GenerationParams, ImageGenerator, QuestionAnswerer,
    TextGenerator,
};
use crate::digest::{sha256_hex, SeedHasher};
use crate::error::{BackendError, Error, Result};
use crate::model::{ImageRef, UserPrompt};
use crate::scoring::{clip_subscore, Question, QuestionGraph, QuestionGraphGenerator, CLIP_SCALE};

/// Cosine reported for a rendered element; 2.5 * 0.38 = 0.95 after rescaling.
pub const MATCH_COSINE: f64 = 0.38;
/// Cosine reported for a missing element; 2.5 * 0.04 = 0.10 after rescaling.
pub const MISS_COSINE: f64 = 0.04;
pub const MIN_PROB: f64 = 0.02;
pub const MAX_PROB: f64 = 0.98;

const PAYLOAD_PREFIX: &str = "sim:";
const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub const DEFAULT_DESCRIPTORS: [&str; 24] = [
    "vivid", "prominent", "detailed", "striking", "bright", "large", "distinct", "clear",
    "colorful", "glowing", "sharp", "bold", "crisp", "radiant", "towering", "gleaming", "shiny",
    "huge", "dramatic", "brilliant", "luminous", "textured", "polished", "massive",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub base_render_prob: f64,
    pub position_penalty: f64,
    pub emphasis_bonus: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            base_render_prob: 0.9,
            position_penalty: 0.05,
            emphasis_bonus: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub name: String,
    /// Overrides the world's base render probability for this element.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimQuestion {
    pub id: u32,
    pub text: String,
    /// The lexicon element whose presence answers this question.
    pub element: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimPrompt {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Noun phrases the simulated LLM returns for this prompt. Defaults to the
    /// matched element names.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<Vec<String>>,
    /// Question graph for this prompt. Defaults to one "Is there ...?"
    /// question per matched element with no dependencies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questions: Option<Vec<SimQuestion>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dependencies: Vec<(u32, u32)>,
}

/// Serializable description of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    #[serde(default)]
    pub params: SimParams,
    #[serde(default = "default_descriptors")]
    pub descriptors: Vec<String>,
    pub lexicon: Vec<LexiconEntry>,
    #[serde(default)]
    pub prompts: Vec<SimPrompt>,
}

fn default_descriptors() -> Vec<String> {
    DEFAULT_DESCRIPTORS.iter().map(|s| s.to_string()).collect()
}

/// One element occurrence in a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Mention {
    pub element: usize,
    /// Descriptor words directly in front of the element, in text order.
    pub descriptors: Vec<String>,
}

pub struct SimWorld {
    spec: WorldSpec,
    id: String,
    /// Element token sequences, longest first.
    patterns: Vec<(Vec<String>, usize)>,
    descriptor_set: HashSet<String>,
    questions: HashMap<String, usize>,
    prompt_by_text: HashMap<String, usize>,
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn element_tokens(name: &str) -> Vec<String> {
    let mut t = tokens(name);
    while t.len() > 1 && ARTICLES.contains(&t[0].as_str()) {
        t.remove(0);
    }
    t
}

impl SimWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        let p = spec.params;
        if !(p.base_render_prob > 0.0 && p.base_render_prob <= 1.0) {
            return Err(Error::InvalidInput("base_render_prob must be in (0, 1]".into()));
        }
        if !(p.position_penalty >= 0.0 && p.emphasis_bonus >= 0.0) {
            return Err(Error::InvalidInput("penalty and bonus must be >= 0".into()));
        }
        let mut patterns = Vec::new();
        let mut seen = HashSet::new();
        for (i, e) in spec.lexicon.iter().enumerate() {
            let t = element_tokens(&e.name);
            if t.is_empty() || !seen.insert(t.clone()) {
                return Err(Error::InvalidInput(format!("lexicon entry {:?} is empty or repeated", e.name)));
            }
            if let Some(b) = e.base {
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::InvalidInput(format!("base of {:?} outside [0, 1]", e.name)));
                }
            }
            patterns.push((t, i));
        }
        patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let descriptor_set = spec.descriptors.iter().map(|d| d.to_lowercase()).collect();
        let mut world = Self {
            id: String::new(),
            patterns,
            descriptor_set,
            questions: HashMap::new(),
            prompt_by_text: HashMap::new(),
            spec,
        };
        for (pi, prompt) in world.spec.prompts.iter().enumerate() {
            world.prompt_by_text.insert(prompt.text.trim().to_string(), pi);
            if let Some(qs) = &prompt.questions {
                for q in qs {
                    let el = world.element_index(&q.element).ok_or_else(|| {
                        Error::InvalidInput(format!("question {:?} names unknown element {:?}", q.text, q.element))
                    })?;
                    world.questions.insert(q.text.trim().to_string(), el);
                }
            }
        }
        for prompt in &world.spec.prompts {
            world.graph_for(&prompt.text)?;
        }
        let canonical = serde_json::to_string(&world.spec)?;
        world.id = format!("sim-{}", &sha256_hex(canonical)[..12]);
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: WorldSpec = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::new(spec)
    }

    /// The bundled world covering the worked examples (snowy bike and the
    /// six decomposition examples), with their question graphs.
    pub fn paper_examples() -> Self {
        let spec: WorldSpec = serde_json::from_str(include_str!("../../fixtures/paper_examples.json"))
            .expect("bundled world parses");
        Self::new(spec).expect("bundled world is valid")
    }

    /// A generated world of `n` prompts, each with two or three easy
    /// elements followed by one hard, trailing element.
    pub fn synthetic(seed: u64, n: usize, params: SimParams) -> Self {
        Self::new(synthetic::generate(seed, n, params)).expect("generated world is valid")
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn params(&self) -> SimParams {
        self.spec.params
    }

    pub fn element_name(&self, element: usize) -> &str {
        &self.spec.lexicon[element].name
    }

    fn element_index(&self, name: &str) -> Option<usize> {
        let t = element_tokens(name);
        self.patterns.iter().find(|(p, _)| *p == t).map(|(_, i)| *i)
    }

    fn base_prob(&self, element: usize) -> f64 {
        self.spec.lexicon[element]
            .base
            .unwrap_or(self.spec.params.base_render_prob)
    }

    /// The world's prompts as user prompts.
    pub fn user_prompts(&self) -> Vec<UserPrompt> {
        self.spec
            .prompts
            .iter()
            .map(|p| UserPrompt {
                id: p.id.clone(),
                text: p.text.clone(),
                category: p.category.clone(),
            })
            .collect()
    }

    pub fn prompt(&self, text: &str) -> Option<&SimPrompt> {
        self.prompt_by_text.get(text.trim()).map(|&i| &self.spec.prompts[i])
    }

    pub fn is_descriptor(&self, token: &str) -> bool {
        self.descriptor_set.contains(token)
    }

    pub fn descriptors(&self) -> &[String] {
        &self.spec.descriptors
    }

    /// First mention of every lexicon element, in text order. Matching is
    /// greedy left to right, longest element first.
    pub fn mentions(&self, text: &str) -> Vec<Mention> {
        let toks = tokens(text);
        let mut out: Vec<Mention> = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            let hit = self
                .patterns
                .iter()
                .find(|(p, _)| toks.len() - i >= p.len() && toks[i..i + p.len()] == p[..]);
            match hit {
                Some((p, el)) => {
                    if !out.iter().any(|m| m.element == *el) {
                        let mut start = i;
                        while start > 0 && self.is_descriptor(&toks[start - 1]) {
                            start -= 1;
                        }
                        out.push(Mention {
                            element: *el,
                            descriptors: toks[start..i].to_vec(),
                        });
                    }
                    i += p.len();
                }
                None => i += 1,
            }
        }
        out
    }

    /// The single element `text` refers to.
    pub fn resolve(&self, text: &str) -> BackendResult<usize> {
        if let Some(&el) = self.questions.get(text.trim()) {
            return Ok(el);
        }
        let m = self.mentions(text);
        match m.as_slice() {
            [one] => Ok(one.element),
            _ => Err(BackendError::UnknownElement(text.to_string())),
        }
    }

    /// Render probability of every mentioned element, in rank order.
    pub fn render_probs(&self, text: &str) -> Vec<(usize, f64)> {
        let p = self.spec.params;
        self.mentions(text)
            .iter()
            .enumerate()
            .map(|(rank, m)| {
                let raw = self.base_prob(m.element) - p.position_penalty * rank as f64
                    + p.emphasis_bonus * m.descriptors.len() as f64;
                (m.element, raw.clamp(MIN_PROB, MAX_PROB))
            })
            .collect()
    }

    pub fn render(&self, prompt: &str, seed: u64) -> Vec<usize> {
        let mut rng = SeedHasher::new()
            .u64(self.spec.seed)
            .part(prompt)
            .u64(seed)
            .rng();
        self.render_probs(prompt)
            .into_iter()
            .filter(|(_, p)| rng.next_f64() < *p)
            .map(|(el, _)| el)
            .collect()
    }

    fn image(&self, prompt: &str, seed: u64) -> ImageRef {
        let names: Vec<&str> = self
            .render(prompt, seed)
            .into_iter()
            .map(|el| self.element_name(el))
            .collect();
        ImageRef {
            backend_id: self.id.clone(),
            prompt_digest: sha256_hex(prompt),
            seed,
            payload: format!("{PAYLOAD_PREFIX}{}", names.join("|")),
        }
    }

    /// Elements encoded in a simulated image payload.
    pub fn rendered_in(&self, image: &ImageRef) -> BackendResult<HashSet<usize>> {
        let body = image
            .payload
            .strip_prefix(PAYLOAD_PREFIX)
            .ok_or_else(|| BackendError::InvalidImage(image.payload.clone()))?;
        body.split('|')
            .filter(|s| !s.is_empty())
            .map(|name| {
                self.element_index(name)
                    .ok_or_else(|| BackendError::InvalidImage(image.payload.clone()))
            })
            .collect()
    }

    /// An image payload in which exactly `elements` are rendered.
    pub fn image_with(&self, elements: &[&str]) -> Result<ImageRef> {
        let mut names = Vec::new();
        for e in elements {
            let el = self
                .element_index(e)
                .ok_or_else(|| Error::InvalidInput(format!("unknown element {e:?}")))?;
            names.push(self.element_name(el).to_string());
        }
        Ok(ImageRef {
            backend_id: self.id.clone(),
            prompt_digest: sha256_hex(elements.join(" ")),
            seed: 0,
            payload: format!("{PAYLOAD_PREFIX}{}", names.join("|")),
        })
    }

    /// Noun phrases for `prompt`: the fixture decomposition if present,
    /// otherwise the matched element names.
    pub fn decompose(&self, prompt: &str) -> Option<Vec<String>> {
        if let Some(d) = self.prompt(prompt).and_then(|p| p.decomposition.clone()) {
            return Some(d);
        }
        let names: Vec<String> = self
            .mentions(prompt)
            .iter()
            .map(|m| self.element_name(m.element).to_string())
            .collect();
        (!names.is_empty()).then_some(names)
    }

    /// Question graph for `prompt` plus the element behind each question.
    pub fn graph_for(&self, prompt: &str) -> Result<(QuestionGraph, Vec<usize>)> {
        if let Some(p) = self.prompt(prompt) {
            if let Some(qs) = &p.questions {
                let graph = QuestionGraph::new(
                    qs.iter()
                        .map(|q| Question {
                            id: q.id,
                            text: q.text.clone(),
                        })
                        .collect(),
                    p.dependencies.clone(),
                )?;
                let elements = graph
                    .questions()
                    .iter()
                    .map(|q| self.questions[q.text.trim()])
                    .collect();
                return Ok((graph, elements));
            }
        }
        let mentions = self.mentions(prompt);
        if mentions.is_empty() {
            return Err(Error::InvalidInput(format!("no lexicon element in {prompt:?}")));
        }
        let questions = mentions
            .iter()
            .enumerate()
            .map(|(i, m)| Question {
                id: i as u32 + 1,
                text: format!("Is there {}?", with_article(self.element_name(m.element))),
            })
            .collect();
        let graph = QuestionGraph::new(questions, Vec::new())?;
        Ok((graph, mentions.iter().map(|m| m.element).collect()))
    }

    fn prob_in(&self, text: &str) -> HashMap<usize, f64> {
        self.render_probs(text).into_iter().collect()
    }

    /// Expected dCS of images of `candidate` scored against `user_prompt`.
    pub fn expected_dcs(&self, user_prompt: &str, candidate: &str) -> Result<f64> {
        let phrases = self
            .decompose(user_prompt)
            .ok_or_else(|| Error::InvalidInput(format!("no lexicon element in {user_prompt:?}")))?;
        let probs = self.prob_in(candidate);
        let hit = clip_subscore(MATCH_COSINE, CLIP_SCALE);
        let miss = clip_subscore(MISS_COSINE, CLIP_SCALE);
        let mut sum = 0.0;
        for ph in &phrases {
            let el = self.resolve(ph)?;
            let p = probs.get(&el).copied().unwrap_or(0.0);
            sum += p * hit + (1.0 - p) * miss;
        }
        Ok(sum / phrases.len() as f64)
    }

    /// Expected question-graph score of images of `candidate` scored against
    /// `user_prompt`, with elements drawn independently.
    pub fn expected_dsg(&self, user_prompt: &str, candidate: &str) -> Result<f64> {
        let (graph, elements) = self.graph_for(user_prompt)?;
        let probs = self.prob_in(candidate);
        let mut sum = 0.0;
        for q in graph.questions() {
            let mut needed: HashSet<usize> = HashSet::new();
            let mut stack = vec![q.id];
            while let Some(id) = stack.pop() {
                needed.insert(elements[id as usize - 1]);
                stack.extend(graph.dependencies().iter().filter(|(c, _)| *c == id).map(|(_, p)| *p));
            }
            sum += needed
                .iter()
                .map(|el| probs.get(el).copied().unwrap_or(0.0))
                .product::<f64>();
        }
        Ok(sum / graph.len() as f64)
    }

    /// All four backends plus the graph generator, served by this world.
    pub fn backends(self: &Arc<Self>) -> Backends {
        let sim = Arc::new(SimBackend {
            world: Arc::clone(self),
        });
        Backends {
            llm: sim.clone(),
            images: sim.clone(),
            embedder: sim.clone(),
            vqa: sim.clone(),
            graphs: sim,
        }
    }
}

pub(crate) fn with_article(name: &str) -> String {
    let first = tokens(name).into_iter().next().unwrap_or_default();
    if ARTICLES.contains(&first.as_str()) {
        return name.to_string();
    }
    let vowel = first.starts_with(['a', 'e', 'i', 'o', 'u']);
    format!("{} {name}", if vowel { "an" } else { "a" })
}

/// Backend adapter over a shared [`SimWorld`].
pub struct SimBackend {
    world: Arc<SimWorld>,
}

impl SimBackend {
    pub fn new(world: Arc<SimWorld>) -> Self {
        Self { world }
    }
}

impl TextGenerator for SimBackend {
    fn backend_id(&self) -> String {
        self.world.id.clone()
    }

    fn generate(&self, system: Option<&str>, user: &str, params: &GenerationParams) -> BackendResult<String> {
        llm::respond(&self.world, system, user, params)
    }
}

impl ImageGenerator for SimBackend {
    fn backend_id(&self) -> String {
        self.world.id.clone()
    }

    fn generate(&self, prompt: &str, seed: u64) -> BackendResult<ImageRef> {
        Ok(self.world.image(prompt, seed))
    }
}

impl Embedder for SimBackend {
    fn backend_id(&self) -> String {
        self.world.id.clone()
    }

    fn similarity(&self, text: &str, image: &ImageRef) -> BackendResult<f64> {
        let el = self.world.resolve(text)?;
        let rendered = self.world.rendered_in(image)?;
        Ok(if rendered.contains(&el) { MATCH_COSINE } else { MISS_COSINE })
    }
}

impl QuestionAnswerer for SimBackend {
    fn backend_id(&self) -> String {
        self.world.id.clone()
    }

    fn answer(&self, question: &str, image: &ImageRef) -> BackendResult<f64> {
        let el = self.world.resolve(question)?;
        let rendered = self.world.rendered_in(image)?;
        Ok(if rendered.contains(&el) { 1.0 } else { 0.0 })
    }
}

impl QuestionGraphGenerator for SimBackend {
    fn generate(&self, prompt: &str) -> Result<QuestionGraph> {
        self.world.graph_for(prompt).map(|(g, _)| g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(params: SimParams, lexicon: &[(&str, Option<f64>)]) -> SimWorld {
        SimWorld::new(WorldSpec {
            seed: 3,
            params,
            descriptors: default_descriptors(),
            lexicon: lexicon
                .iter()
                .map(|(n, b)| LexiconEntry {
                    name: n.to_string(),
                    base: *b,
                })
                .collect(),
            prompts: vec![],
        })
        .unwrap()
    }

    #[test]
    fn mentions_follow_text_order_with_descriptors() {
        let w = world(SimParams::default(), &[("hot dog", None), ("dog", None), ("snow", None)]);
        let m = w.mentions("vivid bright snow next to a hot dog and a dog");
        assert_eq!(m.len(), 3);
        assert_eq!(w.element_name(m[0].element), "snow");
        assert_eq!(m[0].descriptors, vec!["vivid", "bright"]);
        assert_eq!(w.element_name(m[1].element), "hot dog");
        assert_eq!(w.element_name(m[2].element), "dog");
    }

    #[test]
    fn probability_rule() {
        let w = world(
            SimParams {
                base_render_prob: 0.9,
                position_penalty: 0.1,
                emphasis_bonus: 0.15,
            },
            &[("cat", None), ("hat", Some(0.2)), ("box", None)],
        );
        let p = w.render_probs("cat with box and hat");
        assert!((p[0].1 - 0.9).abs() < 1e-12);
        assert!((p[1].1 - 0.8).abs() < 1e-12);
        assert_eq!(p[2].1, MIN_PROB);
        let p = w.render_probs("glowing shiny hat with cat");
        assert!((p[0].1 - 0.5).abs() < 1e-12);
        let p = w.render_probs("vivid bright large huge shiny glowing cat");
        assert_eq!(p[0].1, MAX_PROB);
    }

    #[test]
    fn empirical_rate_matches_closed_form() {
        let w = world(
            SimParams {
                base_render_prob: 0.98,
                position_penalty: 0.0,
                emphasis_bonus: 0.0,
            },
            &[("cat", None)],
        );
        let hits = (0..400).filter(|s| w.render("a cat", *s).len() == 1).count();
        assert!((hits as f64 / 400.0 - 0.98).abs() <= 0.05, "{hits}");
    }

    #[test]
    fn absent_elements_never_render_and_draws_repeat() {
        let w = world(SimParams::default(), &[("cat", None), ("dog", None)]);
        for s in 0..200 {
            assert!(!w.render("a cat", s).contains(&1));
        }
        assert_eq!(w.image("a cat and a dog", 9), w.image("a cat and a dog", 9));
    }

    #[test]
    fn sim_scores() {
        let w = Arc::new(world(SimParams::default(), &[("cat", None), ("dog", None)]));
        let sim = SimBackend::new(w.clone());
        let img = w.image_with(&["cat"]).unwrap();
        assert_eq!(QuestionAnswerer::answer(&sim, "Is there a cat?", &img).unwrap(), 1.0);
        assert_eq!(QuestionAnswerer::answer(&sim, "Is there a dog?", &img).unwrap(), 0.0);
        let miss = sim.similarity("a dog", &img).unwrap();
        assert!((clip_subscore(miss, CLIP_SCALE) - 0.10).abs() < 1e-12);
        assert!(matches!(
            QuestionAnswerer::answer(&sim, "Is there a whale?", &img),
            Err(BackendError::UnknownElement(_))
        ));
    }

    #[test]
    fn bundled_world_loads() {
        let w = SimWorld::paper_examples();
        assert_eq!(
            w.decompose("a bike lying on the ground, covered in snow").unwrap(),
            vec!["a bike", "the ground", "snow"]
        );
        let (g, _) = w.graph_for("A ginger cat is sleeping next to the window.").unwrap();
        assert_eq!(g.len(), 5);
        let (g, _) = w.graph_for("a bike lying on the ground, covered in snow").unwrap();
        assert_eq!(g.dependencies(), &[(2, 1), (3, 1)]);
    }
}
