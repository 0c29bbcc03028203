//! Domain values shared by every module, plus the score arithmetic used to
//! compare candidates and report improvements.
//!
//! Scores are carried as reals in `[0, 1]` everywhere. The 0-100 integer form
//! exists only where the meta-prompt is rendered ([`normalize_score`]).

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The human-written prompt every consistency score refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPrompt {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl UserPrompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("user prompt text is empty".into()));
        }
        Ok(Self {
            id: id.into(),
            text,
            category: None,
        })
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }
}

/// A prompt proposed by the LLM. Iteration 0 is reserved for the user prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisedPrompt {
    pub text: String,
    pub iteration: u32,
    pub ordinal: u32,
}

impl RevisedPrompt {
    pub fn new(text: impl Into<String>, iteration: u32, ordinal: u32) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("revised prompt text is empty".into()));
        }
        if iteration == 0 {
            return Err(Error::InvalidInput(
                "revised prompts start at iteration 1".into(),
            ));
        }
        Ok(Self {
            text,
            iteration,
            ordinal,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CandidatePrompt {
    User(UserPrompt),
    Revised(RevisedPrompt),
}

impl CandidatePrompt {
    pub fn text(&self) -> &str {
        match self {
            CandidatePrompt::User(p) => &p.text,
            CandidatePrompt::Revised(p) => &p.text,
        }
    }

    pub fn iteration(&self) -> u32 {
        match self {
            CandidatePrompt::User(_) => 0,
            CandidatePrompt::Revised(p) => p.iteration,
        }
    }

    pub fn ordinal(&self) -> u32 {
        match self {
            CandidatePrompt::User(_) => 0,
            CandidatePrompt::Revised(p) => p.ordinal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    NounPhrase,
    Question,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementScore {
    pub label: String,
    pub subscore: f64,
    pub kind: ElementKind,
}

/// Handle on one generated image.
///
/// `(backend_id, prompt_digest, seed)` identifies the image for caching; the
/// payload is opaque to everything but the backend that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub backend_id: String,
    pub prompt_digest: String,
    pub seed: u64,
    pub payload: String,
}

/// Consistency of one image with the user prompt, element by element.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    elements: Vec<ElementScore>,
    global: f64,
    image: ImageRef,
}

impl ConsistencyReport {
    /// Builds a report whose global score is the mean of the element subscores.
    pub fn new(elements: Vec<ElementScore>, image: ImageRef) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidInput("consistency report has no elements".into()));
        }
        for e in &elements {
            if !(0.0..=1.0).contains(&e.subscore) {
                return Err(Error::ScoreOutOfRange(e.subscore));
            }
        }
        let global = mean(elements.iter().map(|e| e.subscore));
        Ok(Self {
            elements,
            global,
            image,
        })
    }

    pub fn elements(&self) -> &[ElementScore] {
        &self.elements
    }

    pub fn global(&self) -> f64 {
        self.global
    }

    pub fn image(&self) -> &ImageRef {
        &self.image
    }
}

#[derive(Deserialize)]
struct RawReport {
    elements: Vec<ElementScore>,
    global: f64,
    image: ImageRef,
}

impl<'de> Deserialize<'de> for ConsistencyReport {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawReport::deserialize(d)?;
        let report = ConsistencyReport::new(raw.elements, raw.image).map_err(serde::de::Error::custom)?;
        if report.global.to_bits() != raw.global.to_bits() {
            return Err(serde::de::Error::custom(format!(
                "stored global {} does not equal the mean of subscores {}",
                raw.global, report.global
            )));
        }
        Ok(report)
    }
}

/// A prompt together with its per-image reports; the unit the optimizer ranks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptCandidate {
    prompt: CandidatePrompt,
    reports: Vec<ConsistencyReport>,
    mean_score: f64,
}

impl PromptCandidate {
    pub fn new(prompt: CandidatePrompt, reports: Vec<ConsistencyReport>) -> Result<Self> {
        let mean_score = mean_consistency(&reports)?;
        Ok(Self {
            prompt,
            reports,
            mean_score,
        })
    }

    /// Re-labels an already scored candidate, e.g. when a proposal repeats a
    /// text scored earlier in the run.
    pub fn with_prompt(&self, prompt: CandidatePrompt) -> Self {
        Self {
            prompt,
            reports: self.reports.clone(),
            mean_score: self.mean_score,
        }
    }

    pub fn prompt(&self) -> &CandidatePrompt {
        &self.prompt
    }

    pub fn text(&self) -> &str {
        self.prompt.text()
    }

    pub fn iteration(&self) -> u32 {
        self.prompt.iteration()
    }

    pub fn ordinal(&self) -> u32 {
        self.prompt.ordinal()
    }

    pub fn reports(&self) -> &[ConsistencyReport] {
        &self.reports
    }

    pub fn mean_score(&self) -> f64 {
        self.mean_score
    }

    /// Per-element subscores averaged across this candidate's images, in the
    /// element order of the first report.
    pub fn element_means(&self) -> Vec<(String, f64)> {
        let first = &self.reports[0];
        first
            .elements()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let m = mean(
                    self.reports
                        .iter()
                        .map(|r| r.elements().get(i).map_or(0.0, |x| x.subscore)),
                );
                (e.label.clone(), m)
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct RawCandidate {
    prompt: CandidatePrompt,
    reports: Vec<ConsistencyReport>,
    mean_score: f64,
}

impl<'de> Deserialize<'de> for PromptCandidate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawCandidate::deserialize(d)?;
        let c = PromptCandidate::new(raw.prompt, raw.reports).map_err(serde::de::Error::custom)?;
        if c.mean_score.to_bits() != raw.mean_score.to_bits() {
            return Err(serde::de::Error::custom("stored mean_score does not match reports"));
        }
        Ok(c)
    }
}

/// Consistency objective driving the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Decomposed CLIPScore over noun phrases.
    Dcs,
    /// Question-graph VQA score.
    Dsg,
}

impl Objective {
    /// Improvement of `best` over `init` (both in `[0, 1]`) in the unit the
    /// objective is reported in: percent for dCS, percentage points for DSG.
    pub fn relative_improvement(self, init: f64, best: f64) -> Result<f64> {
        match self {
            Objective::Dcs => relative_improvement_dcs(init, best),
            Objective::Dsg => relative_improvement_dsg(init * 100.0, best * 100.0),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Dcs => "dcs",
            Objective::Dsg => "dsg",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dcs" => Ok(Objective::Dcs),
            "dsg" => Ok(Objective::Dsg),
            other => Err(Error::InvalidInput(format!("unknown objective {other:?}"))),
        }
    }
}

/// Instruction additions for the dCS optimization meta-prompt.
///
/// Only the combinations that were actually evaluated are accepted:
/// conciseness, +prioritize, +prioritize+reasoning, +prioritize+structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetaPromptVariant {
    pub conciseness: bool,
    pub prioritize: bool,
    pub reasoning: bool,
    pub structure: bool,
}

impl Default for MetaPromptVariant {
    fn default() -> Self {
        Self::CONCISE_PRIORITIZE
    }
}

impl MetaPromptVariant {
    pub const CONCISE: Self = Self {
        conciseness: true,
        prioritize: false,
        reasoning: false,
        structure: false,
    };
    pub const CONCISE_PRIORITIZE: Self = Self {
        conciseness: true,
        prioritize: true,
        reasoning: false,
        structure: false,
    };
    pub const CONCISE_PRIORITIZE_REASONING: Self = Self {
        conciseness: true,
        prioritize: true,
        reasoning: true,
        structure: false,
    };
    pub const CONCISE_PRIORITIZE_STRUCTURE: Self = Self {
        conciseness: true,
        prioritize: true,
        reasoning: false,
        structure: true,
    };

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut v = Self {
            conciseness: false,
            prioritize: false,
            reasoning: false,
            structure: false,
        };
        for n in names {
            match n.as_ref().trim().to_ascii_lowercase().as_str() {
                "conciseness" => v.conciseness = true,
                "prioritize" => v.prioritize = true,
                "reasoning" => v.reasoning = true,
                "structure" => v.structure = true,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unknown meta-prompt variant flag {other:?}"
                    )))
                }
            }
        }
        v.validate()?;
        Ok(v)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.conciseness {
            out.push("conciseness");
        }
        if self.prioritize {
            out.push("prioritize");
        }
        if self.reasoning {
            out.push("reasoning");
        }
        if self.structure {
            out.push("structure");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let supported = [
            Self::CONCISE,
            Self::CONCISE_PRIORITIZE,
            Self::CONCISE_PRIORITIZE_REASONING,
            Self::CONCISE_PRIORITIZE_STRUCTURE,
        ];
        if supported.contains(self) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "unsupported meta-prompt variant {:?}; expected one of conciseness, \
                 conciseness+prioritize, conciseness+prioritize+reasoning, \
                 conciseness+prioritize+structure",
                self.names()
            )))
        }
    }
}

impl Serialize for MetaPromptVariant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MetaPromptVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        MetaPromptVariant::from_names(&names).map_err(serde::de::Error::custom)
    }
}

/// Knobs of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationConfig {
    pub max_iterations: u32,
    pub prompts_per_iter: u32,
    pub history_capacity: u32,
    pub images_per_prompt: u32,
    /// Image seeds reused for every prompt and iteration. When absent, fresh
    /// seeds are derived per candidate from `seed`.
    pub fixed_seeds: Option<Vec<u64>>,
    pub llm_temperature: f64,
    pub llm_max_tokens: u32,
    pub target_score: f64,
    pub objective: Objective,
    pub metaprompt_variant: MetaPromptVariant,
    /// Run-level seed for non-fixed image seeds.
    pub seed: u64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            prompts_per_iter: 5,
            history_capacity: 5,
            images_per_prompt: 4,
            fixed_seeds: Some(vec![0, 1, 2, 3]),
            llm_temperature: 1.0,
            llm_max_tokens: 2048,
            target_score: 1.0,
            objective: Objective::Dsg,
            metaprompt_variant: MetaPromptVariant::default(),
            seed: 0,
        }
    }
}

impl OptimizationConfig {
    /// Total number of revised prompts the run may score.
    pub fn budget(&self) -> u64 {
        u64::from(self.max_iterations) * u64::from(self.prompts_per_iter)
    }

    /// Collects every violated constraint rather than stopping at the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_iterations < 1 {
            v.push("max_iterations must be >= 1".to_string());
        }
        if self.prompts_per_iter < 1 {
            v.push("prompts_per_iter must be >= 1".to_string());
        }
        if self.history_capacity < 1 {
            v.push("history_capacity must be >= 1".to_string());
        }
        if self.images_per_prompt < 1 {
            v.push("images_per_prompt must be >= 1".to_string());
        }
        if let Some(seeds) = &self.fixed_seeds {
            if seeds.len() != self.images_per_prompt as usize {
                v.push(format!(
                    "fixed_seeds has {} entries but images_per_prompt is {}",
                    seeds.len(),
                    self.images_per_prompt
                ));
            }
        }
        if !(self.llm_temperature >= 0.0 && self.llm_temperature.is_finite()) {
            v.push("llm_temperature must be a finite value >= 0".to_string());
        }
        if self.llm_max_tokens < 1 {
            v.push("llm_max_tokens must be >= 1".to_string());
        }
        if !(self.target_score > 0.0 && self.target_score <= 1.0) {
            v.push("target_score must be in (0, 1]".to_string());
        }
        if self.objective == Objective::Dsg && self.metaprompt_variant != MetaPromptVariant::default() {
            v.push("metaprompt_variant flags only apply to the dcs objective".to_string());
        }
        if let Err(e) = self.metaprompt_variant.validate() {
            v.push(e.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Arithmetic mean of the reports' global scores.
pub fn mean_consistency(reports: &[ConsistencyReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    Ok(mean(reports.iter().map(ConsistencyReport::global)))
}

/// Round-half-up of `100 * raw`.
///
/// A tolerance of 1e-9 (in hundredths) absorbs binary representation error so
/// that decimal halves such as 0.285 round up as written.
pub fn normalize_score(raw: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&raw) {
        return Err(Error::ScoreOutOfRange(raw));
    }
    let scaled = (raw * 100.0 + 0.5 + 1e-9).floor();
    Ok(scaled.min(100.0) as u8)
}

/// dCS relative improvement in percent: `100 * (best / init - 1)`.
pub fn relative_improvement_dcs(init: f64, best: f64) -> Result<f64> {
    if init == 0.0 {
        return Err(Error::UndefinedRelativeImprovement);
    }
    if init.is_nan() || init < 0.0 {
        return Err(Error::ScoreOutOfRange(init));
    }
    Ok(100.0 * (best / init - 1.0))
}

/// DSG improvement in percentage points: `best - init`, both in `[0, 100]`.
pub fn relative_improvement_dsg(init: f64, best: f64) -> Result<f64> {
    for v in [init, best] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::PercentOutOfRange(v));
        }
    }
    Ok(best - init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(seed: u64) -> ImageRef {
        ImageRef {
            backend_id: "test".into(),
            prompt_digest: "d".into(),
            seed,
            payload: String::new(),
        }
    }

    fn report(global: f64) -> ConsistencyReport {
        ConsistencyReport::new(
            vec![ElementScore {
                label: "x".into(),
                subscore: global,
                kind: ElementKind::NounPhrase,
            }],
            image(0),
        )
        .unwrap()
    }

    #[test]
    fn mean_consistency_examples() {
        let r: Vec<_> = [0.5, 0.7, 0.9, 0.9].into_iter().map(report).collect();
        assert!((mean_consistency(&r).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(mean_consistency(&[report(0.42)]).unwrap(), 0.42);
        assert!(matches!(mean_consistency(&[]), Err(Error::NoReports)));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_score(0.0).unwrap(), 0);
        assert_eq!(normalize_score(1.0).unwrap(), 100);
        assert_eq!(normalize_score(0.874).unwrap(), 87);
        assert_eq!(normalize_score(0.875).unwrap(), 88);
        assert_eq!(normalize_score(0.285).unwrap(), 29);
        assert_eq!(normalize_score(2.0 / 3.0).unwrap(), 67);
        assert!(normalize_score(1.01).is_err());
        assert!(normalize_score(-0.01).is_err());
        assert!(normalize_score(f64::NAN).is_err());
    }

    #[test]
    fn normalize_is_monotone_and_surjective_on_grid() {
        let mut seen = [false; 101];
        let mut prev = 0u8;
        for k in 0..=10_000u32 {
            let n = normalize_score(f64::from(k) * 1e-4).unwrap();
            assert!(n >= prev);
            prev = n;
            seen[n as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn relative_improvement_examples() {
        assert!((relative_improvement_dcs(0.20, 0.22).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(relative_improvement_dcs(0.30, 0.30).unwrap(), 0.0);
        assert!(matches!(
            relative_improvement_dcs(0.0, 0.5),
            Err(Error::UndefinedRelativeImprovement)
        ));
        assert!((relative_improvement_dsg(86.54, 100.0).unwrap() - 13.46).abs() < 1e-9);
        assert_eq!(relative_improvement_dsg(50.0, 50.0).unwrap(), 0.0);
        assert_eq!(relative_improvement_dsg(0.0, 100.0).unwrap(), 100.0);
        assert!(relative_improvement_dsg(-1.0, 10.0).is_err());
    }

    #[test]
    fn report_rejects_bad_subscores() {
        let bad = ElementScore {
            label: "x".into(),
            subscore: 1.5,
            kind: ElementKind::Question,
        };
        assert!(ConsistencyReport::new(vec![bad], image(0)).is_err());
        assert!(ConsistencyReport::new(vec![], image(0)).is_err());
    }

    #[test]
    fn report_deserialization_checks_global() {
        let r = report(0.4);
        let mut json: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(serde_json::from_value::<ConsistencyReport>(json.clone()).unwrap(), r);
        json["global"] = serde_json::json!(0.9);
        assert!(serde_json::from_value::<ConsistencyReport>(json).is_err());
    }

    #[test]
    fn variant_combinations() {
        assert_eq!(
            MetaPromptVariant::from_names(&["conciseness", "prioritize"]).unwrap(),
            MetaPromptVariant::default()
        );
        assert!(MetaPromptVariant::from_names(&["prioritize"]).is_err());
        assert!(MetaPromptVariant::from_names(&["conciseness", "reasoning"]).is_err());
        assert!(MetaPromptVariant::from_names(&["conciseness", "bogus"]).is_err());
    }

    #[test]
    fn config_lists_every_violation() {
        let cfg = OptimizationConfig {
            max_iterations: 0,
            images_per_prompt: 2,
            target_score: 0.0,
            ..OptimizationConfig::default()
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v[0].contains("max_iterations"));
        assert!(OptimizationConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn mean_lies_between_min_and_max(globals in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let reports: Vec<_> = globals.iter().copied().map(report).collect();
            let m = mean_consistency(&reports).unwrap();
            let lo = globals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = globals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }

        #[test]
        fn dsg_improvement_is_antisymmetric(a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
            let ab = relative_improvement_dsg(a, b).unwrap();
            let ba = relative_improvement_dsg(b, a).unwrap();
            prop_assert_eq!(ab, -ba);
        }
    }
}
