//! Meta-prompt rendering and LLM response parsing.
//!
//! Template text lives in [`templates`] and is checked byte-for-byte against
//! the files under `golden/`.

mod parse;
pub mod templates;

use serde::{Deserialize, Serialize};

pub use parse::{parse_noun_phrases, parse_revised_prompts};

use crate::error::{Error, Result};
use crate::history::PromptHistory;
use crate::model::{normalize_score, MetaPromptVariant, Objective, PromptCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetaPromptKind {
    Decompose,
    Paraphrase,
    OptimizeDcs(MetaPromptVariant),
    OptimizeDsg,
}

impl MetaPromptKind {
    /// Optimization kind for an objective; the variant only affects dCS.
    pub fn optimize(objective: Objective, variant: MetaPromptVariant) -> Self {
        match objective {
            Objective::Dcs => MetaPromptKind::OptimizeDcs(variant),
            Objective::Dsg => MetaPromptKind::OptimizeDsg,
        }
    }
}

/// A meta-prompt ready to send: optional system segment plus user body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedMetaPrompt {
    pub system: Option<String>,
    pub user: String,
}

fn require_text(s: &str, what: &str) -> Result<()> {
    if s.trim().is_empty() {
        Err(Error::InvalidInput(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

fn require_solutions(n: u32) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidInput("num_solutions must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// The enumerated response example closing every generation template.
fn example_listing(n: u32, first_close: &str) -> String {
    let first = format!("1. <PROMPT>paraphrase 1{first_close}");
    let second = "2. <PROMPT>paraphase 2</PROMPT>";
    match n {
        1 => first,
        2 => format!("{first}\n{second}"),
        3 => format!("{first}\n{second}\n3. <PROMPT>paraphrase 3</PROMPT>"),
        _ => format!("{first}\n{second}\n...\n{n}. <PROMPT>paraphrase {n}</PROMPT>"),
    }
}

pub fn build_decompose(prompt: &str) -> Result<RenderedMetaPrompt> {
    require_text(prompt, "prompt")?;
    Ok(RenderedMetaPrompt {
        system: Some(templates::DECOMPOSE_SYSTEM.to_string()),
        user: prompt.to_string(),
    })
}

pub fn build_paraphrase(user_prompt: &str, num_solutions: u32) -> Result<RenderedMetaPrompt> {
    require_text(user_prompt, "user prompt")?;
    require_solutions(num_solutions)?;
    let user = format!(
        "Generate {num_solutions} paraphrases of the following image description while keeping \
         the semantic meaning: \"{user_prompt}\". {}{}",
        templates::RESPOND_WITH_TAGS,
        example_listing(num_solutions, "</PROMPT>")
    );
    Ok(RenderedMetaPrompt { system: None, user })
}

fn render_block(out: &mut String, index: usize, c: &PromptCandidate, score_label: &str, elements_label: &str) -> Result<()> {
    out.push_str(&format!(
        "{index}. {}\n{score_label}: {}\n{elements_label}:",
        c.text(),
        normalize_score(c.mean_score())?
    ));
    for (label, score) in c.element_means() {
        out.push_str(&format!("\n{label} {}", normalize_score(score)?));
    }
    Ok(())
}

/// Renders an optimization meta-prompt over the history entries, lowest
/// score first, numbered from 1.
pub fn build_optimize(
    kind: MetaPromptKind,
    user_prompt: &str,
    history: &PromptHistory,
    num_solutions: u32,
) -> Result<RenderedMetaPrompt> {
    require_text(user_prompt, "user prompt")?;
    require_solutions(num_solutions)?;
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let (intro, score_label, elements_label, instruction, first_close) = match kind {
        MetaPromptKind::OptimizeDcs(variant) => {
            variant.validate()?;
            (
                templates::OPTIMIZE_DCS_INTRO,
                "score",
                "visual elements",
                dcs_instruction(variant, num_solutions),
                "</PROMPT>",
            )
        }
        MetaPromptKind::OptimizeDsg => (
            templates::OPTIMIZE_DSG_INTRO,
            "overall score",
            "evaluation questions",
            format!(
                "Generate {num_solutions} {} {}",
                templates::PARAPHRASE_GOAL,
                templates::DSG_FOCUS
            ),
            // The published DSG template drops the '>' on the first example line.
            "</PROMPT",
        ),
        MetaPromptKind::Decompose | MetaPromptKind::Paraphrase => {
            return Err(Error::InvalidInput(format!(
                "{kind:?} is not an optimization meta-prompt"
            )))
        }
    };

    let mut user = format!(
        "Your task is to optimize this initial prompt written by a human: \"{user_prompt}\". {intro}\n\n"
    );
    for (i, c) in history.entries().iter().enumerate() {
        if i > 0 {
            user.push_str("\n\n");
        }
        render_block(&mut user, i + 1, c, score_label, elements_label)?;
    }
    user.push_str("\n\n");
    user.push_str(&instruction);
    user.push(' ');
    user.push_str(templates::RESPOND_WITH_TAGS);
    user.push_str(&example_listing(num_solutions, first_close));
    Ok(RenderedMetaPrompt {
        system: Some(templates::OPTIMIZER_SYSTEM.to_string()),
        user,
    })
}

fn dcs_instruction(v: MetaPromptVariant, n: u32) -> String {
    let goal = templates::PARAPHRASE_GOAL;
    if v == MetaPromptVariant::CONCISE {
        format!("Generate {n} {goal} {}", templates::FAVOR)
    } else if v == MetaPromptVariant::CONCISE_PRIORITIZE_REASONING {
        format!(
            "{} generate {n} {goal} {} {}",
            templates::REASONING,
            templates::PRIORITIZE_KEEP,
            templates::FAVOR
        )
    } else if v == MetaPromptVariant::CONCISE_PRIORITIZE_STRUCTURE {
        format!(
            "Generate {n} {goal} {} {} {}",
            templates::PRIORITIZE_KEEP_UPPER,
            templates::FAVOR_UPPER,
            templates::STRUCTURE
        )
    } else {
        format!("Generate {n} {goal} {} {}", templates::PRIORITIZE, templates::FAVOR)
    }
}
