//! The simulated LLM. It recognizes each meta-prompt by its text, recovers
//! the user prompt, the history blocks and the number of requested prompts,
//! and answers in the format the template asks for.
//!
//! - decomposition: fixture phrases, else matched element names.
//! - paraphrasing: seeded reorderings of the user prompt's elements.
//! - optimization: take the best (last) history prompt, move its lowest
//!   scored element to the front and give it one more descriptor.
//!
//! Responses are a pure function of the request. Above temperature 0 the
//! request's sampling seed takes part, so an unchanged meta-prompt sent with
//! a new seed yields new proposals. The first item of a listing is the
//! model's mode: it varies little across seeds, and only the items after it
//! explore. Asking for one prompt per call therefore tends to repeat earlier
//! answers, while one response enumerating many prompts stays diverse.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;

use super::{Mention, SimWorld};
use crate::backends::{BackendResult, GenerationParams};
use crate::digest::{SeedHasher, SplitMix64};
use crate::error::BackendError;
use crate::metaprompt::templates;
use crate::scoring::GRAPH_SYSTEM;

const JOINERS: [&str; 6] = [", ", " and ", " with ", " next to ", " beside ", " near "];
const PREFIXES: [&str; 4] = ["", "an image of ", "a scene with ", "a photo of "];
const ATTEMPTS_PER_PROMPT: usize = 64;
/// Number of descriptor choices the first listed proposal picks from.
const MODE_WIDTH: usize = 2;

static PARAPHRASE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?s)^Generate (\d+) paraphrases of the following image description while keeping the semantic meaning: "(.*)"\. Respond with each new prompt in between"#,
    )
    .unwrap()
});
static OPTIMIZE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?s)^Your task is to optimize this initial prompt written by a human: "(.*)"\. Below are some previous prompts"#)
        .unwrap()
});
static COUNT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+) paraphrases of the initial prompt").unwrap());
static BLOCK_HEAD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+\. (.*)$").unwrap());

fn unsupported(what: impl Into<String>) -> BackendError {
    BackendError::Unsupported(what.into())
}

pub(super) fn respond(
    world: &SimWorld,
    system: Option<&str>,
    user: &str,
    params: &GenerationParams,
) -> BackendResult<String> {
    let mode_seed = SeedHasher::new()
        .u64(world.spec.seed)
        .part(system.unwrap_or(""))
        .part(user)
        .u64(params.temperature.to_bits());
    let mut rng_seed = mode_seed.clone();
    if params.temperature > 0.0 {
        if let Some(s) = params.seed {
            rng_seed = rng_seed.part("sample").u64(s);
        }
    }
    match system {
        Some(s) if s == templates::DECOMPOSE_SYSTEM => {
            return world
                .decompose(user)
                .map(|p| p.join(", "))
                .ok_or_else(|| unsupported(format!("no lexicon element in {user:?}")));
        }
        Some(s) if s == GRAPH_SYSTEM => return graph_lines(world, user),
        _ => {}
    }
    if let Some(c) = PARAPHRASE.captures(user) {
        let n: usize = c[1].parse().map_err(|_| unsupported("bad count"))?;
        return paraphrase(world, &c[2], n, rng_seed);
    }
    if let Some(c) = OPTIMIZE.captures(user) {
        return optimize(world, &c[1], user, &mode_seed, &rng_seed);
    }
    let head: String = user.chars().take(60).collect();
    Err(unsupported(head))
}

fn graph_lines(world: &SimWorld, prompt: &str) -> BackendResult<String> {
    let (graph, _) = world
        .graph_for(prompt)
        .map_err(|e| unsupported(e.to_string()))?;
    Ok(graph
        .questions()
        .iter()
        .map(|q| {
            let parents: Vec<String> = graph
                .dependencies()
                .iter()
                .filter(|(c, _)| *c == q.id)
                .map(|(_, p)| p.to_string())
                .collect();
            format!("{} | {} | {}", q.id, q.text, parents.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n"))
}

fn phrase(world: &SimWorld, m: &Mention, extra: Option<&str>) -> String {
    let mut words: Vec<&str> = extra.into_iter().collect();
    words.extend(m.descriptors.iter().map(String::as_str));
    words.push(world.element_name(m.element));
    words.join(" ")
}

fn compose(prefix: &str, phrases: &[String], rng: &mut SplitMix64) -> String {
    let mut out = prefix.to_string();
    for (i, p) in phrases.iter().enumerate() {
        if i > 0 {
            out.push_str(JOINERS[rng.below(JOINERS.len())]);
        }
        out.push_str(p);
    }
    out
}

fn listing(prompts: &[String]) -> String {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. <PROMPT>{p}</PROMPT>", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn paraphrase(world: &SimWorld, user_prompt: &str, n: usize, seed: SeedHasher) -> BackendResult<String> {
    let mentions = world.mentions(user_prompt);
    if mentions.is_empty() {
        return Err(unsupported(format!("no lexicon element in {user_prompt:?}")));
    }
    let mut seen: HashSet<String> = HashSet::from([user_prompt.trim().to_string()]);
    let mut out = Vec::with_capacity(n);
    for a in 0..n * ATTEMPTS_PER_PROMPT {
        if out.len() == n {
            break;
        }
        let mut rng = seed.clone().part("paraphrase").u64(a as u64).rng();
        let mut order: Vec<&Mention> = mentions.iter().collect();
        rng.shuffle(&mut order);
        let phrases: Vec<String> = order.iter().map(|m| phrase(world, m, None)).collect();
        let prefix = PREFIXES[rng.below(PREFIXES.len())];
        let text = compose(prefix, &phrases, &mut rng);
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    Ok(listing(&out))
}

struct Block {
    text: String,
    elements: Vec<(String, u32)>,
}

fn parse_blocks(user: &str) -> Vec<Block> {
    let mut blocks = Vec::new();
    for para in user.split("\n\n") {
        let mut lines = para.lines();
        let (Some(head), Some(score)) = (lines.next(), lines.next()) else {
            continue;
        };
        let Some(c) = BLOCK_HEAD.captures(head) else {
            continue;
        };
        if !(score.starts_with("score: ") || score.starts_with("overall score: ")) {
            continue;
        }
        lines.next();
        let elements = lines
            .filter_map(|l| {
                let (label, s) = l.rsplit_once(' ')?;
                Some((label.to_string(), s.parse().ok()?))
            })
            .collect();
        blocks.push(Block {
            text: c[1].to_string(),
            elements,
        });
    }
    blocks
}

fn optimize(
    world: &SimWorld,
    user_prompt: &str,
    user: &str,
    mode_seed: &SeedHasher,
    seed: &SeedHasher,
) -> BackendResult<String> {
    let n: usize = COUNT
        .captures(user)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| unsupported("no requested prompt count"))?;
    let blocks = parse_blocks(user);
    let best = blocks.last().ok_or_else(|| unsupported("no history blocks"))?;
    let mut lowest: Option<&(String, u32)> = None;
    for e in &best.elements {
        if lowest.is_none_or(|l| e.1 < l.1) {
            lowest = Some(e);
        }
    }
    let (label, _) = lowest.ok_or_else(|| unsupported("history block without elements"))?;
    let target = world.resolve(label)?;

    let mut mentions = world.mentions(&best.text);
    if !mentions.iter().any(|m| m.element == target) {
        mentions = world.mentions(user_prompt);
    }
    let pos = mentions
        .iter()
        .position(|m| m.element == target)
        .ok_or_else(|| unsupported(format!("{label:?} is not in the prompts")))?;
    let fronted = mentions.remove(pos);

    let used: HashSet<String> = super::tokens(&best.text).into_iter().collect();
    let mut unused: Vec<&str> = world
        .descriptors()
        .iter()
        .map(String::as_str)
        .filter(|d| !used.contains(&d.to_lowercase()))
        .collect();
    mode_seed.clone().part("descriptors").rng().shuffle(&mut unused);

    let mut seen: HashSet<String> = blocks.iter().map(|b| b.text.trim().to_string()).collect();
    let mut out = Vec::with_capacity(n);
    for a in 0..n * ATTEMPTS_PER_PROMPT {
        if out.len() == n {
            break;
        }
        let (mut rng, extra) = if a == 0 {
            let pick = seed.clone().part("mode").rng().below(MODE_WIDTH.min(unused.len()).max(1));
            (mode_seed.clone().part("optimize").rng(), unused.get(pick).copied())
        } else {
            let mut rng = seed.clone().part("optimize").u64(a as u64).rng();
            let pick = if a < unused.len() { a } else { rng.below(unused.len().max(1)) };
            (rng, unused.get(pick).copied())
        };
        let mut phrases = vec![phrase(world, &fronted, extra)];
        phrases.extend(mentions.iter().map(|m| phrase(world, m, None)));
        let prefix = if a < unused.len() {
            ""
        } else {
            PREFIXES[rng.below(PREFIXES.len())]
        };
        let text = compose(prefix, &phrases, &mut rng);
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    let mut reply = String::new();
    if user.contains("Briefly reason") {
        reply.push_str(&format!(
            "The element \"{label}\" scores lowest, so it goes first with more detail.\n"
        ));
    }
    reply.push_str(&listing(&out));
    Ok(reply)
}
