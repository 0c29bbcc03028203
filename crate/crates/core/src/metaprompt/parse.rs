use crate::error::{Error, Result};

const OPEN: &str = "<PROMPT>";
const CLOSE: &str = "</PROMPT>";

/// Extracts every `<PROMPT>...</PROMPT>` span in order.
///
/// Each span runs from an opening tag to the first closing tag after it.
/// Contents are trimmed; empty spans and repeated texts are dropped. The
/// result may hold fewer prompts than `expected`, which is informational.
pub fn parse_revised_prompts(raw: &str, expected: usize) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(expected);
    let mut rest = raw;
    while let Some(start) = rest.find(OPEN) {
        let after = &rest[start + OPEN.len()..];
        let Some(end) = after.find(CLOSE) else { break };
        let text = after[..end].trim();
        if !text.is_empty() && !out.iter().any(|t| t == text) {
            out.push(text.to_string());
        }
        rest = &after[end + CLOSE.len()..];
    }
    if out.is_empty() {
        return Err(Error::NoPromptsParsed);
    }
    if out.len() < expected {
        log::debug!("parsed {} of {} expected prompts", out.len(), expected);
    }
    Ok(out)
}

/// Splits a decomposition reply into noun phrases.
///
/// Tolerates an echoed intro line ("Noun phrases: a, b"), one phrase per
/// line, and quoted or period-terminated items.
pub fn parse_noun_phrases(raw: &str) -> Result<Vec<String>> {
    let mut body = raw.trim();
    if let Some(colon) = body.find(':') {
        if !body[..colon].contains(',') {
            body = &body[colon + 1..];
        }
    }
    let phrases: Vec<String> = body
        .split([',', '\n'])
        .map(|p| {
            p.trim()
                .trim_end_matches('.')
                .trim_matches(|c: char| c == '\'' || c == '"' || c.is_whitespace())
                .to_string()
        })
        .filter(|p| !p.is_empty())
        .collect();
    if phrases.is_empty() {
        return Err(Error::NoPhrases);
    }
    Ok(phrases)
}
