//! Fixed template fragments. Spelling (including "paraphase" and
//! "understable") is kept exactly as the reference templates have it.

pub const DECOMPOSE_SYSTEM: &str = "Decompose the following sentence into individual noun phrases. \
Ignore prefixes such as 'a photo of', 'a picture of', 'a portrait of', etc. Your response should \
only be a list of comma separated values, eg: 'foo, bar, baz'";

pub const OPTIMIZER_SYSTEM: &str = "You are an expert prompt optimizer for text-to-image models. \
Text-to-image models take a text prompt as input and generate images depicting the prompt as \
output. You translate prompts written by humans into better prompts for the text-to-image models. \
Your answers should be concise and effective.";

pub const OPTIMIZE_DCS_INTRO: &str = "Below are some previous prompts with a decomposition of \
their visual elements. Each element is paired with a score indicating its presence in the \
generated image. The prompts are arranged in ascending order based on their scores, which range \
from 0 to 100. Higher scores indicate higher likelihood of presence.";

pub const OPTIMIZE_DSG_INTRO: &str = "Below are some previous prompts with the consistency of \
each prompt's visual elements in the generated image via a set of binary questions. The prompts \
are arranged in ascending order based on their overall consistency score, which ranges from 0 to \
100 (higher is better).";

/// Follows "Generate {n} ".
pub const PARAPHRASE_GOAL: &str = "paraphrases of the initial prompt which keep the semantic \
meaning and that have higher scores than all the prompts above.";

pub const PRIORITIZE: &str = "Prioritize optimizing for object with lowest scores.";
pub const PRIORITIZE_KEEP: &str = "Prioritize optimizing for objects with lowest scores while \
keeping high scores for the other objects.";
pub const PRIORITIZE_KEEP_UPPER: &str = "PRIORITIZE optimizing for objects with lowest scores \
while keeping high scores for the other objects.";
pub const FAVOR: &str = "Favor substitutions and reorderings over additions.";
pub const FAVOR_UPPER: &str = "FAVOR substitutions and reorderings over additions.";
pub const REASONING: &str = "Briefly reason (max two sentences) about the prompts above to \
understand why certain objects have higher or lower scores in certain prompts. Then, based on \
this reasoning,";
pub const STRUCTURE: &str = "USE simple words/concepts, understable from a text-to-image model, \
e.g., distinguish foreground and background.";
pub const DSG_FOCUS: &str = "Focus on optimizing for the visual elements that are not \
consistent. Favor substitutions and reorderings over additions.";

pub const RESPOND_WITH_TAGS: &str =
    "Respond with each new prompt in between <PROMPT> and </PROMPT>, eg:\n\n";
