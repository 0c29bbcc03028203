use super::{default_descriptors, with_article, LexiconEntry, SimParams, SimPrompt, WorldSpec};
use crate::digest::SeedHasher;

const EASY: [&str; 40] = [
    "owl", "lantern", "violin", "teapot", "bicycle", "guitar", "umbrella", "candle", "clock",
    "kettle", "ladder", "mirror", "piano", "rabbit", "sailboat", "scarf", "suitcase", "telescope",
    "tractor", "trumpet", "vase", "wagon", "whale", "windmill", "zebra", "anchor", "backpack",
    "basket", "bench", "bucket", "cactus", "camel", "canoe", "carousel", "castle", "chair",
    "compass", "crown", "dolphin", "drum",
];

const HARD: [&str; 20] = [
    "hourglass", "kite", "jellyfish", "chandelier", "harp", "lighthouse", "pinwheel", "seahorse",
    "snowglobe", "typewriter", "unicycle", "xylophone", "metronome", "periscope", "sundial",
    "tambourine", "accordion", "abacus", "gramophone", "quill",
];

const JOINERS: [&str; 5] = [" with ", " next to ", " beside ", " near ", " and "];

pub const CATEGORIES: [&str; 4] = ["complex", "fine-grained detail", "quantity", "imagination"];

pub(super) fn generate(seed: u64, n: usize, params: SimParams) -> WorldSpec {
    let mut lexicon: Vec<LexiconEntry> = EASY
        .iter()
        .map(|e| LexiconEntry {
            name: e.to_string(),
            base: None,
        })
        .collect();
    for h in HARD {
        let mut rng = SeedHasher::new().u64(seed).part("hard").part(h).rng();
        lexicon.push(LexiconEntry {
            name: h.to_string(),
            base: Some(0.15 + 0.1 * rng.next_f64()),
        });
    }

    let mut prompts: Vec<SimPrompt> = Vec::with_capacity(n);
    let mut i = 0u64;
    while prompts.len() < n {
        let mut rng = SeedHasher::new().u64(seed).part("prompt").u64(i).rng();
        i += 1;
        let mut easy: Vec<&str> = EASY.to_vec();
        rng.shuffle(&mut easy);
        let count = 2 + rng.below(2);
        let mut elements: Vec<&str> = easy[..count].to_vec();
        elements.push(HARD[rng.below(HARD.len())]);
        let mut text = with_article(elements[0]);
        for e in &elements[1..] {
            text.push_str(JOINERS[rng.below(JOINERS.len())]);
            text.push_str(&with_article(e));
        }
        if prompts.iter().any(|p| p.text == text) {
            continue;
        }
        let k = prompts.len();
        prompts.push(SimPrompt {
            id: format!("syn-{k:03}"),
            text,
            category: Some(CATEGORIES[k % CATEGORIES.len()].to_string()),
            decomposition: None,
            questions: None,
            dependencies: Vec::new(),
        });
    }

    WorldSpec {
        seed,
        params,
        descriptors: default_descriptors(),
        lexicon,
        prompts,
    }
}
