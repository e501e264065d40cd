//! Deterministic book-like prose for tests and demos.
//!
//! The generator strings together chapters of templated narrative with a
//! recurring cast, so the text has learnable regularities (names that recur,
//! agreement between subjects and pronouns, quoted dialogue) while staying
//! small enough to embed in the crate.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAST: &[(&str, &str)] = &[
    ("Margaret", "she"),
    ("Thomas", "he"),
    ("Eleanor", "she"),
    ("Captain Hale", "he"),
    ("the old miller", "he"),
    ("Mrs. Whitcombe", "she"),
    ("young Arthur", "he"),
    ("the doctor", "he"),
    ("Clara", "she"),
    ("the stranger", "he"),
];

const PLACES: &[&str] = &[
    "the harbour", "the mill", "the orchard", "the parlour", "the station",
    "the churchyard", "the river road", "the market square", "the library",
    "the kitchen", "the hill above the town", "the stables", "the garden",
];

const ADJECTIVES: &[&str] = &[
    "quiet", "cold", "bright", "narrow", "grey", "old", "warm", "silent",
    "crowded", "dark", "pale", "heavy", "long", "empty", "distant",
];

const OBJECTS: &[&str] = &[
    "letter", "lamp", "key", "basket", "coat", "map", "book", "candle",
    "bundle of papers", "ring", "rope", "clock", "bottle", "parcel",
];

const VERBS_PAST: &[&str] = &[
    "walked to", "hurried toward", "returned to", "looked across",
    "waited by", "wandered through", "came back from", "stood near",
];

const FEELINGS: &[&str] = &[
    "uneasy", "glad", "tired", "curious", "afraid", "hopeful", "restless",
    "certain", "troubled", "amused",
];

const WEATHER: &[&str] = &[
    "The rain had not stopped since morning.",
    "A thin fog lay over the water.",
    "The wind came down from the hills and rattled the shutters.",
    "It was the warmest evening of the summer.",
    "Snow had fallen in the night and covered the roads.",
    "The sun set early behind the church tower.",
];

const SAYINGS: &[&str] = &[
    "I did not expect to find you here",
    "We must leave before the morning train",
    "Nobody in the town will speak of it",
    "You should have told me about the letter",
    "It is later than you think",
    "There is nothing more to be done tonight",
    "I have seen that face before",
    "Keep the lamp burning until I return",
];

const NUMBERS: &[&str] = &["two", "three", "four", "five", "seven", "ten", "twelve"];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).copied().unwrap_or("")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let (who, pron) = *CAST.choose(rng).unwrap();
    let (other, _) = *CAST.choose(rng).unwrap();
    match rng.random_range(0..9) {
        0 => format!(
            "{} {} {} with the {} under {} arm.",
            capitalize(who),
            pick(rng, VERBS_PAST),
            pick(rng, PLACES),
            pick(rng, OBJECTS),
            if pron == "she" { "her" } else { "his" }
        ),
        1 => format!(
            "\"{},\" said {}, and {} turned toward {}.",
            pick(rng, SAYINGS),
            who,
            pron,
            other
        ),
        2 => pick(rng, WEATHER).to_string(),
        3 => format!(
            "{} felt {} when {} saw the {} {} on the table.",
            capitalize(who),
            pick(rng, FEELINGS),
            pron,
            pick(rng, ADJECTIVES),
            pick(rng, OBJECTS)
        ),
        4 => format!(
            "The {} {} was {} and the {} was {}.",
            pick(rng, ADJECTIVES),
            pick(rng, PLACES).trim_start_matches("the "),
            pick(rng, ADJECTIVES),
            pick(rng, OBJECTS),
            pick(rng, ["gone", "missing", "still there", "broken", "locked away"].as_slice())
        ),
        5 => format!(
            "For {} days {} did not speak of {} to anyone.",
            pick(rng, NUMBERS),
            who,
            other
        ),
        6 => format!(
            "{} asked {} whether the {} had been found at {}.",
            capitalize(other),
            who,
            pick(rng, OBJECTS),
            pick(rng, PLACES)
        ),
        7 => format!(
            "When the clock struck {}, {} {} {} once more.",
            pick(rng, NUMBERS),
            who,
            pick(rng, VERBS_PAST),
            pick(rng, PLACES)
        ),
        _ => format!(
            "It was a {} and {} night, and {} was {}.",
            pick(rng, ADJECTIVES),
            pick(rng, ADJECTIVES),
            who,
            pick(rng, FEELINGS)
        ),
    }
}

/// At least `min_chars` characters of generated prose, fully determined by `seed`.
pub fn book_text(seed: u64, min_chars: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_chars + 512);
    let mut chapter = 1;
    while out.len() < min_chars {
        out.push_str(&format!("CHAPTER {chapter}\n\n"));
        for _ in 0..rng.random_range(6..12) {
            let n = rng.random_range(3..7);
            let para: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
            out.push_str(&para.join(" "));
            out.push_str("\n\n");
        }
        chapter += 1;
    }
    out
}
