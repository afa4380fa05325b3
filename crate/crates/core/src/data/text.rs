//! Seeded pseudo-English filler. Sentences follow a handful of fixed
//! templates over small word lists, so the text has learnable local
//! structure without carrying any retrievable facts.

use rand::seq::SliceRandom;
use rand::Rng;

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "one", "no"];
const ADJECTIVES: &[&str] = &[
    "quiet", "green", "old", "small", "bright", "heavy", "calm", "distant", "warm", "narrow",
    "plain", "early", "late", "round", "silver", "soft", "broad", "pale", "sharp", "empty",
];
const NOUNS: &[&str] = &[
    "river", "garden", "window", "teacher", "harbor", "village", "market", "lamp", "road",
    "letter", "forest", "kitchen", "bridge", "farmer", "engine", "station", "cloud", "field",
    "painter", "library", "island", "mountain", "table", "clock", "boat", "valley", "tower",
    "student", "song", "winter",
];
const VERBS: &[&str] = &[
    "watches",
    "crosses",
    "follows",
    "finds",
    "carries",
    "opens",
    "reaches",
    "paints",
    "hears",
    "builds",
    "leaves",
    "passes",
    "keeps",
    "meets",
    "remembers",
    "covers",
    "turns",
    "holds",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "under", "over", "beside", "past", "toward", "across",
];
const ADVERBS: &[&str] = &[
    "slowly", "often", "again", "quietly", "today", "once", "still", "soon",
];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, list: &[&'a str]) -> &'a str {
    list.choose(rng).expect("word lists are non-empty")
}

fn noun_phrase<R: Rng + ?Sized>(rng: &mut R, out: &mut Vec<&'static str>) {
    out.push(pick(rng, DETERMINERS));
    if rng.gen_bool(0.5) {
        out.push(pick(rng, ADJECTIVES));
    }
    out.push(pick(rng, NOUNS));
}

/// One sentence, capitalized and terminated with a period.
pub fn filler_sentence<R: Rng + ?Sized>(rng: &mut R) -> String {
    let mut words: Vec<&'static str> = Vec::with_capacity(12);
    noun_phrase(rng, &mut words);
    words.push(pick(rng, VERBS));
    noun_phrase(rng, &mut words);
    match rng.gen_range(0..3) {
        0 => {
            words.push(pick(rng, PREPOSITIONS));
            noun_phrase(rng, &mut words);
        }
        1 => words.push(pick(rng, ADVERBS)),
        _ => {}
    }
    let mut s = words.join(" ");
    s[..1].make_ascii_uppercase();
    s.push('.');
    s
}

/// Whole sentences separated by spaces, stopping once at least
/// `approx_bytes` bytes are produced.
pub fn filler_text<R: Rng + ?Sized>(rng: &mut R, approx_bytes: usize) -> String {
    let mut out = String::with_capacity(approx_bytes + 64);
    while out.len() < approx_bytes {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&filler_sentence(rng));
    }
    out
}

/// Sentences whose combined length (with separating spaces) does not exceed
/// `max_bytes`.
pub fn filler_sentences<R: Rng + ?Sized>(rng: &mut R, max_bytes: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut used = 0usize;
    loop {
        let s = filler_sentence(rng);
        let cost = s.len() + usize::from(!out.is_empty());
        if used + cost > max_bytes {
            return out;
        }
        used += cost;
        out.push(s);
    }
}
