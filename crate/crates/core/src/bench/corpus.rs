use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer::byte_tokenize;

const WORDS: &[&str] = &[
    "the", "phone", "battery", "meeting", "tomorrow", "please", "reply", "summary", "photo", "gallery", "health",
    "steps", "energy", "report", "email", "draft", "polite", "quick", "note", "calendar", "weather", "music",
    "call", "later", "thanks", "fix", "grammar", "style", "message", "today", "schedule", "remind", "me", "about",
    "lunch", "with", "team", "and", "send", "it",
];

/// `n` short pseudo-sentences, byte-tokenized, at most `max_len` tokens.
pub fn toy_corpus(n: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words = rng.gen_range(3..9);
            let text: Vec<&str> = (0..words).map(|_| *WORDS.choose(&mut rng).expect("nonempty")).collect();
            let mut ids = byte_tokenize(text.join(" ").as_bytes());
            ids.truncate(max_len.max(1));
            ids
        })
        .collect()
}

/// Prompts from a text file, one per nonempty line.
pub fn corpus_from_text(text: &str, max_len: usize) -> Vec<Vec<u32>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut ids = byte_tokenize(l.as_bytes());
            ids.truncate(max_len.max(1));
            ids
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = toy_corpus(20, 16, 3);
        assert_eq!(a, toy_corpus(20, 16, 3));
        assert!(a.iter().all(|p| !p.is_empty() && p.len() <= 16 && p.iter().all(|&t| t < 256)));
        assert_eq!(corpus_from_text("a b\n\n  c\n", 8), vec![vec![97, 32, 98], vec![99]]);
    }
}
