//! Deterministic synthetic corpora for smoke runs and depth experiments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

const WORDS: &[&str] = &[
    "the", "a", "model", "reads", "text", "and", "learns", "to", "predict", "next", "token", "small", "river",
    "stone", "light", "over", "under", "quietly", "bright", "garden", "city", "walks", "sees", "old", "new",
    "because", "when", "then", "every", "morning", "cold", "warm", "tree", "house", "with", "without", "of",
    "in", "on", "is", "was", "will", "sleep", "dream", "number", "seven", "three", "blue", "green", "road",
];

/// Line kinds of the mixed corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    /// `#` then one letter repeated sixteen times.
    Repeat,
    /// `@`, eight random letters, `=`, the same letters reversed.
    Reverse,
}

pub fn line<R: Rng + ?Sized>(kind: LineKind, rng: &mut R) -> String {
    match kind {
        LineKind::Repeat => {
            let c = *LETTERS.choose(rng).unwrap() as char;
            format!("#{}\n", c.to_string().repeat(16))
        }
        LineKind::Reverse => {
            let w: String = (0..8).map(|_| *LETTERS.choose(rng).unwrap() as char).collect();
            format!("@{w}={}\n", w.chars().rev().collect::<String>())
        }
    }
}

/// About `bytes` bytes of lines of one kind.
pub fn lines_of(kind: LineKind, bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    while out.len() < bytes {
        out.push_str(&line(kind, &mut rng));
    }
    out
}

/// About `bytes` bytes mixing both kinds in runs of a few lines each.
pub fn mixed_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    while out.len() < bytes {
        let kind = if rng.random::<bool>() { LineKind::Repeat } else { LineKind::Reverse };
        for _ in 0..rng.random_range(2..6) {
            out.push_str(&line(kind, &mut rng));
        }
    }
    out
}

/// About `bytes` bytes of word-salad prose.
pub fn prose(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    while out.len() < bytes {
        let n = rng.random_range(4..12);
        let sentence: Vec<&str> = (0..n).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        let mut s = sentence.join(" ");
        s[..1].make_ascii_uppercase();
        out.push_str(&s);
        out.push_str(if rng.random_range(0..6) == 0 { ".\n" } else { ". " });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = line(LineKind::Reverse, &mut rng);
        let (a, b) = r[1..r.len() - 1].split_once('=').unwrap();
        assert_eq!(a.chars().rev().collect::<String>(), b);
        let p = line(LineKind::Repeat, &mut rng);
        assert_eq!(p.len(), 18);
        assert_eq!(mixed_corpus(5000, 3), mixed_corpus(5000, 3));
        assert!(prose(100_000, 1).len() >= 100_000);
    }
}
