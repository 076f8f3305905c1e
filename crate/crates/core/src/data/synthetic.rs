//! Seeded toy data.
//!
//! The marker task: a preferred response contains the marker symbol and a
//! rejected one does not. A reward model separates the two from a single
//! token, which is enough signal for PPO to move a tiny actor.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Record, SymbolTokenizer};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerTask {
    pub alphabet: String,
    pub marker: char,
    pub prompt_len: (usize, usize),
    pub response_len: (usize, usize),
}

impl Default for MarkerTask {
    fn default() -> Self {
        MarkerTask {
            alphabet: "abcdefghijk".into(),
            marker: '!',
            prompt_len: (2, 4),
            response_len: (3, 6),
        }
    }
}

impl MarkerTask {
    /// Alphabet plus marker; 16 ids with the defaults.
    pub fn tokenizer(&self) -> SymbolTokenizer {
        SymbolTokenizer::new(&format!("{}{}", self.alphabet, self.marker)).expect("distinct symbols")
    }

    fn word<R: Rng>(&self, rng: &mut R, (lo, hi): (usize, usize)) -> String {
        let chars: Vec<char> = self.alphabet.chars().collect();
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| *chars.choose(rng).expect("non-empty alphabet")).collect()
    }

    pub fn records(&self, n: usize, seed: u64) -> Vec<Record> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let prompt = self.word(&mut rng, self.prompt_len);
                let mut chosen: Vec<char> = self.word(&mut rng, self.response_len).chars().collect();
                let at = rng.random_range(0..=chosen.len());
                chosen.insert(at, self.marker);
                let rejected = self.word(&mut rng, self.response_len);
                Record::pair(prompt, chosen.into_iter().collect::<String>(), rejected)
            })
            .collect()
    }

    pub fn has_marker(&self, text: &str) -> bool {
        text.contains(self.marker)
    }
}

/// Short English-like prompt/response pairs over bytes, for end-to-end runs
/// with the byte tokenizer.
pub fn chat_records(n: usize, seed: u64) -> Result<Vec<Record>> {
    const SUBJECTS: &[&str] = &["the cat", "a robot", "my friend", "the river", "our team"];
    const VERBS: &[&str] = &["likes", "sees", "builds", "finds", "moves"];
    const OBJECTS: &[&str] = &["red boxes", "small stones", "old maps", "bright lights"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |xs: &[&'static str]| *xs.choose(&mut rng).expect("non-empty");
    Ok((0..n)
        .map(|_| {
            let (s, v, o) = (pick(SUBJECTS), pick(VERBS), pick(OBJECTS));
            Record::pair(
                format!("Human: what does {s} do? Assistant:"),
                format!(" {s} {v} {o}."),
                format!(" {o} {o} {o}"),
            )
        })
        .collect())
}
