//! A small generated language for end-to-end checks.
//!
//! Words are random strings over a 30-symbol CJK alphabet, split into three
//! classes. Sentences concatenate words whose classes follow the fixed cycle
//! 0, 1, 2, 0, ...; only the word inside each class and the sentence length
//! are random.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{read_corpus, Corpus};
use crate::lexicon::Lexicon;

pub const ALPHABET_SIZE: usize = 30;
pub const LEXICON_SIZE: usize = 60;
const CLASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    alphabet: Vec<char>,
    words: Vec<String>,
}

fn alphabet() -> Vec<char> {
    (0..ALPHABET_SIZE as u32)
        .map(|k| char::from_u32(0x4E00 + 37 * k).expect("CJK block"))
        .collect()
}

fn word_length(rng: &mut ChaCha8Rng) -> usize {
    match rng.gen_range(0..20) {
        0..=1 => 1,
        2..=10 => 2,
        11..=16 => 3,
        _ => 4,
    }
}

impl SyntheticLanguage {
    pub fn new(seed: u64) -> Self {
        let mut lang = Self {
            alphabet: alphabet(),
            words: Vec::with_capacity(LEXICON_SIZE),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while lang.words.len() < LEXICON_SIZE {
            let word = lang.fresh_word(&mut rng, &[]);
            lang.words.push(word);
        }
        lang
    }

    /// A random word absent from this language and from `avoid`.
    fn fresh_word(&self, rng: &mut ChaCha8Rng, avoid: &[String]) -> String {
        loop {
            let len = word_length(rng);
            let word: String = (0..len)
                .map(|_| *self.alphabet.choose(rng).expect("non-empty alphabet"))
                .collect();
            if !self.words.contains(&word) && !avoid.contains(&word) {
                return word;
            }
        }
    }

    /// A related language keeping `shared` of the words (by position, so
    /// class membership is preserved) and replacing the rest.
    pub fn sibling(&self, shared: f64, seed: u64) -> Self {
        let keep = (LEXICON_SIZE as f64 * shared).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut replaced: Vec<usize> = (0..LEXICON_SIZE).collect();
        replaced.shuffle(&mut rng);
        replaced.truncate(LEXICON_SIZE - keep);
        replaced.sort_unstable();
        let mut lang = self.clone();
        for idx in replaced {
            lang.words[idx] = lang.fresh_word(&mut rng, &self.words);
        }
        lang
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn lexicon(&self) -> Lexicon {
        self.words.iter().map(String::as_str).collect()
    }

    fn class_words(&self, class: usize) -> impl Iterator<Item = &str> {
        self.words
            .iter()
            .enumerate()
            .filter(move |(i, _)| i % CLASSES == class)
            .map(|(_, w)| w.as_str())
    }

    /// One sentence as gold words.
    pub fn sentence(&self, rng: &mut ChaCha8Rng) -> Vec<&str> {
        let len = rng.gen_range(4..=10);
        (0..len)
            .map(|k| {
                let pool: Vec<&str> = self.class_words(k % CLASSES).collect();
                *pool.choose(rng).expect("non-empty class")
            })
            .collect()
    }

    /// `n` space-separated gold lines.
    pub fn lines(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sentence(&mut rng).join(" ")).collect()
    }

    pub fn corpus(&self, n: usize, seed: u64) -> Corpus {
        let text = self.lines(n, seed).join("\n");
        read_corpus(text.as_bytes(), false).expect("generated lines parse")
    }
}
