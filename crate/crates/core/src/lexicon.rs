//! Word lists backed by character tries.
//!
//! A [`Lexicon`] keeps a forward trie for words starting at a position and a
//! reversed trie for words ending at one, so both longest-match queries take
//! at most `max_len` steps regardless of lexicon size.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read word list {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("word list {path} is not valid UTF-8 at byte {offset}")]
    Encoding { path: String, offset: usize },
}

#[derive(Debug, Clone, Default)]
struct Node {
    // sorted by char
    children: Vec<(char, u32)>,
    terminal: bool,
}

#[derive(Debug, Clone)]
struct Trie {
    nodes: Vec<Node>,
}

impl Default for Trie {
    fn default() -> Self {
        Self {
            nodes: vec![Node::default()],
        }
    }
}

impl Trie {
    fn child(&self, node: u32, c: char) -> Option<u32> {
        let children = &self.nodes[node as usize].children;
        children
            .binary_search_by_key(&c, |&(k, _)| k)
            .ok()
            .map(|idx| children[idx].1)
    }

    /// Returns true if the word was not present before.
    fn insert<I: Iterator<Item = char>>(&mut self, chars: I) -> bool {
        let mut node = 0u32;
        for c in chars {
            let children = &self.nodes[node as usize].children;
            node = match children.binary_search_by_key(&c, |&(k, _)| k) {
                Ok(idx) => children[idx].1,
                Err(idx) => {
                    let next = self.nodes.len() as u32;
                    self.nodes.push(Node::default());
                    self.nodes[node as usize].children.insert(idx, (c, next));
                    next
                }
            };
        }
        let terminal = &mut self.nodes[node as usize].terminal;
        !std::mem::replace(terminal, true)
    }

    /// Calls `hit(len)` for each terminal reached while walking `chars`.
    fn walk<I: Iterator<Item = char>>(&self, chars: I, mut hit: impl FnMut(usize)) {
        let mut node = 0u32;
        for (depth, c) in chars.enumerate() {
            match self.child(node, c) {
                Some(next) => node = next,
                None => return,
            }
            if self.nodes[node as usize].terminal {
                hit(depth + 1);
            }
        }
    }

    fn collect(&self, node: u32, prefix: &mut String, out: &mut Vec<String>) {
        let n = &self.nodes[node as usize];
        if n.terminal {
            out.push(prefix.clone());
        }
        for &(c, child) in &n.children {
            prefix.push(c);
            self.collect(child, prefix, out);
            prefix.pop();
        }
    }
}

/// A set of words with longest-match queries over character sequences.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    forward: Trie,
    backward: Trie,
    size: usize,
    max_len: usize,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `word`; empty strings are ignored. Returns true if it was new.
    pub fn insert(&mut self, word: &str) -> bool {
        if word.is_empty() {
            return false;
        }
        if !self.forward.insert(word.chars()) {
            return false;
        }
        self.backward.insert(word.chars().rev());
        self.size += 1;
        self.max_len = self.max_len.max(word.chars().count());
        true
    }

    pub fn contains(&self, word: &str) -> bool {
        if word.is_empty() {
            return false;
        }
        let target = word.chars().count();
        let mut found = false;
        self.forward.walk(word.chars(), |len| found |= len == target);
        found
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Length in characters of the longest word.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// All words in code-point order.
    pub fn words(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.size);
        self.forward.collect(0, &mut String::new(), &mut out);
        out
    }

    pub fn extend<'a, I: IntoIterator<Item = &'a str>>(&mut self, words: I) {
        for w in words {
            self.insert(w);
        }
    }
}

impl<'a> FromIterator<&'a str> for Lexicon {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        let mut lex = Lexicon::new();
        lex.extend(iter);
        lex
    }
}

/// Longest-match queries shared by a single lexicon and a stack of them.
pub trait WordMatcher {
    /// Calls `hit(len)` for every word starting at `i`.
    fn matches_from(&self, chars: &[char], i: usize, hit: &mut dyn FnMut(usize));

    /// Calls `hit(len)` for every word ending at `i` (inclusive).
    fn matches_to(&self, chars: &[char], i: usize, hit: &mut dyn FnMut(usize));

    /// Length of the longest word starting at `i`; 0 if none.
    fn longest_match_begin(&self, chars: &[char], i: usize) -> usize {
        let mut best = 0;
        self.matches_from(chars, i, &mut |len| best = best.max(len));
        best
    }

    /// Length of the longest word ending at `i` (inclusive); 0 if none.
    fn longest_match_end(&self, chars: &[char], i: usize) -> usize {
        let mut best = 0;
        self.matches_to(chars, i, &mut |len| best = best.max(len));
        best
    }
}

impl WordMatcher for Lexicon {
    fn matches_from(&self, chars: &[char], i: usize, hit: &mut dyn FnMut(usize)) {
        if i < chars.len() {
            self.forward.walk(chars[i..].iter().copied(), hit);
        }
    }

    fn matches_to(&self, chars: &[char], i: usize, hit: &mut dyn FnMut(usize)) {
        if i < chars.len() {
            self.backward.walk(chars[..=i].iter().rev().copied(), hit);
        }
    }
}

impl WordMatcher for [&Lexicon] {
    fn matches_from(&self, chars: &[char], i: usize, hit: &mut dyn FnMut(usize)) {
        for lex in self {
            lex.matches_from(chars, i, hit);
        }
    }

    fn matches_to(&self, chars: &[char], i: usize, hit: &mut dyn FnMut(usize)) {
        for lex in self {
            lex.matches_to(chars, i, hit);
        }
    }
}

/// Parses a word list: one word per line, surrounding whitespace stripped,
/// blank lines skipped. `name` is only used in error messages.
pub fn parse_wordlist(bytes: &[u8], name: &str) -> Result<Lexicon, LexiconError> {
    let text = std::str::from_utf8(bytes).map_err(|e| LexiconError::Encoding {
        path: name.to_string(),
        offset: e.valid_up_to(),
    })?;
    Ok(text.lines().map(str::trim).collect())
}

pub fn load_wordlist(path: impl AsRef<Path>) -> Result<Lexicon, LexiconError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| LexiconError::Io {
        path: name.clone(),
        source,
    })?;
    parse_wordlist(&bytes, &name)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceCount {
    pub name: String,
    pub words: usize,
}

/// Word counts of a merge: each source's own size and the union size.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LexiconStats {
    pub sources: Vec<SourceCount>,
    pub total: usize,
}

impl LexiconStats {
    /// Sum of per-source sizes before deduplication.
    pub fn raw_total(&self) -> usize {
        self.sources.iter().map(|s| s.words).sum()
    }
}

/// Unions named lexicons.
pub fn merge(sources: &[(&str, &Lexicon)]) -> (Lexicon, LexiconStats) {
    let mut merged = Lexicon::new();
    let mut stats = LexiconStats::default();
    for &(name, lex) in sources {
        for word in lex.words() {
            merged.insert(&word);
        }
        stats.sources.push(SourceCount {
            name: name.to_string(),
            words: lex.len(),
        });
    }
    stats.total = merged.len();
    (merged, stats)
}
