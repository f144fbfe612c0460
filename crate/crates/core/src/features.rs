//! Per-character feature templates and the feature-string index.
//!
//! Every position emits character unigrams in a window of up to ±2,
//! three character bigrams, and lexicon features: the (capped) length of the
//! longest dictionary word starting and ending at the position, and an
//! "inside a word" flag when a multi-character match covers the position in
//! its interior. Out-of-range context positions map to sentinels named by
//! their distance past the boundary.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::NormalizationConfig;
use crate::lexicon::WordMatcher;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("min_support must be at least 1")]
    MinSupport,
    #[error("invalid template config: {0}")]
    Config(&'static str),
}

/// Which template families are active and their parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateConfig {
    pub unigrams: bool,
    /// Unigram window radius, 0..=2.
    pub unigram_window: u8,
    pub bigrams: bool,
    pub lexicon: bool,
    /// Cap on emitted lexicon match lengths.
    pub max_lex_len: u32,
    pub normalization: NormalizationConfig,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            unigrams: true,
            unigram_window: 2,
            bigrams: true,
            lexicon: true,
            max_lex_len: 6,
            normalization: NormalizationConfig::default(),
        }
    }
}

impl TemplateConfig {
    pub fn unigrams_only() -> Self {
        Self {
            bigrams: false,
            lexicon: false,
            ..Self::default()
        }
    }

    pub fn lexicon_only() -> Self {
        Self {
            unigrams: false,
            bigrams: false,
            lexicon: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.unigram_window > 2 {
            return Err(FeatureError::Config("unigram window must be within [-2, 2]"));
        }
        if self.max_lex_len < 1 {
            return Err(FeatureError::Config("lexicon length cap must be >= 1"));
        }
        Ok(())
    }
}

fn context(view: &[char], i: usize, offset: isize) -> String {
    let j = i as isize + offset;
    if j < 0 {
        format!("⟨BOS{}⟩", -j)
    } else if j as usize >= view.len() {
        format!("⟨EOS{}⟩", j as usize - view.len() + 1)
    } else {
        view[j as usize].to_string()
    }
}

/// Feature strings for every position of `chars`.
///
/// Character templates read the normalized view; lexicon templates match
/// the original characters.
pub fn feature_strings<M: WordMatcher + ?Sized>(
    chars: &[char],
    lexicon: &M,
    cfg: &TemplateConfig,
) -> Vec<Vec<String>> {
    let view = cfg.normalization.feature_view(chars);
    let n = view.len();
    let mut inside = vec![false; n];
    if cfg.lexicon {
        for start in 0..n {
            lexicon.matches_from(chars, start, &mut |len| {
                for flag in inside.iter_mut().take(start + len - 1).skip(start + 1) {
                    *flag = true;
                }
            });
        }
    }
    let w = if cfg.unigrams { cfg.unigram_window as isize } else { -1 };
    (0..n)
        .map(|i| {
            let mut feats = Vec::with_capacity(16);
            for k in -w..=w {
                let name = if k > 0 { format!("U+{k}") } else { format!("U{k}") };
                feats.push(format!("{name}={}", context(&view, i, k)));
            }
            if cfg.bigrams {
                let (prev, cur, next) = (context(&view, i, -1), context(&view, i, 0), context(&view, i, 1));
                feats.push(format!("Bl={prev}{cur}"));
                feats.push(format!("Br={cur}{next}"));
                feats.push(format!("Bs={prev}{next}"));
            }
            if cfg.lexicon {
                let cap = cfg.max_lex_len as usize;
                let begin = lexicon.longest_match_begin(chars, i);
                let end = lexicon.longest_match_end(chars, i);
                if begin > 0 {
                    feats.push(format!("Lb={}", begin.min(cap)));
                }
                if end > 0 {
                    feats.push(format!("Le={}", end.min(cap)));
                }
                if inside[i] {
                    feats.push("INW".to_string());
                }
            }
            feats
        })
        .collect()
}

/// Sorted, deduplicated feature IDs per position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureSeq {
    positions: Vec<Vec<u32>>,
}

impl FeatureSeq {
    pub fn new(mut positions: Vec<Vec<u32>>) -> Self {
        for ids in &mut positions {
            ids.sort_unstable();
            ids.dedup();
        }
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn at(&self, i: usize) -> &[u32] {
        &self.positions[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.positions.iter().map(Vec::as_slice)
    }

    pub fn max_id(&self) -> Option<u32> {
        self.positions.iter().flatten().copied().max()
    }
}

/// Dense IDs for feature strings, assigned in first-seen order.
#[derive(Debug, Clone, Default)]
pub struct FeatureIndex {
    ids: HashMap<String, u32>,
    strings: Vec<String>,
    counts: Vec<u64>,
    frozen: bool,
}

/// Support recorded for features whose training counts are unknown.
pub const INHERITED_SUPPORT: u64 = u64::MAX;

impl FeatureIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds an index from strings in ID order. Support counts are
    /// unknown, so every feature is treated as fully supported.
    pub fn from_strings(strings: Vec<String>) -> Self {
        let ids = strings
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let counts = vec![INHERITED_SUPPORT; strings.len()];
        Self {
            ids,
            strings,
            counts,
            frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn get(&self, feature: &str) -> Option<u32> {
        self.ids.get(feature).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.strings[id as usize]
    }

    pub fn strings(&self) -> &[String] {
        &self.strings
    }

    /// Training-time occurrence count of `id`.
    pub fn support(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    /// Looks up `feature`, adding it and counting the occurrence unless the
    /// index is frozen.
    pub fn intern(&mut self, feature: &str) -> Option<u32> {
        if self.frozen {
            return self.get(feature);
        }
        let id = match self.ids.get(feature) {
            Some(&id) => id,
            None => {
                let id = self.strings.len() as u32;
                self.ids.insert(feature.to_string(), id);
                self.strings.push(feature.to_string());
                self.counts.push(0);
                id
            }
        };
        let count = &mut self.counts[id as usize];
        *count = count.saturating_add(1);
        Some(id)
    }

    /// Drops features seen fewer than `min_support` times. Returns the new
    /// index (frozen) and a table mapping old IDs to new ones.
    pub fn prune(&self, min_support: u64) -> Result<(FeatureIndex, Vec<Option<u32>>), FeatureError> {
        if min_support < 1 {
            return Err(FeatureError::MinSupport);
        }
        let mut kept = FeatureIndex::new();
        let remap = self
            .strings
            .iter()
            .zip(&self.counts)
            .map(|(s, &count)| {
                (count >= min_support).then(|| {
                    let id = kept.strings.len() as u32;
                    kept.ids.insert(s.clone(), id);
                    kept.strings.push(s.clone());
                    kept.counts.push(count);
                    id
                })
            })
            .collect();
        kept.frozen = true;
        Ok((kept, remap))
    }
}

/// Extracts features, growing `index` unless it is frozen.
pub fn extract<M: WordMatcher + ?Sized>(
    chars: &[char],
    lexicon: &M,
    cfg: &TemplateConfig,
    index: &mut FeatureIndex,
) -> FeatureSeq {
    let positions = feature_strings(chars, lexicon, cfg)
        .iter()
        .map(|feats| feats.iter().filter_map(|f| index.intern(f)).collect())
        .collect();
    FeatureSeq::new(positions)
}

/// Extracts features against a read-only index; unknown strings are dropped.
pub fn extract_frozen<M: WordMatcher + ?Sized>(
    chars: &[char],
    lexicon: &M,
    cfg: &TemplateConfig,
    index: &FeatureIndex,
) -> FeatureSeq {
    let positions = feature_strings(chars, lexicon, cfg)
        .iter()
        .map(|feats| feats.iter().filter_map(|f| index.get(f)).collect())
        .collect();
    FeatureSeq::new(positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Lexicon;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn set(v: &[String]) -> BTreeSet<String> {
        v.iter().cloned().collect()
    }

    fn strs(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unigram_example() {
        let feats = feature_strings(&chars("ab"), &Lexicon::new(), &TemplateConfig::unigrams_only());
        assert_eq!(
            set(&feats[0]),
            strs(&["U-2=⟨BOS2⟩", "U-1=⟨BOS1⟩", "U0=a", "U+1=b", "U+2=⟨EOS1⟩"])
        );
        assert_eq!(
            set(&feats[1]),
            strs(&["U-2=⟨BOS1⟩", "U-1=a", "U0=b", "U+1=⟨EOS1⟩", "U+2=⟨EOS2⟩"])
        );
    }

    #[test]
    fn lexicon_example() {
        let lex: Lexicon = ["ab"].into_iter().collect();
        let feats = feature_strings(&chars("ab"), &lex, &TemplateConfig::lexicon_only());
        assert_eq!(set(&feats[0]), strs(&["Lb=2"]));
        assert_eq!(set(&feats[1]), strs(&["Le=2"]));
    }

    #[test]
    fn inside_word_flag_and_cap() {
        let lex: Lexicon = ["abcdefgh"].into_iter().collect();
        let cfg = TemplateConfig::lexicon_only();
        let feats = feature_strings(&chars("abcdefgh"), &lex, &cfg);
        assert!(feats[0].contains(&"Lb=6".to_string()));
        assert!(!feats[0].contains(&"INW".to_string()));
        assert!(feats[3].contains(&"INW".to_string()));
        assert!(!feats[7].contains(&"INW".to_string()));
        assert!(feats[7].contains(&"Le=6".to_string()));
    }

    #[test]
    fn normalization_changes_view_only() {
        let lex: Lexicon = ["Ａ1"].into_iter().collect();
        let cfg = TemplateConfig {
            normalization: NormalizationConfig::all(),
            ..TemplateConfig::default()
        };
        let feats = feature_strings(&chars("Ａ1"), &lex, &cfg);
        assert!(feats[0].contains(&format!("U0={}", crate::corpus::LATIN_CLASS)));
        assert!(feats[0].contains(&"Lb=2".to_string()));
    }

    #[test]
    fn frozen_index_never_grows() {
        let mut index = FeatureIndex::new();
        let cfg = TemplateConfig::default();
        let lex = Lexicon::new();
        let seq = extract(&chars("abc"), &lex, &cfg, &mut index);
        let count = index.len();
        assert!(seq.max_id().unwrap() < count as u32);
        index.freeze();
        let seq = extract(&chars("xyz"), &lex, &cfg, &mut index);
        assert_eq!(index.len(), count);
        assert!(seq.iter().all(|ids| ids.iter().all(|&id| (id as usize) < count)));
        let frozen = extract_frozen(&chars("abc"), &lex, &cfg, &index);
        assert_eq!(frozen, extract(&chars("abc"), &lex, &cfg, &mut index));
    }

    #[test]
    fn ids_are_first_seen_order() {
        let mut index = FeatureIndex::new();
        assert_eq!(index.intern("x"), Some(0));
        assert_eq!(index.intern("y"), Some(1));
        assert_eq!(index.intern("x"), Some(0));
        assert_eq!(index.support(0), 2);
        assert_eq!(index.name(1), "y");
    }

    #[test]
    fn prune_examples() {
        let mut index = FeatureIndex::new();
        for f in ["f1", "f1", "f1", "f1", "f1", "f2"] {
            index.intern(f);
        }
        let (same, remap) = index.prune(1).unwrap();
        assert_eq!(remap, vec![Some(0), Some(1)]);
        assert_eq!(same.strings(), index.strings());

        let (kept, remap) = index.prune(2).unwrap();
        assert_eq!(remap, vec![Some(0), None]);
        assert_eq!(kept.strings(), &["f1".to_string()]);
        assert_eq!(kept.get("f1"), Some(0));

        assert_eq!(index.prune(0).unwrap_err(), FeatureError::MinSupport);
    }

    #[test]
    fn inherited_features_survive_pruning() {
        let index = FeatureIndex::from_strings(vec!["a".into(), "b".into()]);
        let (kept, _) = index.prune(1000).unwrap();
        assert_eq!(kept.len(), 2);
    }

    /// Independent template table: direct indexing with explicit bounds
    /// checks and dictionary scans over the raw word list.
    fn naive_features(text: &[char], words: &[String], cap: usize) -> Vec<BTreeSet<String>> {
        let n = text.len() as isize;
        let tok = |j: isize| -> String {
            if j == -1 {
                "⟨BOS1⟩".into()
            } else if j == -2 {
                "⟨BOS2⟩".into()
            } else if j == n {
                "⟨EOS1⟩".into()
            } else if j == n + 1 {
                "⟨EOS2⟩".into()
            } else {
                text[j as usize].to_string()
            }
        };
        let words: Vec<Vec<char>> = words.iter().map(|w| w.chars().collect()).collect();
        (0..n)
            .map(|i| {
                let mut s = BTreeSet::new();
                s.insert(format!("U-2={}", tok(i - 2)));
                s.insert(format!("U-1={}", tok(i - 1)));
                s.insert(format!("U0={}", tok(i)));
                s.insert(format!("U+1={}", tok(i + 1)));
                s.insert(format!("U+2={}", tok(i + 2)));
                s.insert(format!("Bl={}{}", tok(i - 1), tok(i)));
                s.insert(format!("Br={}{}", tok(i), tok(i + 1)));
                s.insert(format!("Bs={}{}", tok(i - 1), tok(i + 1)));
                let iu = i as usize;
                let mut lb = 0;
                let mut le = 0;
                let mut inw = false;
                for w in &words {
                    let len = w.len();
                    if text[iu..].starts_with(w) {
                        lb = lb.max(len);
                    }
                    if text[..=iu].ends_with(w) {
                        le = le.max(len);
                    }
                    for start in 0..text.len() {
                        if text[start..].starts_with(w) && start < iu && iu + 1 < start + len {
                            inw = true;
                        }
                    }
                }
                if lb > 0 {
                    s.insert(format!("Lb={}", lb.min(cap)));
                }
                if le > 0 {
                    s.insert(format!("Le={}", le.min(cap)));
                }
                if inw {
                    s.insert("INW".into());
                }
                s
            })
            .collect()
    }

    #[test]
    fn default_templates_match_naive_extractor_on_three_chars() {
        let lex_words = vec!["ab".to_string(), "abc".to_string(), "c".to_string()];
        let lex: Lexicon = lex_words.iter().map(String::as_str).collect();
        let text = chars("abc");
        let feats = feature_strings(&text, &lex, &TemplateConfig::default());
        let oracle = naive_features(&text, &lex_words, 6);
        for (got, want) in feats.iter().zip(&oracle) {
            assert_eq!(&set(got), want);
        }
    }

    proptest! {
        #[test]
        fn default_templates_match_naive_extractor(
            words in prop::collection::vec("[abc]{1,8}", 0..6),
            text in "[abcd]{1,9}",
        ) {
            let lex: Lexicon = words.iter().map(String::as_str).collect();
            let text = chars(&text);
            let feats = feature_strings(&text, &lex, &TemplateConfig::default());
            let oracle = naive_features(&text, &words, 6);
            prop_assert_eq!(feats.len(), text.len());
            for (got, want) in feats.iter().zip(&oracle) {
                prop_assert_eq!(&set(got), want);
            }
        }

        #[test]
        fn prune_matches_filter(counts in prop::collection::vec(1u64..6, 0..30), min in 1u64..6) {
            let mut index = FeatureIndex::new();
            for (i, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    index.intern(&format!("f{i}"));
                }
            }
            let (kept, remap) = index.prune(min).unwrap();
            let expected: Vec<String> = counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c >= min)
                .map(|(i, _)| format!("f{i}"))
                .collect();
            prop_assert_eq!(kept.strings(), expected.as_slice());
            for (old, new) in remap.iter().enumerate() {
                if let Some(new) = new {
                    prop_assert_eq!(kept.name(*new), index.name(old as u32));
                }
            }
        }
    }
}
