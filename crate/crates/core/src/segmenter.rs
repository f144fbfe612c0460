//! Line-level segmentation with a user dictionary and optional forced
//! dictionary matching.

use std::thread;

use crate::corpus::NormalizationConfig;
use crate::crf::{self, CrfError, CrfModel, Token};
use crate::lexicon::Lexicon;

#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    /// Print `word/label` (needs a POS model).
    pub pos: bool,
    /// Merge adjacent output words whose concatenation is a user-dictionary
    /// entry.
    pub force_dict_match: bool,
    /// Normalization rules added to the model's own.
    pub normalization: NormalizationConfig,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    model: CrfModel,
    user_dict: Option<Lexicon>,
    options: SegmentOptions,
}

impl Segmenter {
    pub fn new(model: CrfModel, user_dict: Option<Lexicon>, options: SegmentOptions) -> Result<Self, CrfError> {
        if options.pos && !model.scheme().is_joint() {
            return Err(CrfError::NoLabels);
        }
        Ok(Self {
            model,
            user_dict,
            options,
        })
    }

    pub fn model(&self) -> &CrfModel {
        &self.model
    }

    /// Tokens of `text`. Whitespace-separated chunks are decoded (and
    /// force-merged) independently.
    pub fn tokens(&self, text: &str) -> Result<Vec<Token>, CrfError> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let tokens = crf::segment_with(&self.model, self.user_dict.as_ref(), self.options.normalization, chunk)?;
            match (&self.user_dict, self.options.force_dict_match) {
                (Some(dict), true) => out.extend(force_dict_match(tokens, dict)),
                _ => out.extend(tokens),
            }
        }
        Ok(out)
    }

    /// One output line (no trailing newline).
    pub fn segment_line(&self, line: &str) -> Result<String, CrfError> {
        let tokens = self.tokens(line)?;
        let rendered: Vec<String> = tokens
            .into_iter()
            .map(|t| if self.options.pos { t.to_string() } else { t.word })
            .collect();
        Ok(rendered.join(" "))
    }

    /// Segments `lines` on up to `threads` workers; output keeps input order.
    pub fn segment_lines(&self, lines: &[String], threads: usize) -> Result<Vec<String>, CrfError> {
        let threads = threads.max(1).min(lines.len().max(1));
        if threads == 1 {
            return lines.iter().map(|l| self.segment_line(l)).collect();
        }
        let per = lines.len().div_ceil(threads);
        let parts: Vec<Result<Vec<String>, CrfError>> = thread::scope(|s| {
            let handles: Vec<_> = lines
                .chunks(per)
                .map(|part| s.spawn(move || part.iter().map(|l| self.segment_line(l)).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("segmentation worker panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(lines.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }
}

/// Merges runs of adjacent tokens whose concatenation is in `dict`.
///
/// Scans left to right once; at each token the longest mergeable run
/// (two tokens or more) wins. A merged word keeps the first token's label.
pub fn force_dict_match(tokens: Vec<Token>, dict: &Lexicon) -> Vec<Token> {
    let max_len = dict.max_len();
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let mut best = 1;
        let mut joined = tokens[i].word.clone();
        let mut chars = joined.chars().count();
        for (k, next) in tokens.iter().enumerate().skip(i + 1) {
            chars += next.word.chars().count();
            if chars > max_len {
                break;
            }
            joined.push_str(&next.word);
            if dict.contains(&joined) {
                best = k - i + 1;
            }
        }
        if best == 1 {
            out.push(tokens[i].clone());
        } else {
            out.push(Token {
                word: tokens[i..i + best].iter().map(|t| t.word.as_str()).collect(),
                label: tokens[i].label.clone(),
            });
        }
        i += best;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TagScheme;
    use crate::features::{FeatureIndex, TemplateConfig};
    use proptest::prelude::*;

    fn tok(words: &[&str]) -> Vec<Token> {
        words
            .iter()
            .map(|w| Token {
                word: w.to_string(),
                label: None,
            })
            .collect()
    }

    fn words(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.word.as_str()).collect()
    }

    #[test]
    fn merges_longest_first() {
        let dict: Lexicon = ["xy", "xyz"].into_iter().collect();
        let out = force_dict_match(tok(&["x", "y", "z", "w"]), &dict);
        assert_eq!(words(&out), ["xyz", "w"]);
        let out = force_dict_match(tok(&["a", "x", "y"]), &dict);
        assert_eq!(words(&out), ["a", "xy"]);
    }

    #[test]
    fn single_pass_does_not_remerge() {
        // "ab" + "c" would form "abc", but merging happens once per scan.
        let dict: Lexicon = ["ab", "abc"].into_iter().collect();
        let out = force_dict_match(tok(&["a", "b", "c"]), &dict);
        assert_eq!(words(&out), ["abc"]);
        let dict: Lexicon = ["ab", "bc"].into_iter().collect();
        let out = force_dict_match(tok(&["a", "b", "c"]), &dict);
        assert_eq!(words(&out), ["ab", "c"]);
    }

    #[test]
    fn merged_word_keeps_first_label() {
        let dict: Lexicon = ["xy"].into_iter().collect();
        let tokens = vec![
            Token {
                word: "x".into(),
                label: Some("n".into()),
            },
            Token {
                word: "y".into(),
                label: Some("v".into()),
            },
        ];
        let out = force_dict_match(tokens, &dict);
        assert_eq!(out[0].to_string(), "xy/n");
    }

    /// A model that always splits into single characters.
    fn singles_model() -> CrfModel {
        let mut model = CrfModel::new(
            TagScheme::bmes(),
            TemplateConfig::unigrams_only(),
            FeatureIndex::from_strings(vec!["U0=x".into(), "U0=y".into()]),
            Lexicon::new(),
        );
        model.transition_mut()[3 * 4 + 3] = 5.0; // S -> S
        model
    }

    #[test]
    fn forced_mode_merges_baseline_split() {
        let dict: Lexicon = ["xy"].into_iter().collect();
        let plain = Segmenter::new(singles_model(), Some(dict.clone()), SegmentOptions::default()).unwrap();
        assert_eq!(plain.segment_line("xy").unwrap(), "x y");
        let forced = Segmenter::new(
            singles_model(),
            Some(dict),
            SegmentOptions {
                force_dict_match: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(forced.segment_line("xy").unwrap(), "xy");
        assert_eq!(forced.segment_line("x y").unwrap(), "x y");
        assert_eq!(forced.segment_line("").unwrap(), "");
    }

    #[test]
    fn pos_output_needs_labels() {
        let err = Segmenter::new(
            singles_model(),
            None,
            SegmentOptions {
                pos: true,
                ..Default::default()
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn threaded_output_keeps_order() {
        let seg = Segmenter::new(singles_model(), None, SegmentOptions::default()).unwrap();
        let lines: Vec<String> = (0..37).map(|i| "xy".repeat(i % 5)).collect();
        let serial = seg.segment_lines(&lines, 1).unwrap();
        assert_eq!(seg.segment_lines(&lines, 4).unwrap(), serial);
        assert_eq!(serial.len(), lines.len());
    }

    proptest! {
        #[test]
        fn merging_conserves_characters(
            pieces in prop::collection::vec("[abc]{1,2}", 0..12),
            entries in prop::collection::vec("[abc]{2,4}", 0..6),
        ) {
            let dict: Lexicon = entries.iter().map(String::as_str).collect();
            let tokens = tok(&pieces.iter().map(String::as_str).collect::<Vec<_>>());
            let out = force_dict_match(tokens, &dict);
            prop_assert_eq!(words(&out).concat(), pieces.concat());
            prop_assert!(out.len() <= pieces.len());
        }
    }
}
