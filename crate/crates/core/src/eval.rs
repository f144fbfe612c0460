//! Word-level precision, recall and F1.
//!
//! A predicted word counts as correct only when its character span matches a
//! gold span exactly (and, for labeled scoring, its label matches too).

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::corpus::Segmentation;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("gold has {gold} sentences but prediction has {pred}")]
    SentenceCount { gold: usize, pred: usize },
    #[error("sentence {line}: gold has {gold} characters but prediction has {pred}")]
    CharCount { line: usize, gold: usize, pred: usize },
    #[error("sentence {line}: gold has {gold} words but {labels} labels")]
    LabelCount { line: usize, gold: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl EvalResult {
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P={:.4} R={:.4} F1={:.4} (gold={} pred={} correct={})",
            self.precision, self.recall, self.f1, self.gold, self.predicted, self.correct
        )
    }
}

/// Running word counts; sentences are added one at a time.
#[derive(Debug, Clone, Copy, Default)]
pub struct Scorer {
    gold: usize,
    predicted: usize,
    correct: usize,
    sentences: usize,
}

impl Scorer {
    pub fn new() -> Self {
        Self::default()
    }

    fn check(&self, gold: &Segmentation, pred: &Segmentation) -> Result<(), EvalError> {
        if gold.char_len() != pred.char_len() {
            return Err(EvalError::CharCount {
                line: self.sentences + 1,
                gold: gold.char_len(),
                pred: pred.char_len(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, gold: &Segmentation, pred: &Segmentation) -> Result<(), EvalError> {
        self.check(gold, pred)?;
        let gold_spans: HashSet<(usize, usize)> = gold.spans().iter().copied().collect();
        self.correct += pred.spans().iter().filter(|s| gold_spans.contains(s)).count();
        self.gold += gold.num_words();
        self.predicted += pred.num_words();
        self.sentences += 1;
        Ok(())
    }

    /// Counts a word as correct only if span and label both match.
    pub fn add_labeled(
        &mut self,
        gold: (&Segmentation, &[String]),
        pred: (&Segmentation, &[String]),
    ) -> Result<(), EvalError> {
        self.check(gold.0, pred.0)?;
        for (seg, labels) in [gold, pred] {
            if seg.num_words() != labels.len() {
                return Err(EvalError::LabelCount {
                    line: self.sentences + 1,
                    gold: seg.num_words(),
                    labels: labels.len(),
                });
            }
        }
        let gold_words: HashSet<((usize, usize), &str)> = gold
            .0
            .spans()
            .iter()
            .copied()
            .zip(gold.1.iter().map(String::as_str))
            .collect();
        self.correct += pred
            .0
            .spans()
            .iter()
            .copied()
            .zip(pred.1.iter().map(String::as_str))
            .filter(|w| gold_words.contains(w))
            .count();
        self.gold += gold.0.num_words();
        self.predicted += pred.0.num_words();
        self.sentences += 1;
        Ok(())
    }

    pub fn result(&self) -> EvalResult {
        EvalResult::from_counts(self.gold, self.predicted, self.correct)
    }
}

/// Scores two aligned streams of segmentations.
pub fn score(gold: &[Segmentation], pred: &[Segmentation]) -> Result<EvalResult, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::SentenceCount {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut scorer = Scorer::new();
    for (g, p) in gold.iter().zip(pred) {
        scorer.add(g, p)?;
    }
    Ok(scorer.result())
}

/// Unweighted mean of the F1 values, skipping datasets named in `exclude`.
/// Returns `None` when nothing is left to average.
pub fn aggregate(results: &[(&str, f64)], exclude: &[&str]) -> Option<f64> {
    let kept: Vec<f64> = results
        .iter()
        .filter(|(name, _)| !exclude.contains(name))
        .map(|&(_, f1)| f1)
        .collect();
    (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
}
