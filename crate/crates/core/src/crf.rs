//! Linear-chain CRF over character tags.
//!
//! A [`Lattice`] holds per-position tag scores and the masked transition
//! matrix. All recursions run in log space; illegal transitions, starts and
//! ends are `-inf` so they never carry probability mass or win a decode.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::{self, NormalizationConfig, Sentence, TagScheme, TagSeq};
use crate::features::{self, FeatureIndex, FeatureSeq, TemplateConfig};
use crate::lexicon::Lexicon;
use crate::trainer::Provenance;

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("lattice admits no legal tag path")]
    DegenerateLattice,
    #[error("gold tag sequence is not a legal path under the tag scheme")]
    IllegalGold,
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("model has no POS labels")]
    NoLabels,
}

pub type Result<T, E = CrfError> = std::result::Result<T, E>;

/// `log(sum(exp(v)))` with max subtraction; `-inf` for an all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn mask_score(legal: bool) -> f64 {
    if legal {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Node and edge scores for one sentence.
#[derive(Debug, Clone)]
pub struct Lattice {
    len: usize,
    num_tags: usize,
    node: Vec<f64>,
    trans: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
}

/// Posterior tag and tag-pair probabilities.
#[derive(Debug, Clone)]
pub struct Marginals {
    num_tags: usize,
    node: Vec<f64>,
    edge: Vec<f64>,
}

impl Marginals {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.node[i * self.num_tags..(i + 1) * self.num_tags]
    }

    /// Probability of tags `(from, to)` at positions `(i, i + 1)`.
    pub fn edge(&self, i: usize, from: usize, to: usize) -> f64 {
        let t = self.num_tags;
        self.edge[(i * t + from) * t + to]
    }
}

impl Lattice {
    /// `node` is row-major `len x num_tags`, `transitions` is
    /// `num_tags x num_tags` indexed `[from][to]`.
    pub fn new(node: Vec<f64>, transitions: &[f64], scheme: &TagScheme) -> Result<Self> {
        let t = scheme.num_tags();
        if transitions.len() != t * t {
            return Err(CrfError::Dimension {
                what: "transition matrix",
                expected: t * t,
                got: transitions.len(),
            });
        }
        if node.len() % t != 0 {
            return Err(CrfError::Dimension {
                what: "node scores",
                expected: t,
                got: node.len() % t,
            });
        }
        let trans = (0..t * t)
            .map(|k| transitions[k] + mask_score(scheme.allowed(k / t, k % t)))
            .collect();
        Ok(Self {
            len: node.len() / t,
            num_tags: t,
            node,
            trans,
            start: (0..t).map(|k| mask_score(scheme.allowed_start(k))).collect(),
            end: (0..t).map(|k| mask_score(scheme.allowed_end(k))).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn node(&self, i: usize, tag: usize) -> f64 {
        self.node[i * self.num_tags + tag]
    }

    /// Masked transition score.
    pub fn trans(&self, from: usize, to: usize) -> f64 {
        self.trans[from * self.num_tags + to]
    }

    pub fn start(&self, tag: usize) -> f64 {
        self.start[tag]
    }

    pub fn end(&self, tag: usize) -> f64 {
        self.end[tag]
    }

    /// Adds `delta` to every tag score at position `i`.
    pub fn shift_position(&mut self, i: usize, delta: f64) {
        let t = self.num_tags;
        for v in &mut self.node[i * t..(i + 1) * t] {
            *v += delta;
        }
    }

    /// Score of a tag path, accumulated left to right; `-inf` if illegal.
    pub fn path_score(&self, tags: &[usize]) -> f64 {
        let Some((&first, &last)) = tags.first().zip(tags.last()) else {
            return 0.0;
        };
        let mut score = self.start[first] + self.node(0, first);
        for i in 1..tags.len() {
            score = score + self.trans(tags[i - 1], tags[i]) + self.node(i, tags[i]);
        }
        score + self.end[last]
    }

    /// Forward log-scores `alpha[i][t]`, row-major.
    pub fn forward(&self) -> Vec<f64> {
        let t = self.num_tags;
        let mut alpha = vec![f64::NEG_INFINITY; self.len * t];
        if self.len == 0 {
            return alpha;
        }
        for k in 0..t {
            alpha[k] = self.start[k] + self.node(0, k);
        }
        let mut scratch = vec![0.0; t];
        for i in 1..self.len {
            for to in 0..t {
                for from in 0..t {
                    scratch[from] = alpha[(i - 1) * t + from] + self.trans(from, to);
                }
                alpha[i * t + to] = log_sum_exp(&scratch) + self.node(i, to);
            }
        }
        alpha
    }

    /// Backward log-scores `beta[i][t]`, including the end mask.
    pub fn backward(&self) -> Vec<f64> {
        let t = self.num_tags;
        let mut beta = vec![f64::NEG_INFINITY; self.len * t];
        if self.len == 0 {
            return beta;
        }
        let last = self.len - 1;
        beta[last * t..].copy_from_slice(&self.end);
        let mut scratch = vec![0.0; t];
        for i in (0..last).rev() {
            for from in 0..t {
                for to in 0..t {
                    scratch[to] = self.trans(from, to) + self.node(i + 1, to) + beta[(i + 1) * t + to];
                }
                beta[i * t + from] = log_sum_exp(&scratch);
            }
        }
        beta
    }

    fn check_finite(log_z: f64) -> Result<f64> {
        if log_z == f64::NEG_INFINITY {
            Err(CrfError::DegenerateLattice)
        } else {
            Ok(log_z)
        }
    }

    fn partition_from_alpha(&self, alpha: &[f64]) -> Result<f64> {
        if self.len == 0 {
            return Ok(0.0);
        }
        let t = self.num_tags;
        let last = &alpha[(self.len - 1) * t..];
        let terms: Vec<f64> = (0..t).map(|k| last[k] + self.end[k]).collect();
        Self::check_finite(log_sum_exp(&terms))
    }

    /// Log of the summed exponentiated scores of all legal paths.
    pub fn log_partition(&self) -> Result<f64> {
        self.partition_from_alpha(&self.forward())
    }

    /// The same quantity computed by the backward recursion.
    pub fn log_partition_backward(&self) -> Result<f64> {
        if self.len == 0 {
            return Ok(0.0);
        }
        let beta = self.backward();
        let terms: Vec<f64> = (0..self.num_tags)
            .map(|k| self.start[k] + self.node(0, k) + beta[k])
            .collect();
        Self::check_finite(log_sum_exp(&terms))
    }

    /// Log-partition together with node and edge marginals.
    pub fn marginals(&self) -> Result<(f64, Marginals)> {
        let t = self.num_tags;
        let alpha = self.forward();
        let log_z = self.partition_from_alpha(&alpha)?;
        let beta = self.backward();
        let node = alpha
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a + b - log_z).exp())
            .collect();
        let mut edge = vec![0.0; self.len.saturating_sub(1) * t * t];
        for i in 0..self.len.saturating_sub(1) {
            for from in 0..t {
                let a = alpha[i * t + from];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                for to in 0..t {
                    let s = a + self.trans(from, to) + self.node(i + 1, to) + beta[(i + 1) * t + to];
                    edge[(i * t + from) * t + to] = (s - log_z).exp();
                }
            }
        }
        Ok((log_z, Marginals { num_tags: t, node, edge }))
    }

    /// Highest-scoring legal path and its score.
    ///
    /// Among equal-scoring paths the one with the lowest tag at the latest
    /// differing position wins.
    pub fn viterbi(&self) -> Result<(TagSeq, f64)> {
        let t = self.num_tags;
        if self.len == 0 {
            return Ok((TagSeq::default(), 0.0));
        }
        let mut delta = vec![f64::NEG_INFINITY; self.len * t];
        let mut back = vec![0usize; self.len * t];
        for k in 0..t {
            delta[k] = self.start[k] + self.node(0, k);
        }
        for i in 1..self.len {
            for to in 0..t {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for from in 0..t {
                    let s = delta[(i - 1) * t + from] + self.trans(from, to);
                    if s > best {
                        best = s;
                        arg = from;
                    }
                }
                delta[i * t + to] = best + self.node(i, to);
                back[i * t + to] = arg;
            }
        }
        let last = self.len - 1;
        let mut best = f64::NEG_INFINITY;
        let mut tag = 0;
        for k in 0..t {
            let s = delta[last * t + k] + self.end[k];
            if s > best {
                best = s;
                tag = k;
            }
        }
        if best == f64::NEG_INFINITY {
            return Err(CrfError::DegenerateLattice);
        }
        let mut path = vec![0; self.len];
        path[last] = tag;
        for i in (1..self.len).rev() {
            path[i - 1] = back[i * t + path[i]];
        }
        Ok((TagSeq(path), best))
    }
}

/// Sparse log-likelihood gradient: per-feature tag vectors plus the dense
/// transition block. Features are reported in ascending ID order.
#[derive(Debug, Clone)]
pub struct Gradient {
    num_tags: usize,
    slots: HashMap<u32, usize>,
    features: Vec<u32>,
    values: Vec<f64>,
    transition: Vec<f64>,
}

impl Gradient {
    pub fn new(num_tags: usize) -> Self {
        Self {
            num_tags,
            slots: HashMap::new(),
            features: Vec::new(),
            values: Vec::new(),
            transition: vec![0.0; num_tags * num_tags],
        }
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.features.clear();
        self.values.clear();
        self.transition.iter_mut().for_each(|v| *v = 0.0);
    }

    fn slot(&mut self, feature: u32) -> usize {
        let next = self.features.len();
        let t = self.num_tags;
        *self.slots.entry(feature).or_insert_with(|| {
            self.features.push(feature);
            self.values.extend(std::iter::repeat_n(0.0, t));
            next
        })
    }

    pub fn add_emission(&mut self, feature: u32, tag: usize, value: f64) {
        let slot = self.slot(feature);
        self.values[slot * self.num_tags + tag] += value;
    }

    /// `(feature, per-tag gradient)` in ascending feature order.
    pub fn emissions(&self) -> Vec<(u32, &[f64])> {
        let t = self.num_tags;
        let mut out: Vec<(u32, &[f64])> = self
            .features
            .iter()
            .enumerate()
            .map(|(slot, &f)| (f, &self.values[slot * t..(slot + 1) * t]))
            .collect();
        out.sort_unstable_by_key(|&(f, _)| f);
        out
    }

    pub fn emission(&self, feature: u32, tag: usize) -> f64 {
        self.slots
            .get(&feature)
            .map_or(0.0, |&slot| self.values[slot * self.num_tags + tag])
    }

    /// Row-major `[from][to]`.
    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().chain(&self.transition).all(|v| v.is_finite())
    }
}

/// A decoded word with its POS label in joint mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub word: String,
    pub label: Option<String>,
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.label {
            Some(label) => write!(f, "{}/{}", self.word, label),
            None => f.write_str(&self.word),
        }
    }
}

/// Emission weights per (feature, tag), transition weights per tag pair,
/// and everything needed to featurize text the way training did.
#[derive(Debug, Clone)]
pub struct CrfModel {
    scheme: TagScheme,
    templates: TemplateConfig,
    index: FeatureIndex,
    lexicon: Lexicon,
    emission: Vec<f64>,
    transition: Vec<f64>,
    provenance: Option<Provenance>,
}

impl CrfModel {
    /// Zero weights sized to `index`.
    pub fn new(scheme: TagScheme, templates: TemplateConfig, index: FeatureIndex, lexicon: Lexicon) -> Self {
        let t = scheme.num_tags();
        Self {
            emission: vec![0.0; index.len() * t],
            transition: vec![0.0; t * t],
            scheme,
            templates,
            index,
            lexicon,
            provenance: None,
        }
    }

    /// Assembles a model from stored parts, checking dimensions.
    pub fn from_parts(
        scheme: TagScheme,
        templates: TemplateConfig,
        index: FeatureIndex,
        lexicon: Lexicon,
        emission: Vec<f64>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        let t = scheme.num_tags();
        if emission.len() != index.len() * t {
            return Err(CrfError::Dimension {
                what: "emission weights",
                expected: index.len() * t,
                got: emission.len(),
            });
        }
        if transition.len() != t * t {
            return Err(CrfError::Dimension {
                what: "transition weights",
                expected: t * t,
                got: transition.len(),
            });
        }
        Ok(Self {
            scheme,
            templates,
            index,
            lexicon,
            emission,
            transition,
            provenance: None,
        })
    }

    pub fn scheme(&self) -> &TagScheme {
        &self.scheme
    }

    pub fn templates(&self) -> &TemplateConfig {
        &self.templates
    }

    pub fn index(&self) -> &FeatureIndex {
        &self.index
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn num_tags(&self) -> usize {
        self.scheme.num_tags()
    }

    /// Adds words to the model's lexicon. Features are not re-extracted.
    pub fn extend_lexicon(&mut self, extra: &Lexicon) {
        let words = extra.words();
        self.lexicon.extend(words.iter().map(String::as_str));
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn set_provenance(&mut self, provenance: Option<Provenance>) {
        self.provenance = provenance;
    }

    pub fn num_features(&self) -> usize {
        self.index.len()
    }

    /// Row-major `[feature][tag]`.
    pub fn emission(&self) -> &[f64] {
        &self.emission
    }

    pub fn emission_mut(&mut self) -> &mut [f64] {
        &mut self.emission
    }

    /// Row-major `[from][to]`.
    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn transition_mut(&mut self) -> &mut [f64] {
        &mut self.transition
    }

    pub fn weight(&self, feature: u32, tag: usize) -> f64 {
        self.emission[feature as usize * self.num_tags() + tag]
    }

    pub fn all_finite(&self) -> bool {
        self.emission.iter().chain(&self.transition).all(|w| w.is_finite())
    }

    /// Extracts features for `chars`, growing the index unless it is frozen.
    /// New features get zero weights.
    pub fn featurize_mut(&mut self, chars: &[char]) -> FeatureSeq {
        let seq = features::extract(chars, &self.lexicon, &self.templates, &mut self.index);
        self.emission.resize(self.index.len() * self.num_tags(), 0.0);
        seq
    }

    pub fn freeze(&mut self) {
        self.index.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.index.unfreeze();
    }

    /// Extracts features against the frozen index, consulting `user_dict`
    /// alongside the model's own lexicon.
    pub fn featurize(&self, chars: &[char], user_dict: Option<&Lexicon>, templates: &TemplateConfig) -> FeatureSeq {
        match user_dict {
            Some(user) => {
                let stack: &[&Lexicon] = &[&self.lexicon, user];
                features::extract_frozen(chars, stack, templates, &self.index)
            }
            None => features::extract_frozen(chars, &self.lexicon, templates, &self.index),
        }
    }

    pub fn lattice(&self, feats: &FeatureSeq) -> Result<Lattice> {
        let t = self.num_tags();
        let mut node = vec![0.0; feats.len() * t];
        for (i, ids) in feats.iter().enumerate() {
            let row = &mut node[i * t..(i + 1) * t];
            for &f in ids {
                let weights = self.emission.get(f as usize * t..(f as usize + 1) * t).ok_or(
                    CrfError::Dimension {
                        what: "feature id",
                        expected: self.index.len(),
                        got: f as usize,
                    },
                )?;
                for (r, w) in row.iter_mut().zip(weights) {
                    *r += w;
                }
            }
        }
        Lattice::new(node, &self.transition, &self.scheme)
    }

    fn check_gold(&self, feats: &FeatureSeq, gold: &TagSeq) -> Result<()> {
        if gold.len() != feats.len() {
            return Err(CrfError::Dimension {
                what: "gold tags",
                expected: feats.len(),
                got: gold.len(),
            });
        }
        if !self.scheme.is_valid_path(gold.as_slice()) {
            return Err(CrfError::IllegalGold);
        }
        Ok(())
    }

    /// `score(gold) - logZ`.
    pub fn log_likelihood(&self, feats: &FeatureSeq, gold: &TagSeq) -> Result<f64> {
        self.check_gold(feats, gold)?;
        let lattice = self.lattice(feats)?;
        Ok(lattice.path_score(gold.as_slice()) - lattice.log_partition()?)
    }

    /// Adds the gradient of the log-likelihood of `gold` into `grad` and
    /// returns the log-likelihood.
    pub fn accumulate_gradient(&self, feats: &FeatureSeq, gold: &TagSeq, grad: &mut Gradient) -> Result<f64> {
        self.check_gold(feats, gold)?;
        let t = self.num_tags();
        let lattice = self.lattice(feats)?;
        let (log_z, marg) = lattice.marginals()?;
        let gold = gold.as_slice();
        for (i, ids) in feats.iter().enumerate() {
            let probs = marg.node(i);
            for &f in ids {
                for (tag, &p) in probs.iter().enumerate() {
                    let observed = if gold[i] == tag { 1.0 } else { 0.0 };
                    grad.add_emission(f, tag, observed - p);
                }
            }
        }
        for i in 0..gold.len().saturating_sub(1) {
            for from in 0..t {
                for to in 0..t {
                    let p = marg.edge(i, from, to);
                    if p != 0.0 {
                        grad.transition[from * t + to] -= p;
                    }
                }
            }
            grad.transition[gold[i] * t + gold[i + 1]] += 1.0;
        }
        Ok(lattice.path_score(gold) - log_z)
    }

    pub fn gradient(&self, feats: &FeatureSeq, gold: &TagSeq) -> Result<(f64, Gradient)> {
        let mut grad = Gradient::new(self.num_tags());
        let ll = self.accumulate_gradient(feats, gold, &mut grad)?;
        Ok((ll, grad))
    }

    /// Keeps only features mapped by `remap` and swaps in the pruned index.
    pub fn apply_prune(&mut self, index: FeatureIndex, remap: &[Option<u32>]) {
        let t = self.num_tags();
        let mut emission = vec![0.0; index.len() * t];
        for (old, new) in remap.iter().enumerate() {
            if let Some(new) = new {
                let new = *new as usize;
                emission[new * t..(new + 1) * t].copy_from_slice(&self.emission[old * t..(old + 1) * t]);
            }
        }
        self.emission = emission;
        self.index = index;
    }

    /// Decodes one whitespace-free chunk into tags.
    pub fn decode(&self, chars: &[char], user_dict: Option<&Lexicon>, templates: &TemplateConfig) -> Result<TagSeq> {
        let feats = self.featurize(chars, user_dict, templates);
        Ok(self.lattice(&feats)?.viterbi()?.0)
    }
}

/// Segments `text` with the model's own templates.
///
/// Whitespace separates chunks that are decoded independently; it never
/// appears inside a word.
pub fn segment(model: &CrfModel, user_dict: Option<&Lexicon>, text: &str) -> Result<Vec<Token>> {
    segment_with(model, user_dict, NormalizationConfig::default(), text)
}

/// As [`segment`], with extra normalization rules on top of the model's.
pub fn segment_with(
    model: &CrfModel,
    user_dict: Option<&Lexicon>,
    extra_normalization: NormalizationConfig,
    text: &str,
) -> Result<Vec<Token>> {
    let mut templates = *model.templates();
    templates.normalization = templates.normalization.union(extra_normalization);
    let scheme = model.scheme();
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let sentence = Sentence::new(chunk);
        let tags = model.decode(sentence.chars(), user_dict, &templates)?;
        let seg = corpus::tags_to_seg(&sentence, &tags, scheme).map_err(|_| CrfError::Dimension {
            what: "decoded tags",
            expected: sentence.len(),
            got: tags.len(),
        })?;
        let labels = scheme
            .is_joint()
            .then(|| corpus::word_labels(&seg, &tags, scheme));
        for (w, word) in seg.words(&sentence).into_iter().enumerate() {
            out.push(Token {
                word: word.to_string(),
                label: labels.as_ref().map(|l| scheme.labels()[l[w]].clone()),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Position;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_paths(n: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..t).map(move |k| {
                        let mut q = p.clone();
                        q.push(k);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Path score straight from the raw inputs, independent of `Lattice`.
    fn raw_score(node: &[f64], trans: &[f64], scheme: &TagScheme, path: &[usize]) -> Option<f64> {
        if !scheme.is_valid_path(path) {
            return None;
        }
        let t = scheme.num_tags();
        let mut s = node[path[0]];
        for i in 1..path.len() {
            s = s + trans[path[i - 1] * t + path[i]] + node[i * t + path[i]];
        }
        Some(s)
    }

    fn random_lattice(rng: &mut ChaCha8Rng, n: usize, scheme: &TagScheme) -> (Vec<f64>, Vec<f64>, Lattice) {
        let t = scheme.num_tags();
        let node: Vec<f64> = (0..n * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let trans: Vec<f64> = (0..t * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lattice = Lattice::new(node.clone(), &trans, scheme).unwrap();
        (node, trans, lattice)
    }

    #[test]
    fn uniform_partition() {
        for n in 1..5 {
            let scheme = TagScheme::unconstrained(3);
            let lattice = Lattice::new(vec![0.0; n * 3], &[0.0; 9], &scheme).unwrap();
            let log_z = lattice.log_partition().unwrap();
            assert!((log_z - n as f64 * 3f64.ln()).abs() < 1e-12);
        }
        let scheme = TagScheme::unconstrained(2);
        let lattice = Lattice::new(vec![1.0, 2.0], &[0.0; 4], &scheme).unwrap();
        let want = (1f64.exp() + 2f64.exp()).ln();
        assert!((lattice.log_partition().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn partition_marginals_viterbi_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for scheme in [TagScheme::bmes(), TagScheme::unconstrained(4)] {
            for _ in 0..200 {
                let n = rng.gen_range(1..=5);
                let (node, trans, lattice) = random_lattice(&mut rng, n, &scheme);
                let scored: Vec<(Vec<usize>, f64)> = all_paths(n, 4)
                    .into_iter()
                    .filter_map(|p| raw_score(&node, &trans, &scheme, &p).map(|s| (p, s)))
                    .collect();
                let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
                let brute_z = log_sum_exp(&scores);
                let log_z = lattice.log_partition().unwrap();
                assert!(((log_z - brute_z) / brute_z.abs().max(1.0)).abs() < 1e-10);
                assert!((lattice.log_partition_backward().unwrap() - log_z).abs() < 1e-10);

                let (_, marg) = lattice.marginals().unwrap();
                for i in 0..n {
                    let row = marg.node(i);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    for k in 0..4 {
                        let brute: f64 = scored
                            .iter()
                            .filter(|(p, _)| p[i] == k)
                            .map(|(_, s)| (s - brute_z).exp())
                            .sum();
                        assert!((row[k] - brute).abs() < 1e-10);
                    }
                }

                let (path, score) = lattice.viterbi().unwrap();
                let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(score, best);
                assert!(scheme.is_valid_path(path.as_slice()));
                assert!(score <= log_z);
            }
        }
    }

    #[test]
    fn masked_marginals_at_start() {
        let scheme = TagScheme::bmes();
        let lattice = Lattice::new(vec![0.0; 12], &[0.0; 16], &scheme).unwrap();
        let (_, marg) = lattice.marginals().unwrap();
        let row = marg.node(0);
        assert_eq!(row[Position::M.index()], 0.0);
        assert_eq!(row[Position::E.index()], 0.0);
        assert!((row[Position::B.index()] + row[Position::S.index()] - 1.0).abs() < 1e-12);

        let free = TagScheme::unconstrained(4);
        let lattice = Lattice::new(vec![0.0; 12], &[0.0; 16], &free).unwrap();
        let (_, marg) = lattice.marginals().unwrap();
        assert!(marg.node(1).iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn viterbi_follows_dominant_emissions_and_breaks_ties_low() {
        let scheme = TagScheme::bmes();
        let mut node = vec![0.0; 5 * 4];
        for i in 0..5 {
            node[i * 4 + Position::S.index()] = 10.0;
        }
        let lattice = Lattice::new(node, &[0.0; 16], &scheme).unwrap();
        assert_eq!(lattice.viterbi().unwrap().0 .0, vec![3; 5]);

        // all-zero: ties everywhere; lowest tag at the last position is E,
        // then B before it.
        let lattice = Lattice::new(vec![0.0; 8], &[0.0; 16], &scheme).unwrap();
        assert_eq!(lattice.viterbi().unwrap().0 .0, vec![0, 2]);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scheme = TagScheme::bmes();
        let (_, _, lattice) = random_lattice(&mut rng, 5, &scheme);
        let mut shifted = lattice.clone();
        shifted.shift_position(2, 1.75);
        let dz = shifted.log_partition().unwrap() - lattice.log_partition().unwrap();
        assert!((dz - 1.75).abs() < 1e-12);
        assert_eq!(shifted.viterbi().unwrap().0, lattice.viterbi().unwrap().0);
        let (_, a) = lattice.marginals().unwrap();
        let (_, b) = shifted.marginals().unwrap();
        for i in 0..5 {
            for (x, y) in a.node(i).iter().zip(b.node(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let scheme = TagScheme::bmes();
        let node: Vec<f64> = (0..24).map(|k| if k % 3 == 0 { 1e4 } else { -1e4 }).collect();
        let lattice = Lattice::new(node, &[0.0; 16], &scheme).unwrap();
        assert!(lattice.log_partition().unwrap().is_finite());
        let (_, marg) = lattice.marginals().unwrap();
        assert!((marg.node(3).iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn over_constrained_lattice_is_degenerate() {
        let scheme = TagScheme::bmes();
        let mut node = vec![0.0; 4];
        node[Position::S.index()] = f64::NEG_INFINITY;
        let lattice = Lattice::new(node, &[0.0; 16], &scheme).unwrap();
        assert_eq!(lattice.log_partition(), Err(CrfError::DegenerateLattice));
        assert_eq!(lattice.viterbi().unwrap_err(), CrfError::DegenerateLattice);
    }

    fn toy_model(num_features: usize, scheme: TagScheme) -> CrfModel {
        let index = FeatureIndex::from_strings((0..num_features).map(|i| format!("f{i}")).collect());
        CrfModel::new(scheme, TemplateConfig::default(), index, Lexicon::new())
    }

    #[test]
    fn uniform_log_likelihood_and_gradient() {
        let model = toy_model(1, TagScheme::unconstrained(2));
        let feats = FeatureSeq::new(vec![vec![0], vec![0]]);
        let ll = model.log_likelihood(&feats, &TagSeq(vec![0, 1])).unwrap();
        assert!((ll + 2.0 * 2f64.ln()).abs() < 1e-12);

        let feats = FeatureSeq::new(vec![vec![0]]);
        let (_, grad) = model.gradient(&feats, &TagSeq(vec![0])).unwrap();
        assert!((grad.emission(0, 0) - 0.5).abs() < 1e-12);
        assert!((grad.emission(0, 1) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn likelihood_sums_to_one_over_gold_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = toy_model(6, TagScheme::bmes());
        for w in model.emission_mut().iter_mut() {
            *w = rng.gen_range(-2.0..2.0);
        }
        for w in model.transition_mut() {
            *w = rng.gen_range(-2.0..2.0);
        }
        for n in 1..=5 {
            let feats = FeatureSeq::new((0..n).map(|_| vec![rng.gen_range(0..6), rng.gen_range(0..6)]).collect());
            let total: f64 = all_paths(n, 4)
                .into_iter()
                .filter(|p| model.scheme().is_valid_path(p))
                .map(|p| model.log_likelihood(&feats, &TagSeq(p)).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn illegal_gold_is_rejected() {
        let model = toy_model(1, TagScheme::bmes());
        let feats = FeatureSeq::new(vec![vec![0], vec![0]]);
        assert_eq!(
            model.log_likelihood(&feats, &TagSeq(vec![0, 0])),
            Err(CrfError::IllegalGold)
        );
    }

    #[test]
    fn dominant_gold_weights_drive_likelihood_up_and_gradient_down() {
        let mut model = toy_model(3, TagScheme::bmes());
        let feats = FeatureSeq::new(vec![vec![0], vec![1], vec![2]]);
        let gold = TagSeq(vec![0, 1, 2]);
        let mut last_ll = f64::NEG_INFINITY;
        let mut last_norm = f64::INFINITY;
        for step in 0..6 {
            let w = step as f64 * 2.0;
            for (f, &tag) in gold.as_slice().iter().enumerate() {
                model.emission_mut()[f * 4 + tag] = w;
            }
            let (ll, grad) = model.gradient(&feats, &gold).unwrap();
            let norm: f64 = grad
                .emissions()
                .iter()
                .flat_map(|(_, g)| g.iter())
                .chain(grad.transition())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            assert!(ll <= 0.0 && ll > last_ll);
            assert!(norm < last_norm);
            last_ll = ll;
            last_norm = norm;
        }
        assert!(last_ll > -1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..20 {
            let mut model = toy_model(5, TagScheme::bmes());
            for w in model.emission_mut() {
                *w = rng.gen_range(-2.0..2.0);
            }
            for w in model.transition_mut() {
                *w = rng.gen_range(-2.0..2.0);
            }
            let n = rng.gen_range(1..=6);
            let feats = FeatureSeq::new((0..n).map(|_| vec![rng.gen_range(0..5), rng.gen_range(0..5)]).collect());
            let legal: Vec<Vec<usize>> = all_paths(n, 4)
                .into_iter()
                .filter(|p| model.scheme().is_valid_path(p))
                .collect();
            let gold = TagSeq(legal[rng.gen_range(0..legal.len())].clone());
            let (_, grad) = model.gradient(&feats, &gold).unwrap();
            for k in 0..model.emission().len() {
                let orig = model.emission()[k];
                model.emission_mut()[k] = orig + h;
                let up = model.log_likelihood(&feats, &gold).unwrap();
                model.emission_mut()[k] = orig - h;
                let down = model.log_likelihood(&feats, &gold).unwrap();
                model.emission_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad.emission((k / 4) as u32, k % 4)).abs() < 1e-6);
            }
            for k in 0..16 {
                let orig = model.transition()[k];
                model.transition_mut()[k] = orig + h;
                let up = model.log_likelihood(&feats, &gold).unwrap();
                model.transition_mut()[k] = orig - h;
                let down = model.log_likelihood(&feats, &gold).unwrap();
                model.transition_mut()[k] = orig;
                assert!(((up - down) / (2.0 * h) - grad.transition()[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn joint_decode_never_switches_label_inside_word() {
        let scheme = TagScheme::joint(vec!["n".into(), "v".into()]);
        let b_n = scheme.tag(Position::B, 0);
        let e_v = scheme.tag(Position::E, 1);
        let mut node = vec![0.0; 2 * 8];
        node[b_n] = 5.0;
        node[8 + e_v] = 5.0;
        let lattice = Lattice::new(node, &[0.0; 64], &scheme).unwrap();
        let (path, _) = lattice.viterbi().unwrap();
        assert!(scheme.is_valid_path(path.as_slice()));
        assert_ne!(path.0, vec![b_n, e_v]);
    }

    #[test]
    fn segment_edge_cases() {
        let model = toy_model(0, TagScheme::bmes());
        assert!(segment(&model, None, "").unwrap().is_empty());
        assert!(segment(&model, None, "  \t").unwrap().is_empty());
        let words = segment(&model, None, "x").unwrap();
        assert_eq!(words, vec![Token { word: "x".into(), label: None }]);
        let words = segment(&model, None, "ab c").unwrap();
        let joined: String = words.iter().map(|t| t.word.as_str()).collect();
        assert_eq!(joined, "abc");
    }
}
