//! Online training with frequency-adaptive per-parameter learning rates.
//!
//! Every weight keeps an update count `u`; its learning rate is
//! `eta0 / (1 + rho * u)`, so weights of frequent features settle while rare
//! ones keep learning fast. L2 shrinkage is applied lazily: a weight is only
//! brought up to date when a minibatch touches it (or at [`finalize`]),
//! which keeps each step proportional to the active features instead of the
//! whole parameter vector.

use std::fmt;
use std::time::Instant;

use crc::{Crc, CRC_64_ECMA_182};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Corpus, CorpusError, Example, TagScheme, TagSeq};
use crate::crf::{CrfError, CrfModel, Gradient};
use crate::eval::Scorer;
use crate::features::{FeatureError, FeatureSeq, TemplateConfig};
use crate::lexicon::Lexicon;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("incompatible initial model: {0}")]
    Incompatible(String),
    #[error("training diverged at the sentence on line {line}")]
    Divergence { line: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adf,
    Sgd,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adf => "adf",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta0: f64,
    /// Decay strength of the frequency-adaptive rate.
    pub rho: f64,
    pub l2: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Evaluate on the dev set every this many epochs (0: only after the
    /// last one).
    pub dev_every: usize,
    /// Drop features seen fewer times than this after training.
    pub prune: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            eta0: 0.05,
            rho: 0.02,
            l2: 1e-6,
            seed: 0,
            optimizer: Optimizer::Adf,
            dev_every: 1,
            prune: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch size must be at least 1");
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return fail("eta0 must be positive");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return fail("rho must be non-negative");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("l2 must be non-negative");
        }
        if self.prune == Some(0) {
            return fail("prune threshold must be at least 1");
        }
        Ok(())
    }

    /// Learning rate of a parameter that has been updated `count` times.
    pub fn rate(&self, count: u64) -> f64 {
        match self.optimizer {
            Optimizer::Adf => adf_rate(count, self.eta0, self.rho),
            Optimizer::Sgd => self.eta0,
        }
    }
}

/// `eta0 / (1 + rho * count)`.
pub fn adf_rate(count: u64, eta0: f64, rho: f64) -> f64 {
    eta0 / (1.0 + rho * count as f64)
}

/// Per-parameter update counts and lazy-regularization timestamps.
#[derive(Debug, Clone)]
pub struct AdfState {
    num_tags: usize,
    emission_counts: Vec<u64>,
    emission_synced: Vec<u64>,
    transition_counts: Vec<u64>,
    transition_synced: Vec<u64>,
    steps: u64,
    /// L2 shrinkage per step before the learning rate: `l2 * b / N`.
    decay: f64,
}

impl AdfState {
    pub fn new(model: &CrfModel, decay: f64) -> Self {
        let t = model.num_tags();
        Self {
            num_tags: t,
            emission_counts: vec![0; model.emission().len()],
            emission_synced: vec![0; model.emission().len()],
            transition_counts: vec![0; t * t],
            transition_synced: vec![0; t * t],
            steps: 0,
            decay,
        }
    }

    /// Minibatch steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn emission_count(&self, feature: u32, tag: usize) -> u64 {
        self.emission_counts[feature as usize * self.num_tags + tag]
    }

    pub fn transition_count(&self, from: usize, to: usize) -> u64 {
        self.transition_counts[from * self.num_tags + to]
    }

    fn grow(&mut self, len: usize) {
        self.emission_counts.resize(len, 0);
        self.emission_synced.resize(len, self.steps);
    }
}

/// Brings `weight` up to date with the shrinkage of the steps it missed.
fn catch_up(weight: &mut f64, synced: &mut u64, count: u64, now: u64, decay: f64, cfg: &TrainConfig) {
    let pending = now - *synced;
    if pending > 0 && decay > 0.0 {
        let factor = 1.0 - cfg.rate(count) * decay;
        *weight *= factor.powf(pending as f64);
    }
    *synced = now;
}

fn apply_update(weight: &mut f64, synced: &mut u64, count: &mut u64, g: f64, now: u64, decay: f64, cfg: &TrainConfig) {
    let eta = cfg.rate(*count);
    *weight += eta * (g - decay * *weight);
    *count += 1;
    *synced = now + 1;
}

/// One featurized training sentence.
#[derive(Debug, Clone)]
pub struct Instance {
    pub feats: FeatureSeq,
    pub gold: TagSeq,
    pub line: usize,
}

/// One minibatch update. Returns the summed log-likelihood of the batch
/// under the weights before the update.
pub fn step(
    model: &mut CrfModel,
    state: &mut AdfState,
    batch: &[&Instance],
    cfg: &TrainConfig,
    grad: &mut Gradient,
) -> Result<f64> {
    let t = model.num_tags();
    let now = state.steps;
    let decay = state.decay;
    if state.emission_counts.len() < model.emission().len() {
        state.grow(model.emission().len());
    }

    // Sync every weight the batch reads so gradients see eager values.
    if decay > 0.0 {
        let mut active: Vec<u32> = batch.iter().flat_map(|x| x.feats.iter().flatten().copied()).collect();
        active.sort_unstable();
        active.dedup();
        let emission = model.emission_mut();
        for f in active {
            for p in f as usize * t..(f as usize + 1) * t {
                catch_up(&mut emission[p], &mut state.emission_synced[p], state.emission_counts[p], now, decay, cfg);
            }
        }
        let transition = model.transition_mut();
        for p in 0..t * t {
            catch_up(&mut transition[p], &mut state.transition_synced[p], state.transition_counts[p], now, decay, cfg);
        }
    }

    grad.clear();
    let mut ll_sum = 0.0;
    for x in batch {
        let ll = model.accumulate_gradient(&x.feats, &x.gold, grad)?;
        if !ll.is_finite() {
            return Err(TrainError::Divergence { line: x.line });
        }
        ll_sum += ll;
    }
    if !grad.is_finite() {
        return Err(TrainError::Divergence {
            line: batch.first().map_or(0, |x| x.line),
        });
    }

    let emission = model.emission_mut();
    for (f, values) in grad.emissions() {
        for (tag, &g) in values.iter().enumerate() {
            if g != 0.0 {
                let p = f as usize * t + tag;
                apply_update(
                    &mut emission[p],
                    &mut state.emission_synced[p],
                    &mut state.emission_counts[p],
                    g,
                    now,
                    decay,
                    cfg,
                );
            }
        }
    }
    let transition = model.transition_mut();
    for (p, &g) in grad.transition().iter().enumerate() {
        if g != 0.0 {
            apply_update(
                &mut transition[p],
                &mut state.transition_synced[p],
                &mut state.transition_counts[p],
                g,
                now,
                decay,
                cfg,
            );
        }
    }
    state.steps += 1;
    Ok(ll_sum)
}

/// Applies all pending shrinkage so stored weights equal eager ones.
pub fn finalize(model: &mut CrfModel, state: &mut AdfState, cfg: &TrainConfig) {
    let now = state.steps;
    let decay = state.decay;
    let emission = model.emission_mut();
    for p in 0..emission.len() {
        catch_up(&mut emission[p], &mut state.emission_synced[p], state.emission_counts[p], now, decay, cfg);
    }
    let transition = model.transition_mut();
    for p in 0..transition.len() {
        catch_up(&mut transition[p], &mut state.transition_synced[p], state.transition_counts[p], now, decay, cfg);
    }
}

/// Training metadata stored alongside a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: TrainConfig,
    pub epochs: usize,
    pub sentences: usize,
    pub corpus_checksum: u64,
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_ll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
    pub wall_time_s: f64,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {:>3}  mean LL {:>12.6}", self.epoch, self.mean_ll)?;
        if let Some(dev) = self.dev_f1 {
            write!(f, "  dev F1 {dev:.4}")?;
        }
        write!(f, "  {:.2}s", self.wall_time_s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub sentences: usize,
    pub features: usize,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch report serializes") + "\n")
            .collect()
    }

    pub fn final_dev_f1(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.dev_f1)
    }
}

/// Where training starts from.
#[derive(Debug, Clone)]
pub enum ModelStart {
    Cold { lexicon: Lexicon, templates: TemplateConfig },
    /// Fine-tune a trained model. Extra lexicon words are added to the
    /// model's own lexicon; new features start at zero weight.
    Warm { model: CrfModel, extra_lexicon: Option<Lexicon> },
}

fn corpus_checksum(corpus: &Corpus) -> u64 {
    let crc = Crc::<u64>::new(&CRC_64_ECMA_182);
    let mut digest = crc.digest();
    for ex in &corpus.examples {
        for (w, word) in ex.seg.words(&ex.sentence).iter().enumerate() {
            digest.update(word.as_bytes());
            if let Some(label) = ex.labels.as_ref().map(|l| &l[w]) {
                digest.update(b"/");
                digest.update(label.as_bytes());
            }
            digest.update(b" ");
        }
        digest.update(b"\n");
    }
    digest.finalize()
}

fn gold_tags(ex: &Example, scheme: &TagScheme) -> Result<TagSeq> {
    let labels = match &ex.labels {
        Some(labels) if scheme.is_joint() => Some(
            labels
                .iter()
                .map(|l| scheme.label_index(l).ok_or_else(|| CorpusError::UnknownLabel(l.clone())))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        _ => None,
    };
    Ok(corpus::seg_to_tags(&ex.seg, scheme, labels.as_deref())?)
}

fn prepare_model(corpus: &Corpus, start: ModelStart) -> Result<(CrfModel, bool)> {
    let labeled = corpus.has_labels();
    if labeled && corpus.examples.iter().any(|e| e.labels.is_none()) {
        return Err(TrainError::Config("corpus mixes labeled and unlabeled sentences".into()));
    }
    match start {
        ModelStart::Cold { lexicon, templates } => {
            templates.validate()?;
            let scheme = if labeled {
                TagScheme::joint(corpus.label_set())
            } else {
                TagScheme::bmes()
            };
            let model = CrfModel::new(scheme, templates, Default::default(), lexicon);
            Ok((model, false))
        }
        ModelStart::Warm { mut model, extra_lexicon } => {
            let scheme = model.scheme();
            if scheme.is_joint() != labeled {
                return Err(TrainError::Incompatible(format!(
                    "model uses the {} scheme but the corpus is {}",
                    scheme,
                    if labeled { "POS-labeled" } else { "unlabeled" }
                )));
            }
            if let Some(missing) = corpus.label_set().into_iter().find(|l| scheme.label_index(l).is_none()) {
                return Err(TrainError::Incompatible(format!(
                    "corpus label `{missing}` is unknown to the model"
                )));
            }
            if let Some(extra) = extra_lexicon {
                model.extend_lexicon(&extra);
            }
            Ok((model, true))
        }
    }
}

/// Trains on `corpus`, optionally scoring `dev` after epochs.
pub fn train(
    corpus: &Corpus,
    dev: Option<&Corpus>,
    cfg: &TrainConfig,
    start: ModelStart,
    mut progress: impl FnMut(&EpochReport, &CrfModel),
) -> Result<(CrfModel, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let (mut model, warm) = prepare_model(corpus, start)?;

    model.unfreeze();
    let mut instances = Vec::with_capacity(corpus.len());
    for ex in &corpus.examples {
        let gold = gold_tags(ex, model.scheme())?;
        let feats = model.featurize_mut(ex.sentence.chars());
        instances.push(Instance { feats, gold, line: ex.line });
    }
    model.freeze();

    let n = instances.len();
    let decay = cfg.l2 * cfg.batch_size as f64 / n as f64;
    let mut state = AdfState::new(&model, decay);
    let mut grad = Gradient::new(model.num_tags());
    let mut report = TrainReport {
        sentences: n,
        features: model.num_features(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut ll_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
            ll_sum += step(&mut model, &mut state, &batch, cfg, &mut grad)?;
        }
        // Flushing pending shrinkage never changes the trajectory, so the
        // callback always sees eager weights.
        finalize(&mut model, &mut state, cfg);
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.dev_every > 0 && (epoch + 1) % cfg.dev_every == 0;
        let dev_f1 = match dev {
            Some(dev) if due || last => Some(evaluate(&model, dev)?),
            _ => None,
        };
        let entry = EpochReport {
            epoch: epoch + 1,
            mean_ll: ll_sum / n as f64,
            dev_f1,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        progress(&entry, &model);
        report.epochs.push(entry);
    }
    finalize(&mut model, &mut state, cfg);

    if let Some(min_support) = cfg.prune {
        let (index, remap) = model.index().prune(min_support)?;
        model.apply_prune(index, &remap);
    }
    if !model.all_finite() {
        return Err(TrainError::Divergence { line: 0 });
    }
    model.set_provenance(Some(Provenance {
        config: cfg.clone(),
        epochs: cfg.epochs,
        sentences: n,
        corpus_checksum: corpus_checksum(corpus),
        warm_start: warm,
    }));
    Ok((model, report))
}

/// Word F1 of `model` on a gold corpus (joint F1 for labeled corpora).
pub fn evaluate(model: &CrfModel, gold: &Corpus) -> Result<f64> {
    let templates = *model.templates();
    let scheme = model.scheme();
    let mut scorer = Scorer::new();
    for ex in &gold.examples {
        let tags = model.decode(ex.sentence.chars(), None, &templates)?;
        let pred = corpus::tags_to_seg(&ex.sentence, &tags, scheme)?;
        let outcome = match (&ex.labels, scheme.is_joint()) {
            (Some(labels), true) => {
                let pred_labels: Vec<String> = corpus::word_labels(&pred, &tags, scheme)
                    .into_iter()
                    .map(|l| scheme.labels()[l].clone())
                    .collect();
                scorer.add_labeled((&ex.seg, labels), (&pred, &pred_labels))
            }
            _ => scorer.add(&ex.seg, &pred),
        };
        outcome.map_err(|e| TrainError::Config(e.to_string()))?;
    }
    Ok(scorer.result().f1)
}

/// Featurizes a corpus against a model without growing its index.
pub fn instances(model: &CrfModel, corpus: &Corpus) -> Result<Vec<Instance>> {
    let templates = *model.templates();
    corpus
        .examples
        .iter()
        .map(|ex| {
            Ok(Instance {
                feats: model.featurize(ex.sentence.chars(), None, &templates),
                gold: gold_tags(ex, model.scheme())?,
                line: ex.line,
            })
        })
        .collect()
}

/// Mean log-likelihood of `corpus` under `model`.
pub fn mean_log_likelihood(model: &CrfModel, corpus: &Corpus) -> Result<f64> {
    let xs = instances(model, corpus)?;
    let mut sum = 0.0;
    for x in &xs {
        sum += model.log_likelihood(&x.feats, &x.gold)?;
    }
    Ok(sum / xs.len().max(1) as f64)
}
