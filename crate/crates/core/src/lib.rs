//! Multi-domain Chinese word segmentation.
//!
//! Text is tagged per character with BMES positions (optionally crossed with
//! POS labels) by a first-order linear-chain CRF. Features come from
//! character n-gram templates and longest-match lookups in a word lexicon.
//! Models are trained online with per-parameter learning rates that decay
//! with how often each parameter has been updated, can be fine-tuned from a
//! pre-trained model, and are stored in a single checksummed binary file.

pub mod cli;
pub mod corpus;
pub mod crf;
pub mod features;
pub mod eval;
pub mod lexicon;
pub mod modelio;
pub mod segmenter;
pub mod synthetic;
pub mod trainer;
