//! Sentences, segmented-corpus parsing and the BMES tag codec.
//!
//! A [`Sentence`] is a character view over an owned UTF-8 string. A
//! [`Segmentation`] is a list of half-open character spans that tile the
//! sentence. The codec maps segmentations to per-character tags under a
//! [`TagScheme`], which is either plain BMES or BMES crossed with an open set
//! of POS labels.

use std::fmt;
use std::io::BufRead;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("tag sequence has {got} tags for a sentence of {expected} characters")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid segmentation: {0}")]
    InvalidSpans(String),
    #[error("POS label `{0}` is not part of the tag scheme")]
    UnknownLabel(String),
    #[error("scheme mismatch: {0}")]
    SchemeMismatch(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// A line of text decomposed into Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    raw: String,
    chars: Vec<char>,
    offsets: Vec<usize>,
}

impl Sentence {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let (offsets, chars) = raw.char_indices().unzip();
        Self { raw, chars, offsets }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Byte offset of every character in [`Sentence::raw`].
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// The substring covering characters `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        let from = self.byte_offset(start);
        let to = self.byte_offset(end);
        &self.raw[from..to]
    }

    fn byte_offset(&self, idx: usize) -> usize {
        if idx == self.chars.len() {
            self.raw.len()
        } else {
            self.offsets[idx]
        }
    }
}

/// Half-open character spans tiling a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segmentation {
    spans: Vec<(usize, usize)>,
}

impl Segmentation {
    /// Validates that `spans` are non-empty, contiguous and cover `0..len`.
    pub fn from_spans(spans: Vec<(usize, usize)>, len: usize) -> Result<Self> {
        let mut cursor = 0;
        for &(start, end) in &spans {
            if start != cursor {
                return Err(CorpusError::InvalidSpans(format!(
                    "span ({start},{end}) does not start at {cursor}"
                )));
            }
            if end <= start {
                return Err(CorpusError::InvalidSpans(format!(
                    "span ({start},{end}) is empty"
                )));
            }
            cursor = end;
        }
        if cursor != len {
            return Err(CorpusError::InvalidSpans(format!(
                "spans cover {cursor} of {len} characters"
            )));
        }
        Ok(Self { spans })
    }

    /// Builds the segmentation whose words have the given character lengths.
    /// Zero lengths are ignored.
    pub fn from_word_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut spans = Vec::new();
        let mut cursor = 0;
        for len in lengths.into_iter().filter(|&l| l > 0) {
            spans.push((cursor, cursor + len));
            cursor += len;
        }
        Self { spans }
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn num_words(&self) -> usize {
        self.spans.len()
    }

    /// Number of characters covered.
    pub fn char_len(&self) -> usize {
        self.spans.last().map_or(0, |&(_, end)| end)
    }

    pub fn words<'a>(&self, sentence: &'a Sentence) -> Vec<&'a str> {
        self.spans
            .iter()
            .map(|&(start, end)| sentence.slice(start, end))
            .collect()
    }
}

/// Position of a character inside its word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    B,
    M,
    E,
    S,
}

impl Position {
    pub const ALL: [Position; 4] = [Position::B, Position::M, Position::E, Position::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Self {
        Self::ALL[idx % 4]
    }

    fn symbol(self) -> char {
        match self {
            Position::B => 'B',
            Position::M => 'M',
            Position::E => 'E',
            Position::S => 'S',
        }
    }

    fn continues_word(self) -> bool {
        matches!(self, Position::B | Position::M)
    }
}

/// One tag ID per character.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagSeq(pub Vec<usize>);

impl TagSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SchemeKind {
    Bmes,
    Joint,
    Unconstrained(usize),
}

/// Tag inventory plus the legal-transition structure.
///
/// Joint tags are numbered `label * 4 + position`. The unconstrained scheme
/// has no word structure and admits every path; it exists for raw lattice
/// work and does not support the segmentation codec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagScheme {
    kind: SchemeKind,
    labels: Vec<String>,
    num_tags: usize,
    mask: Vec<bool>,
    start: Vec<bool>,
    end: Vec<bool>,
}

impl TagScheme {
    pub fn bmes() -> Self {
        Self::build(SchemeKind::Bmes, Vec::new())
    }

    /// BMES crossed with `labels`; within-word transitions keep the label.
    pub fn joint(labels: Vec<String>) -> Self {
        assert!(!labels.is_empty(), "joint scheme needs at least one label");
        Self::build(SchemeKind::Joint, labels)
    }

    pub fn unconstrained(num_tags: usize) -> Self {
        assert!(num_tags > 0);
        Self::build(SchemeKind::Unconstrained(num_tags), Vec::new())
    }

    fn build(kind: SchemeKind, labels: Vec<String>) -> Self {
        let num_tags = match kind {
            SchemeKind::Bmes => 4,
            SchemeKind::Joint => 4 * labels.len(),
            SchemeKind::Unconstrained(n) => n,
        };
        let mut scheme = Self {
            kind,
            labels,
            num_tags,
            mask: vec![true; num_tags * num_tags],
            start: vec![true; num_tags],
            end: vec![true; num_tags],
        };
        if !matches!(scheme.kind, SchemeKind::Unconstrained(_)) {
            for from in 0..num_tags {
                let (pf, lf) = scheme.split(from);
                scheme.start[from] = matches!(pf, Position::B | Position::S);
                scheme.end[from] = matches!(pf, Position::E | Position::S);
                for to in 0..num_tags {
                    let (pt, lt) = scheme.split(to);
                    let legal = if pf.continues_word() {
                        matches!(pt, Position::M | Position::E) && lf == lt
                    } else {
                        matches!(pt, Position::B | Position::S)
                    };
                    scheme.mask[from * num_tags + to] = legal;
                }
            }
        }
        scheme
    }

    fn split(&self, tag: usize) -> (Position, usize) {
        (Position::from_index(tag % 4), tag / 4)
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn is_joint(&self) -> bool {
        self.kind == SchemeKind::Joint
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self.kind, SchemeKind::Unconstrained(_))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn allowed(&self, from: usize, to: usize) -> bool {
        self.mask[from * self.num_tags + to]
    }

    pub fn allowed_start(&self, tag: usize) -> bool {
        self.start[tag]
    }

    pub fn allowed_end(&self, tag: usize) -> bool {
        self.end[tag]
    }

    /// Word position of `tag`; `None` for the unconstrained scheme.
    pub fn position(&self, tag: usize) -> Option<Position> {
        if self.is_unconstrained() {
            None
        } else {
            Some(self.split(tag).0)
        }
    }

    /// Label index of a joint tag.
    pub fn label_of(&self, tag: usize) -> Option<usize> {
        self.is_joint().then(|| tag / 4)
    }

    pub fn tag(&self, position: Position, label: usize) -> usize {
        if self.is_joint() {
            label * 4 + position.index()
        } else {
            position.index()
        }
    }

    pub fn tag_name(&self, tag: usize) -> String {
        match self.kind {
            SchemeKind::Bmes => Position::from_index(tag).symbol().to_string(),
            SchemeKind::Joint => {
                let (p, l) = self.split(tag);
                format!("{}-{}", p.symbol(), self.labels[l])
            }
            SchemeKind::Unconstrained(_) => format!("T{tag}"),
        }
    }

    /// True if `tags` is a complete legal path.
    pub fn is_valid_path(&self, tags: &[usize]) -> bool {
        let Some((&first, &last)) = tags.first().zip(tags.last()) else {
            return true;
        };
        tags.iter().all(|&t| t < self.num_tags)
            && self.allowed_start(first)
            && self.allowed_end(last)
            && tags.windows(2).all(|w| self.allowed(w[0], w[1]))
    }
}

impl fmt::Display for TagScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SchemeKind::Bmes => write!(f, "bmes"),
            SchemeKind::Joint => write!(f, "bmes+pos({})", self.labels.len()),
            SchemeKind::Unconstrained(n) => write!(f, "unconstrained({n})"),
        }
    }
}

/// Splits a training line into whitespace-separated words.
///
/// Returns `None` for blank lines, which callers drop.
pub fn parse_segmented_line(line: &str) -> Option<(Sentence, Segmentation)> {
    let mut raw = String::with_capacity(line.len());
    let mut lengths = Vec::new();
    for token in line.split_whitespace() {
        raw.push_str(token);
        lengths.push(token.chars().count());
    }
    if lengths.is_empty() {
        return None;
    }
    Some((Sentence::new(raw), Segmentation::from_word_lengths(lengths)))
}

/// A POS-annotated line split into words and labels.
pub type PosLine = (Sentence, Segmentation, Vec<String>);

/// Parses `word/label` tokens; the label follows the last `/`.
pub fn parse_pos_line(line: &str, line_no: usize) -> Result<Option<PosLine>> {
    let mut raw = String::with_capacity(line.len());
    let mut lengths = Vec::new();
    let mut labels = Vec::new();
    for token in line.split_whitespace() {
        let malformed = |reason: String| CorpusError::Malformed { line: line_no, reason };
        let (word, label) = token
            .rsplit_once('/')
            .ok_or_else(|| malformed(format!("token `{token}` has no `/label` suffix")))?;
        if word.is_empty() || label.is_empty() {
            return Err(malformed(format!("token `{token}` has an empty word or label")));
        }
        raw.push_str(word);
        lengths.push(word.chars().count());
        labels.push(label.to_string());
    }
    if lengths.is_empty() {
        return Ok(None);
    }
    Ok(Some((
        Sentence::new(raw),
        Segmentation::from_word_lengths(lengths),
        labels,
    )))
}

/// Encodes a segmentation as BMES tags. Joint schemes need one label index
/// per word.
pub fn seg_to_tags(seg: &Segmentation, scheme: &TagScheme, labels: Option<&[usize]>) -> Result<TagSeq> {
    if scheme.is_unconstrained() {
        return Err(CorpusError::SchemeMismatch("unconstrained scheme has no word structure"));
    }
    let labels = match (scheme.is_joint(), labels) {
        (true, Some(l)) if l.len() == seg.num_words() => Some(l),
        (true, Some(_)) => return Err(CorpusError::SchemeMismatch("one label per word required")),
        (true, None) => return Err(CorpusError::SchemeMismatch("joint scheme requires labels")),
        (false, _) => None,
    };
    let mut tags = Vec::with_capacity(seg.char_len());
    for (w, &(start, end)) in seg.spans().iter().enumerate() {
        let label = labels.map_or(0, |l| l[w]);
        if end - start == 1 {
            tags.push(scheme.tag(Position::S, label));
        } else {
            tags.push(scheme.tag(Position::B, label));
            tags.extend(std::iter::repeat_n(scheme.tag(Position::M, label), end - start - 2));
            tags.push(scheme.tag(Position::E, label));
        }
    }
    Ok(TagSeq(tags))
}

/// Decodes tags into word spans.
///
/// Ill-formed sequences are repaired: a word closes at every E or S, a B
/// closes any open word before starting a new one, and an open word at the
/// end of the sentence closes there. No character is ever dropped.
pub fn tags_to_seg(sentence: &Sentence, tags: &TagSeq, scheme: &TagScheme) -> Result<Segmentation> {
    if tags.len() != sentence.len() {
        return Err(CorpusError::LengthMismatch {
            expected: sentence.len(),
            got: tags.len(),
        });
    }
    if scheme.is_unconstrained() {
        return Err(CorpusError::SchemeMismatch("unconstrained scheme has no word structure"));
    }
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &tag) in tags.as_slice().iter().enumerate() {
        match Position::from_index(tag % 4) {
            Position::B => {
                if let Some(start) = open.replace(i) {
                    spans.push((start, i));
                }
            }
            Position::M => {
                open.get_or_insert(i);
            }
            Position::E => {
                let start = open.take().unwrap_or(i);
                spans.push((start, i + 1));
            }
            Position::S => {
                if let Some(start) = open.take() {
                    spans.push((start, i));
                }
                spans.push((i, i + 1));
            }
        }
    }
    if let Some(start) = open {
        spans.push((start, tags.len()));
    }
    Ok(Segmentation { spans })
}

/// Label index of each word, read from the tag of its first character.
pub fn word_labels(seg: &Segmentation, tags: &TagSeq, scheme: &TagScheme) -> Vec<usize> {
    seg.spans()
        .iter()
        .map(|&(start, _)| scheme.label_of(tags.0[start]).unwrap_or(0))
        .collect()
}

/// Placeholder standing for any decimal digit in the feature view.
pub const DIGIT_CLASS: char = '\u{E000}';
/// Placeholder standing for any Latin letter in the feature view.
pub const LATIN_CLASS: char = '\u{E001}';

/// Character rewrites applied to the feature view only. All off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NormalizationConfig {
    pub fullwidth: bool,
    pub digits: bool,
    pub latin: bool,
}

impl NormalizationConfig {
    pub fn all() -> Self {
        Self {
            fullwidth: true,
            digits: true,
            latin: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.fullwidth || self.digits || self.latin)
    }

    pub fn to_bits(self) -> u8 {
        (self.fullwidth as u8) | (self.digits as u8) << 1 | (self.latin as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Self {
        Self {
            fullwidth: bits & 1 != 0,
            digits: bits & 2 != 0,
            latin: bits & 4 != 0,
        }
    }

    pub fn union(self, other: Self) -> Self {
        Self::from_bits(self.to_bits() | other.to_bits())
    }

    /// The character sequence templates see. Same length as the input.
    pub fn feature_view(&self, chars: &[char]) -> Vec<char> {
        chars.iter().map(|&c| self.map_char(c)).collect()
    }

    fn map_char(&self, c: char) -> char {
        let half = to_halfwidth(c);
        if self.digits && half.is_ascii_digit() {
            DIGIT_CLASS
        } else if self.latin && half.is_ascii_alphabetic() {
            LATIN_CLASS
        } else if self.fullwidth {
            half
        } else {
            c
        }
    }
}

fn to_halfwidth(c: char) -> char {
    match c {
        '\u{3000}' => ' ',
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        _ => c,
    }
}

/// Renders a feature view with readable class placeholders.
pub fn render_view(view: &[char]) -> String {
    let mut out = String::new();
    for &c in view {
        match c {
            DIGIT_CLASS => out.push_str("⟨DIGIT⟩"),
            LATIN_CLASS => out.push_str("⟨LATIN⟩"),
            _ => out.push(c),
        }
    }
    out
}

/// One training sentence with its gold words and optional POS labels.
#[derive(Debug, Clone)]
pub struct Example {
    pub sentence: Sentence,
    pub seg: Segmentation,
    pub labels: Option<Vec<String>>,
    /// 1-based source line.
    pub line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub examples: Vec<Example>,
    /// Blank lines dropped while reading.
    pub skipped: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.examples.iter().any(|e| e.labels.is_some())
    }

    /// Distinct POS labels in first-seen order.
    pub fn label_set(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for label in self.examples.iter().flat_map(|e| e.labels.iter().flatten()) {
            if !seen.contains(label) {
                seen.push(label.clone());
            }
        }
        seen
    }
}

/// Reads a segmented corpus, one sentence per line. With `pos`, tokens are
/// `word/label`.
pub fn read_corpus<R: BufRead>(reader: R, pos: bool) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let parsed = if pos {
            parse_pos_line(&line, line_no)?.map(|(s, g, l)| (s, g, Some(l)))
        } else {
            parse_segmented_line(&line).map(|(s, g)| (s, g, None))
        };
        match parsed {
            Some((sentence, seg, labels)) => corpus.examples.push(Example {
                sentence,
                seg,
                labels,
                line: line_no,
            }),
            None => corpus.skipped += 1,
        }
    }
    Ok(corpus)
}
