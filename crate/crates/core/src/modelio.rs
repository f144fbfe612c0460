//! Binary model files and a readable weight dump.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PKSG"  u32 version  u64 body_len
//! body:
//!   scheme      u8 kind (0 bmes, 1 joint, 2 unconstrained), u32 n, n label strings (joint)
//!   templates   u8 unigrams, u8 window, u8 bigrams, u8 lexicon, u32 max_lex_len, u8 normalization
//!   features    u64 count, count strings in ID order
//!   emission    u64 count, count f64 (feature-major)
//!   transition  u64 count, count f64 (row-major)
//!   lexicon     u64 count, count strings in code-point order
//!   provenance  u8 present, then one JSON string
//! u64 CRC-64 of everything before it
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_ECMA_182};
use thiserror::Error;

use crate::corpus::{NormalizationConfig, TagScheme};
use crate::crf::CrfModel;
use crate::features::{FeatureIndex, TemplateConfig};
use crate::lexicon::Lexicon;
use crate::trainer::Provenance;

pub const MAGIC: &[u8; 4] = b"PKSG";
pub const FORMAT_VERSION: u32 = 1;
/// Names the model directory is expected to provide.
pub const KNOWN_MODELS: [&str; 5] = ["default", "news", "medicine", "tourism", "web"];
pub const MODEL_DIR_ENV: &str = "CWS_MODEL_DIR";
pub const MODEL_EXTENSION: &str = "model";

const HEADER_LEN: usize = 16;
const CHECKSUM_LEN: usize = 8;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("model file is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("model file has {0} unexpected trailing bytes")]
    TrailingBytes(u64),
    #[error("model checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("model contains non-finite weights")]
    NonFinite,
    #[error("unknown model `{name}`; available: {}", available.join(", "))]
    UnknownModel { name: String, available: Vec<String> },
}

pub type Result<T, E = ModelIoError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn strs<'a>(&mut self, items: impl ExactSizeIterator<Item = &'a str>) {
        self.u64(items.len() as u64);
        for s in items {
            self.str(s);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| ModelIoError::Malformed(format!("block overruns body at offset {}", self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(ModelIoError::Malformed(format!("bad flag byte {b}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| ModelIoError::Malformed(format!("invalid UTF-8 string: {e}")))
    }
    /// A u64 count, sanity-checked against the bytes left (each item needs
    /// at least `min_item` bytes).
    fn count(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(min_item as u64) > left {
            return Err(ModelIoError::Malformed(format!("declared count {n} exceeds the remaining body")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.str()).collect()
    }
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &CrfModel) -> Result<Vec<u8>> {
    if !model.all_finite() {
        return Err(ModelIoError::NonFinite);
    }
    let mut body = Writer(Vec::new());
    let scheme = model.scheme();
    if scheme.is_unconstrained() {
        body.u8(2);
        body.u32(scheme.num_tags() as u32);
    } else if scheme.is_joint() {
        body.u8(1);
        body.u32(scheme.labels().len() as u32);
        for label in scheme.labels() {
            body.str(label);
        }
    } else {
        body.u8(0);
        body.u32(0);
    }

    let t = model.templates();
    body.u8(t.unigrams as u8);
    body.u8(t.unigram_window);
    body.u8(t.bigrams as u8);
    body.u8(t.lexicon as u8);
    body.u32(t.max_lex_len);
    body.u8(t.normalization.to_bits());

    body.strs(model.index().strings().iter().map(String::as_str));
    body.f64s(model.emission());
    body.f64s(model.transition());
    let words = model.lexicon().words();
    body.strs(words.iter().map(String::as_str));
    match model.provenance() {
        Some(p) => {
            body.u8(1);
            body.str(&serde_json::to_string(p).map_err(|e| ModelIoError::Malformed(e.to_string()))?);
        }
        None => body.u8(0),
    }

    let body = body.0;
    let mut out = Writer(Vec::with_capacity(HEADER_LEN + body.len() + CHECKSUM_LEN));
    out.0.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);
    out.u64(body.len() as u64);
    out.0.extend_from_slice(&body);
    let checksum = CRC64.checksum(&out.0);
    out.u64(checksum);
    Ok(out.0)
}

/// Parses a model from bytes. Checks run in order: magic, version, length,
/// checksum, structure, finiteness.
pub fn from_bytes(data: &[u8]) -> Result<CrfModel> {
    if data.len() < MAGIC.len() || &data[..4] != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    if data.len() < HEADER_LEN {
        return Err(ModelIoError::Truncated {
            expected: HEADER_LEN as u64,
            found: data.len() as u64,
        });
    }
    let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let body_len = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes"));
    let expected = (HEADER_LEN as u64)
        .saturating_add(body_len)
        .saturating_add(CHECKSUM_LEN as u64);
    let found = data.len() as u64;
    if found < expected {
        return Err(ModelIoError::Truncated { expected, found });
    }
    if found > expected {
        return Err(ModelIoError::TrailingBytes(found - expected));
    }
    let split = data.len() - CHECKSUM_LEN;
    let stored = u64::from_le_bytes(data[split..].try_into().expect("8 bytes"));
    let computed = CRC64.checksum(&data[..split]);
    if stored != computed {
        return Err(ModelIoError::Checksum { stored, computed });
    }

    let mut r = Reader {
        data: &data[HEADER_LEN..split],
        pos: 0,
    };
    let kind = r.u8()?;
    let n = r.u32()? as usize;
    let scheme = match kind {
        0 => TagScheme::bmes(),
        1 if n > 0 => {
            let labels = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
            TagScheme::joint(labels)
        }
        2 if n > 0 => TagScheme::unconstrained(n),
        _ => return Err(ModelIoError::Malformed(format!("bad tag scheme kind {kind} with {n} entries"))),
    };

    let templates = TemplateConfig {
        unigrams: r.bool()?,
        unigram_window: r.u8()?,
        bigrams: r.bool()?,
        lexicon: r.bool()?,
        max_lex_len: r.u32()?,
        normalization: NormalizationConfig::from_bits(r.u8()?),
    };
    templates
        .validate()
        .map_err(|e| ModelIoError::Malformed(e.to_string()))?;

    let index = FeatureIndex::from_strings(r.strs()?);
    let emission = r.f64s()?;
    let transition = r.f64s()?;
    let lexicon: Lexicon = r.strs()?.iter().map(String::as_str).collect();
    let provenance = if r.bool()? {
        let json = r.str()?;
        Some(serde_json::from_str::<Provenance>(&json).map_err(|e| ModelIoError::Malformed(format!("provenance: {e}")))?)
    } else {
        None
    };
    if r.pos != r.data.len() {
        return Err(ModelIoError::Malformed(format!(
            "{} unread bytes after the last block",
            r.data.len() - r.pos
        )));
    }

    let mut model = CrfModel::from_parts(scheme, templates, index, lexicon, emission, transition)
        .map_err(|e| ModelIoError::Malformed(e.to_string()))?;
    if !model.all_finite() {
        return Err(ModelIoError::NonFinite);
    }
    model.set_provenance(provenance);
    Ok(model)
}

/// Writes `model` to `path` through a temporary file and an atomic rename.
pub fn save(model: &CrfModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(&bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ModelIoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CrfModel> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(io_err(path))?;
    from_bytes(&data)
}

/// Finds a model by path or by name.
///
/// An existing file path wins; otherwise `name` is looked up as
/// `<dir>/<name>.model` in `model_dir` (or `$CWS_MODEL_DIR`).
pub fn resolve(name_or_path: &str, model_dir: Option<&Path>) -> Result<PathBuf> {
    let direct = Path::new(name_or_path);
    if direct.is_file() {
        return Ok(direct.to_path_buf());
    }
    let dir = model_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from));
    if let Some(dir) = &dir {
        let candidate = dir.join(format!("{name_or_path}.{MODEL_EXTENSION}"));
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    let mut available: Vec<String> = KNOWN_MODELS.iter().map(|s| s.to_string()).collect();
    if let Some(entries) = dir.as_ref().and_then(|d| fs::read_dir(d).ok()) {
        for entry in entries.flatten() {
            let p = entry.path();
            if p.extension().is_some_and(|e| e == MODEL_EXTENSION) {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    if !available.iter().any(|a| a == stem) {
                        available.push(stem.to_string());
                    }
                }
            }
        }
    }
    Err(ModelIoError::UnknownModel {
        name: name_or_path.to_string(),
        available,
    })
}

/// Readable weight listing: `#` header lines, then one
/// `feature<TAB>tag<TAB>weight` line per emission weight with
/// `|weight| >= threshold`, largest magnitude first. Zero weights are never
/// listed.
pub fn dump_text(model: &CrfModel, threshold: f64) -> String {
    let scheme = model.scheme();
    let t = model.num_tags();
    let mut out = String::new();
    let _ = writeln!(out, "# scheme {scheme}");
    let _ = writeln!(out, "# features {} tags {}", model.num_features(), t);
    let _ = writeln!(out, "# templates {:?}", model.templates());
    let _ = writeln!(out, "# lexicon {} words", model.lexicon().len());
    if let Some(p) = model.provenance() {
        let _ = writeln!(
            out,
            "# trained {} epochs on {} sentences, corpus checksum {:016x}",
            p.epochs, p.sentences, p.corpus_checksum
        );
    }
    let names: Vec<String> = (0..t).map(|tag| scheme.tag_name(tag)).collect();
    for from in 0..t {
        let row: Vec<String> = (0..t)
            .map(|to| model.transition()[from * t + to].to_string())
            .collect();
        let _ = writeln!(out, "# transition {} {}", names[from], row.join(" "));
    }

    let mut entries: Vec<(usize, f64)> = model
        .emission()
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, w)| w != 0.0 && w.abs() >= threshold)
        .collect();
    entries.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    for (p, w) in entries {
        let _ = writeln!(out, "{}\t{}\t{}", model.index().name((p / t) as u32), names[p % t], w);
    }
    out
}
