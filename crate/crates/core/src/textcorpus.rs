//! Corpus text normalization and overlapping character-window chunking.
//!
//! Offsets and lengths are counted in Unicode scalar values (`char`), never
//! bytes, so chunk boundaries are identical on every platform.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(
        "invalid chunking config: overlap {overlap} must be smaller than chunk size {chunk_size}"
    )]
    InvalidConfig { chunk_size: usize, overlap: usize },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("document {0} is empty after normalization")]
    EmptyDocument(String),
    #[error("duplicate doc_id {0} in corpus")]
    DuplicateDocId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub text: String,
    pub source_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub text: String,
    /// Offset into the normalized document, in chars.
    pub char_start: usize,
    /// Length in chars.
    pub char_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_size: 1000,
            overlap: 200,
        }
    }
}

impl ChunkingConfig {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, CorpusError> {
        let cfg = Self {
            chunk_size,
            overlap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.chunk_size == 0 || self.overlap >= self.chunk_size {
            return Err(CorpusError::InvalidConfig {
                chunk_size: self.chunk_size,
                overlap: self.overlap,
            });
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

const ZWNJ: char = '\u{200C}';
const ZWJ: char = '\u{200D}';

enum Mapped {
    Keep(char),
    Drop,
}

fn map_char(c: char) -> Mapped {
    match c {
        // Full-width ASCII block.
        '\u{FF01}'..='\u{FF5E}' => Mapped::Keep(char::from_u32(c as u32 - 0xFEE0).unwrap_or(c)),
        '\u{3000}' => Mapped::Keep(' '),
        '\t' | '\u{000B}' | '\u{000C}' => Mapped::Keep(' '),
        '\u{00A0}' | '\u{1680}' | '\u{2000}'..='\u{200A}' | '\u{202F}' | '\u{205F}' => {
            Mapped::Keep(' ')
        }
        '\u{2028}' | '\u{2029}' | '\u{0085}' => Mapped::Keep('\n'),
        '\u{200B}' | '\u{2060}' | '\u{FEFF}' | '\u{00AD}' => Mapped::Drop,
        _ => Mapped::Keep(c),
    }
}

fn is_joiner(c: char) -> bool {
    c == ZWJ || c == ZWNJ
}

/// Cleans raw corpus or dataset text.
///
/// Folds full-width ASCII variants, maps soft whitespace to a plain space,
/// removes zero-width spaces, keeps ZWJ/ZWNJ only when they sit between two
/// visible characters, collapses space runs, trims each line and finally
/// applies canonical composition (NFC). Newlines are kept.
pub fn normalize_text(raw: &str) -> String {
    let unified = raw.replace("\r\n", "\n").replace('\r', "\n");

    let mapped: Vec<char> = unified
        .chars()
        .filter_map(|c| match map_char(c) {
            Mapped::Keep(c) => Some(c),
            Mapped::Drop => None,
        })
        .collect();

    // Joiner runs survive only when flanked by visible, non-joiner characters.
    let mut joined = Vec::with_capacity(mapped.len());
    let mut i = 0;
    while i < mapped.len() {
        let c = mapped[i];
        if is_joiner(c) {
            let start = i;
            while i < mapped.len() && is_joiner(mapped[i]) {
                i += 1;
            }
            let before = start.checked_sub(1).map(|j| mapped[j]);
            let after = mapped.get(i).copied();
            let visible = |c: Option<char>| matches!(c, Some(c) if !c.is_whitespace());
            if visible(before) && visible(after) {
                joined.extend_from_slice(&mapped[start..i]);
            }
            continue;
        }
        joined.push(c);
        i += 1;
    }

    let text: String = joined.into_iter().collect();
    let mut out = String::with_capacity(text.len());
    for (n, line) in text.split('\n').enumerate() {
        if n > 0 {
            out.push('\n');
        }
        let mut pending_space = false;
        for c in line.chars() {
            if c == ' ' {
                pending_space = true;
                continue;
            }
            if pending_space && !out.is_empty() && !out.ends_with('\n') {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out.nfc().collect()
}

/// Splits a normalized document into fixed-size overlapping character windows.
///
/// Chunk `i` starts at `i * (chunk_size - overlap)`. Emission stops once a
/// chunk reaches the end of the document, so a document of exactly
/// `chunk_size` chars yields one chunk. An empty document yields none.
pub fn chunk_text(doc: &RawDocument, cfg: &ChunkingConfig) -> Result<Vec<Chunk>, CorpusError> {
    cfg.validate()?;
    let chars: Vec<char> = doc.text.chars().collect();
    let len = chars.len();
    let stride = cfg.stride();

    let mut chunks = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + cfg.chunk_size).min(len);
        chunks.push(Chunk {
            chunk_id: format!("{}#{:06}", doc.doc_id, chunks.len()),
            text: chars[start..end].iter().collect(),
            char_start: start,
            char_len: end - start,
        });
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Chunks every document of a corpus, preserving document order.
pub fn chunk_corpus(docs: &[RawDocument], cfg: &ChunkingConfig) -> Result<Vec<Chunk>, CorpusError> {
    let mut all = Vec::new();
    for doc in docs {
        all.extend(chunk_text(doc, cfg)?);
    }
    Ok(all)
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestFile {
    #[serde(default)]
    documents: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestEntry {
    path: PathBuf,
    doc_id: String,
    #[serde(default)]
    source_label: String,
}

/// Loads a corpus described by a TOML manifest of `[[documents]]` tables
/// (`path`, `doc_id`, `source_label`). Relative paths resolve against the
/// manifest's directory. Every document is normalized on load.
pub fn load_corpus(manifest: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let raw = fs::read_to_string(manifest).map_err(|source| CorpusError::Io {
        path: manifest.to_path_buf(),
        source,
    })?;
    let parsed: ManifestFile = toml::from_str(&raw).map_err(|e| CorpusError::Manifest {
        path: manifest.to_path_buf(),
        message: e.to_string(),
    })?;
    if parsed.documents.is_empty() {
        return Err(CorpusError::Manifest {
            path: manifest.to_path_buf(),
            message: "no [[documents]] entries".into(),
        });
    }
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::with_capacity(parsed.documents.len());
    for entry in parsed.documents {
        if !seen.insert(entry.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(entry.doc_id));
        }
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        let body = fs::read_to_string(&path).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        let text = normalize_text(&body);
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyDocument(entry.doc_id));
        }
        docs.push(RawDocument {
            doc_id: entry.doc_id,
            text,
            source_label: entry.source_label,
        });
    }
    Ok(docs)
}
