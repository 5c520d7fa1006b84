//! MCQ dataset loading, option-marker parsing, structural validation and
//! deduplication.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::textcorpus::normalize_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionKey {
    A,
    B,
    C,
    D,
}

impl OptionKey {
    pub const ALL: [OptionKey; 4] = [OptionKey::A, OptionKey::B, OptionKey::C, OptionKey::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        ["A", "B", "C", "D"][self.index()]
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Accepts exactly one Latin letter A–D, either case.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "A" | "a" => Some(OptionKey::A),
            "B" | "b" => Some(OptionKey::B),
            "C" | "c" => Some(OptionKey::C),
            "D" | "d" => Some(OptionKey::D),
            _ => None,
        }
    }
}

impl fmt::Display for OptionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqRecord {
    pub id: String,
    pub question: String,
    /// Option texts indexed by [`OptionKey::index`].
    pub options: [String; 4],
    pub answer_key: OptionKey,
    pub rationale: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl McqRecord {
    pub fn option(&self, key: OptionKey) -> &str {
        &self.options[key.index()]
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        for key in OptionKey::ALL {
            if self.option(key).trim().is_empty() {
                return Err(format!("option {key} is empty"));
            }
        }
        Ok(())
    }
}

/// Options as they arrive from a source file, before validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawOptions {
    /// Separate `(label, text)` fields.
    Labeled(Vec<(String, String)>),
    /// All options inside one text with inline markers. `None` means the
    /// markers are embedded in the question itself.
    Embedded(Option<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    /// 1-based data row (header excluded) or line number.
    pub row: usize,
    pub id: Option<String>,
    pub question: String,
    pub options: RawOptions,
    pub answer: Option<String>,
    pub rationale: Option<String>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadOptionLabels,
    MissingOptions,
    MissingAnswer,
    Duplicate,
    ParseFailure,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BadOptionLabels => "bad_option_labels",
            RejectReason::MissingOptions => "missing_options",
            RejectReason::MissingAnswer => "missing_answer",
            RejectReason::Duplicate => "duplicate",
            RejectReason::ParseFailure => "parse_failure",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub row: usize,
    pub id: Option<String>,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub accepted: Vec<McqRecord>,
    pub rejected: Vec<Rejection>,
}

impl ValidationReport {
    pub fn input_count(&self) -> usize {
        self.accepted.len() + self.rejected.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing required column(s) {missing:?}")]
    MissingColumns { path: PathBuf, missing: Vec<String> },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("failed to write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    Jsonl,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(DatasetFormat::Csv),
            "jsonl" | "ndjson" => Some(DatasetFormat::Jsonl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionParseErrorKind {
    Missing(OptionKey),
    OutOfOrder(OptionKey),
    Repeated(OptionKey),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}", self.describe())]
pub struct OptionParseError {
    pub kind: OptionParseErrorKind,
    /// Char offset of the offending marker, or the text length for a
    /// missing marker.
    pub position: usize,
}

impl OptionParseError {
    fn describe(&self) -> String {
        match self.kind {
            OptionParseErrorKind::Missing(k) => format!(
                "missing option marker {k} (scanned to char {})",
                self.position
            ),
            OptionParseErrorKind::OutOfOrder(k) => {
                format!("option marker {k} out of order at char {}", self.position)
            }
            OptionParseErrorKind::Repeated(k) => {
                format!("option marker {k} repeated at char {}", self.position)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOptions {
    pub question: String,
    pub options: [String; 4],
}

fn marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)([ABCD])[.):]").unwrap())
}

fn foreign_marker_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)\(?([কখগঘ]|[1-4]|[১-৪])[.):।]").unwrap())
}

struct Marker {
    key: OptionKey,
    /// Byte range of the label and its punctuation.
    start: usize,
    end: usize,
}

fn find_markers(text: &str) -> Vec<Marker> {
    marker_regex()
        .captures_iter(text)
        .filter_map(|caps| {
            let label = caps.get(1)?;
            let whole = caps.get(0)?;
            // Label must be followed by whitespace or a letter.
            let next = text[whole.end()..].chars().next();
            if !matches!(next, Some(c) if c.is_whitespace() || c.is_alphabetic()) {
                return None;
            }
            Some(Marker {
                key: OptionKey::parse(label.as_str())?,
                start: label.start(),
                end: whole.end(),
            })
        })
        .collect()
}

fn char_pos(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

/// Splits text with inline `A.` / `B)` / `C:` style markers into a question
/// stem and four options. Markers must appear exactly once each, in order.
pub fn parse_options(raw_text: &str) -> Result<ParsedOptions, OptionParseError> {
    let markers = find_markers(raw_text);
    let mut expected = 0usize;
    let mut accepted: Vec<&Marker> = Vec::with_capacity(4);
    for m in &markers {
        let idx = m.key.index();
        if idx == expected {
            accepted.push(m);
            expected += 1;
            continue;
        }
        let position = char_pos(raw_text, m.start);
        let kind = if idx < expected {
            OptionParseErrorKind::Repeated(m.key)
        } else if accepted.is_empty() && expected == 0 {
            OptionParseErrorKind::OutOfOrder(m.key)
        } else {
            OptionParseErrorKind::Missing(OptionKey::from_index(expected).unwrap())
        };
        return Err(OptionParseError { kind, position });
    }
    if accepted.len() < 4 {
        return Err(OptionParseError {
            kind: OptionParseErrorKind::Missing(OptionKey::from_index(accepted.len()).unwrap()),
            position: raw_text.chars().count(),
        });
    }

    let question = raw_text[..accepted[0].start].trim().to_string();
    let mut options: [String; 4] = Default::default();
    for (i, m) in accepted.iter().enumerate() {
        let end = accepted
            .get(i + 1)
            .map(|n| n.start)
            .unwrap_or(raw_text.len());
        options[i] = raw_text[m.end..end].trim().to_string();
    }
    Ok(ParsedOptions { question, options })
}

/// True when the text carries at least two Bangla-letter or numeric option
/// markers (ক. খ. … or 1. 2. …).
pub fn has_foreign_markers(text: &str) -> bool {
    let labels: HashSet<&str> = foreign_marker_regex()
        .captures_iter(text)
        .filter_map(|c| c.get(1).map(|m| m.as_str()))
        .collect();
    labels.len() >= 2
}

fn is_foreign_label(label: &str) -> bool {
    let l = label
        .trim()
        .trim_matches(|c| matches!(c, '(' | ')' | '.' | ':' | '।'));
    matches!(
        l,
        "ক" | "খ" | "গ" | "ঘ" | "1" | "2" | "3" | "4" | "১" | "২" | "৩" | "৪"
    )
}

fn clean_label(label: &str) -> String {
    label
        .trim()
        .trim_matches(|c| matches!(c, '(' | ')' | '.' | ':'))
        .trim()
        .to_string()
}

/// Validates and normalizes one raw record. Rejections are data.
pub fn validate_record(raw: &RawRecord) -> Result<McqRecord, Rejection> {
    let reject = |reason: RejectReason, detail: String| Rejection {
        row: raw.row,
        id: raw.id.clone(),
        reason,
        detail,
    };
    let mut question = normalize_text(&raw.question).trim().to_string();

    let options: [String; 4] = match &raw.options {
        RawOptions::Labeled(pairs) => {
            let mut slots: [Option<String>; 4] = Default::default();
            for (label, text) in pairs {
                let cleaned = clean_label(label);
                let Some(key) = OptionKey::parse(&cleaned).filter(|_| cleaned.len() == 1) else {
                    return Err(reject(
                        RejectReason::BadOptionLabels,
                        format!("option label {label:?} is not one of A-D"),
                    ));
                };
                if slots[key.index()].is_some() {
                    return Err(reject(
                        RejectReason::MissingOptions,
                        format!("option {key} given more than once"),
                    ));
                }
                slots[key.index()] = Some(normalize_text(text).trim().to_string());
            }
            let mut out: [String; 4] = Default::default();
            for key in OptionKey::ALL {
                match slots[key.index()].take() {
                    Some(t) if !t.is_empty() => out[key.index()] = t,
                    _ => {
                        return Err(reject(
                            RejectReason::MissingOptions,
                            format!("option {key} missing or empty"),
                        ))
                    }
                }
            }
            out
        }
        RawOptions::Embedded(field) => {
            let source = match field {
                Some(f) => normalize_text(f),
                None => question.clone(),
            };
            match parse_options(&source) {
                Ok(parsed) => {
                    match field {
                        None => question = parsed.question,
                        Some(_) if !parsed.question.is_empty() => {
                            question = format!("{question} {}", parsed.question).trim().to_string();
                        }
                        Some(_) => {}
                    }
                    if let Some(i) = parsed.options.iter().position(|o| o.is_empty()) {
                        return Err(reject(
                            RejectReason::MissingOptions,
                            format!("option {} is empty", OptionKey::ALL[i]),
                        ));
                    }
                    parsed.options
                }
                Err(_) if has_foreign_markers(&source) => {
                    return Err(reject(
                        RejectReason::BadOptionLabels,
                        "options labelled with Bangla letters or numerals".into(),
                    ))
                }
                Err(e) => return Err(reject(RejectReason::ParseFailure, e.to_string())),
            }
        }
    };

    if question.is_empty() {
        return Err(reject(RejectReason::ParseFailure, "empty question".into()));
    }

    let answer_raw = raw
        .answer
        .as_deref()
        .map(normalize_text)
        .unwrap_or_default();
    let answer_clean = clean_label(&answer_raw);
    let answer_key = if answer_clean.is_empty() {
        return Err(reject(RejectReason::MissingAnswer, "no answer key".into()));
    } else if let Some(k) = OptionKey::parse(&answer_clean).filter(|_| answer_clean.len() == 1) {
        k
    } else if let Some(i) = options.iter().position(|o| *o == answer_clean) {
        OptionKey::ALL[i]
    } else if is_foreign_label(&answer_clean) {
        return Err(reject(
            RejectReason::BadOptionLabels,
            format!("answer key {answer_clean:?} uses a non-Latin label"),
        ));
    } else {
        return Err(reject(
            RejectReason::MissingAnswer,
            format!("answer key {answer_clean:?} is not one of A-D"),
        ));
    };

    let rationale = raw
        .rationale
        .as_deref()
        .map(|r| normalize_text(r).trim().to_string())
        .filter(|r| !r.is_empty());

    let record = McqRecord {
        id: raw.id.clone().unwrap_or_else(|| synthesized_id(raw.row)),
        question,
        options,
        answer_key,
        rationale,
        metadata: raw.metadata.clone(),
    };
    debug_assert!(record.check_invariants().is_ok());
    Ok(record)
}

pub fn synthesized_id(row: usize) -> String {
    format!("row-{row:05}")
}

fn dedup_text(s: &str) -> String {
    normalize_text(s)
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Duplicate key: normalized question plus the sorted normalized options.
pub fn dedup_key(r: &McqRecord) -> (String, Vec<String>) {
    let mut opts: Vec<String> = r.options.iter().map(|o| dedup_text(o)).collect();
    opts.sort();
    (dedup_text(&r.question), opts)
}

/// Keeps the first occurrence of each duplicate key; later ones are
/// rejected with reason `duplicate`. `rows` gives each record's source row
/// (defaults to its 1-based position).
pub fn dedup(records: Vec<McqRecord>) -> ValidationReport {
    let rows: Vec<usize> = (1..=records.len()).collect();
    dedup_with_rows(records, &rows)
}

fn dedup_with_rows(records: Vec<McqRecord>, rows: &[usize]) -> ValidationReport {
    let mut seen: std::collections::HashMap<(String, Vec<String>), String> = Default::default();
    let mut report = ValidationReport::default();
    for (r, &row) in records.into_iter().zip(rows) {
        let key = dedup_key(&r);
        if let Some(first) = seen.get(&key) {
            report.rejected.push(Rejection {
                row,
                id: Some(r.id.clone()),
                reason: RejectReason::Duplicate,
                detail: format!("duplicate of {first}"),
            });
        } else {
            seen.insert(key, r.id.clone());
            report.accepted.push(r);
        }
    }
    report
}

/// Records that survived validation plus per-row rejections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadedDataset {
    pub records: Vec<McqRecord>,
    /// Source row of each record in `records`.
    pub rows: Vec<usize>,
    pub rejected: Vec<Rejection>,
}

const REQUIRED_COLUMNS: &[&str] = &["question", "answer"];
const OPTION_COLUMNS: [&str; 4] = ["option_a", "option_b", "option_c", "option_d"];
const KNOWN_COLUMNS: &[&str] = &[
    "id",
    "question",
    "option_a",
    "option_b",
    "option_c",
    "option_d",
    "options",
    "answer",
    "rationale",
];

/// Loads a dataset file. Malformed or invalid rows become rejections and
/// loading continues; an unreadable file is an error.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LoadedDataset, DatasetError> {
    let raws = match format {
        DatasetFormat::Csv => read_csv(path)?,
        DatasetFormat::Jsonl => read_jsonl(path)?,
    };
    let mut out = LoadedDataset::default();
    for item in raws {
        match item.and_then(|raw| validate_record(&raw).map(|r| (raw.row, r))) {
            Ok((row, rec)) => {
                out.records.push(rec);
                out.rows.push(row);
            }
            Err(rej) => out.rejected.push(rej),
        }
    }
    let mut ids = HashSet::new();
    for (rec, row) in out.records.iter().zip(&out.rows) {
        if !ids.insert(rec.id.clone()) {
            return Err(DatasetError::Format {
                path: path.to_path_buf(),
                message: format!("duplicate id {} at row {row}", rec.id),
            });
        }
    }
    Ok(out)
}

/// load → validate → dedup. Rejections are ordered by source row.
pub fn clean_dataset(path: &Path, format: DatasetFormat) -> Result<ValidationReport, DatasetError> {
    let loaded = load_dataset(path, format)?;
    let mut report = dedup_with_rows(loaded.records, &loaded.rows);
    report.rejected.extend(loaded.rejected);
    report.rejected.sort_by_key(|r| r.row);
    Ok(report)
}

fn read_csv(path: &Path) -> Result<Vec<Result<RawRecord, Rejection>>, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes.as_slice());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| DatasetError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().trim_start_matches('\u{FEFF}').to_ascii_lowercase())
        .collect();
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingColumns {
            path: path.to_path_buf(),
            missing,
        });
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let option_cols: Vec<Option<usize>> = OPTION_COLUMNS.iter().map(|c| col(c)).collect();
    let has_option_cols = option_cols.iter().any(Option::is_some);

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.push(Err(Rejection {
                    row,
                    id: None,
                    reason: RejectReason::ParseFailure,
                    detail: format!("malformed csv row: {e}"),
                }));
                continue;
            }
        };
        let get = |idx: Option<usize>| idx.and_then(|j| rec.get(j)).map(str::to_string);
        let non_empty = |s: Option<String>| s.filter(|v| !v.trim().is_empty());
        let options = if has_option_cols {
            RawOptions::Labeled(
                OptionKey::ALL
                    .iter()
                    .zip(&option_cols)
                    .map(|(k, c)| (k.as_str().to_string(), get(*c).unwrap_or_default()))
                    .collect(),
            )
        } else {
            RawOptions::Embedded(non_empty(get(col("options"))))
        };
        let metadata = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| !KNOWN_COLUMNS.contains(&h.as_str()))
            .filter_map(|(j, h)| rec.get(j).map(|v| (h.clone(), v.to_string())))
            .collect();
        out.push(Ok(RawRecord {
            row,
            id: non_empty(get(col("id"))).map(|s| s.trim().to_string()),
            question: get(col("question")).unwrap_or_default(),
            options,
            answer: get(col("answer")),
            rationale: non_empty(get(col("rationale"))),
            metadata,
        }));
    }
    Ok(out)
}

fn value_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<Result<RawRecord, Rejection>>, DatasetError> {
    let body = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    let mut row = 0;
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let parse_fail = |detail: String| Rejection {
            row,
            id: None,
            reason: RejectReason::ParseFailure,
            detail,
        };
        let obj = match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(map)) => map,
            Ok(_) => {
                out.push(Err(parse_fail("line is not a JSON object".into())));
                continue;
            }
            Err(e) => {
                out.push(Err(parse_fail(format!("malformed json: {e}"))));
                continue;
            }
        };
        let field = |k: &str| obj.get(k).and_then(value_text);
        let options = if OPTION_COLUMNS.iter().any(|c| obj.contains_key(*c)) {
            RawOptions::Labeled(
                OptionKey::ALL
                    .iter()
                    .zip(OPTION_COLUMNS)
                    .map(|(k, c)| (k.as_str().to_string(), field(c).unwrap_or_default()))
                    .collect(),
            )
        } else {
            match obj.get("options") {
                Some(Value::Object(m)) => RawOptions::Labeled(
                    m.iter()
                        .map(|(k, v)| (k.clone(), value_text(v).unwrap_or_default()))
                        .collect(),
                ),
                Some(Value::Array(items)) => RawOptions::Labeled(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let label = OptionKey::from_index(i)
                                .map(|k| k.as_str().to_string())
                                .unwrap_or_else(|| (i + 1).to_string());
                            (label, value_text(v).unwrap_or_default())
                        })
                        .collect(),
                ),
                Some(Value::String(s)) if !s.trim().is_empty() => {
                    RawOptions::Embedded(Some(s.clone()))
                }
                _ => RawOptions::Embedded(None),
            }
        };
        let metadata = obj
            .iter()
            .filter(|(k, _)| !KNOWN_COLUMNS.contains(&k.as_str()))
            .filter_map(|(k, v)| value_text(v).map(|t| (k.clone(), t)))
            .collect();
        out.push(Ok(RawRecord {
            row,
            id: field("id").filter(|s| !s.trim().is_empty()),
            question: field("question").unwrap_or_default(),
            options,
            answer: field("answer"),
            rationale: field("rationale").filter(|s| !s.trim().is_empty()),
            metadata,
        }));
    }
    Ok(out)
}

/// Writes records in the canonical CSV layout.
pub fn write_dataset_csv(records: &[McqRecord], path: &Path) -> Result<(), DatasetError> {
    let err = |e: &dyn fmt::Display| DatasetError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record([
        "id",
        "question",
        "option_a",
        "option_b",
        "option_c",
        "option_d",
        "answer",
        "rationale",
    ])
    .map_err(|e| err(&e))?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            &r.question,
            &r.options[0],
            &r.options[1],
            &r.options[2],
            &r.options[3],
            r.answer_key.as_str(),
            r.rationale.as_deref().unwrap_or(""),
        ])
        .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

/// Writes the rejection report (`row,reason,detail`).
pub fn write_rejections(rejections: &[Rejection], path: &Path) -> Result<(), DatasetError> {
    let err = |e: &dyn fmt::Display| DatasetError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record(["row", "reason", "detail"])
        .map_err(|e| err(&e))?;
    for r in rejections {
        w.write_record([r.row.to_string().as_str(), r.reason.as_str(), &r.detail])
            .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(row: usize, q: &str, opts: [&str; 4], answer: &str) -> RawRecord {
        RawRecord {
            row,
            id: Some(format!("q{row}")),
            question: q.into(),
            options: RawOptions::Labeled(
                OptionKey::ALL
                    .iter()
                    .zip(opts)
                    .map(|(k, o)| (k.as_str().to_string(), o.to_string()))
                    .collect(),
            ),
            answer: Some(answer.into()),
            rationale: None,
            metadata: BTreeMap::new(),
        }
    }

    fn record(id: &str, q: &str, opts: [&str; 4]) -> McqRecord {
        McqRecord {
            id: id.into(),
            question: q.into(),
            options: opts.map(String::from),
            answer_key: OptionKey::A,
            rationale: None,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn parses_mixed_markers() {
        let p = parse_options("What is X? A. foo B) bar C: baz D. qux").unwrap();
        assert_eq!(p.question, "What is X?");
        assert_eq!(p.options, ["foo", "bar", "baz", "qux"].map(String::from));
    }

    #[test]
    fn missing_marker_fails() {
        let e = parse_options("Q? A. foo C. baz").unwrap_err();
        assert_eq!(e.kind, OptionParseErrorKind::Missing(OptionKey::B));
    }

    #[test]
    fn repeated_and_out_of_order_markers_fail() {
        let e = parse_options("Q? A. x B. y A. z C. w D. v").unwrap_err();
        assert_eq!(e.kind, OptionParseErrorKind::Repeated(OptionKey::A));
        let e = parse_options("Q? B. x A. y C. z D. w").unwrap_err();
        assert_eq!(e.kind, OptionParseErrorKind::OutOfOrder(OptionKey::B));
        assert_eq!(e.position, 3);
    }

    #[test]
    fn marker_needs_token_boundary() {
        // "NaCl." ends in a letter followed by '.', not a marker.
        let p = parse_options("Salt is NaCl.D? A. x B. y C. z D. w").unwrap();
        assert_eq!(p.question, "Salt is NaCl.D?");
        // Vitamin "A" inside a word position is not followed by a marker char.
        let p = parse_options("Vitamin A deficiency? A) night blindness B) x C) y D) z").unwrap();
        assert_eq!(p.options[0], "night blindness");
    }

    #[test]
    fn bangla_option_text() {
        let p = parse_options("কোনটি সঠিক? A. কোষ B. টিস্যু C. অঙ্গ D. তন্ত্র").unwrap();
        assert_eq!(p.question, "কোনটি সঠিক?");
        assert_eq!(p.options[3], "তন্ত্র");
    }

    #[test]
    fn separate_fields_pass_through() {
        let raw = labeled(1, "Q?", ["a", "b", "c", "d"], "B");
        let r = validate_record(&raw).unwrap();
        assert_eq!(r.question, "Q?");
        assert_eq!(r.options, ["a", "b", "c", "d"].map(String::from));
        assert_eq!(r.answer_key, OptionKey::B);
    }

    #[test]
    fn bangla_labels_rejected() {
        let mut raw = labeled(1, "প্রশ্ন?", ["a", "b", "c", "d"], "ক");
        raw.options = RawOptions::Labeled(vec![
            ("ক".into(), "a".into()),
            ("খ".into(), "b".into()),
            ("গ".into(), "c".into()),
            ("ঘ".into(), "d".into()),
        ]);
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::BadOptionLabels
        );

        let embedded = RawRecord {
            options: RawOptions::Embedded(None),
            question: "প্রশ্ন? ক. কোষ খ. টিস্যু গ. অঙ্গ ঘ. তন্ত্র".into(),
            answer: Some("ক".into()),
            ..labeled(2, "", ["", "", "", ""], "")
        };
        assert_eq!(
            validate_record(&embedded).unwrap_err().reason,
            RejectReason::BadOptionLabels
        );

        let numeric = RawRecord {
            options: RawOptions::Embedded(None),
            question: "Q? 1. x 2. y 3. z 4. w".into(),
            ..labeled(3, "", ["", "", "", ""], "1")
        };
        assert_eq!(
            validate_record(&numeric).unwrap_err().reason,
            RejectReason::BadOptionLabels
        );
    }

    #[test]
    fn answer_outside_range_rejected() {
        let raw = labeled(1, "Q?", ["a", "b", "c", "d"], "E");
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::MissingAnswer
        );
        let raw = labeled(1, "Q?", ["a", "b", "c", "d"], "");
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::MissingAnswer
        );
    }

    #[test]
    fn answer_by_option_text_and_punctuation() {
        let raw = labeled(1, "Q?", ["alpha", "beta", "gamma", "delta"], "gamma");
        assert_eq!(validate_record(&raw).unwrap().answer_key, OptionKey::C);
        let raw = labeled(1, "Q?", ["alpha", "beta", "gamma", "delta"], "(d)");
        assert_eq!(validate_record(&raw).unwrap().answer_key, OptionKey::D);
    }

    #[test]
    fn missing_and_duplicate_options_rejected() {
        let raw = labeled(1, "Q?", ["a", "b", "", "d"], "A");
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::MissingOptions
        );
        let mut raw = labeled(1, "Q?", ["a", "b", "c", "d"], "A");
        raw.options = RawOptions::Labeled(vec![
            ("A".into(), "a".into()),
            ("A".into(), "b".into()),
            ("C".into(), "c".into()),
            ("D".into(), "d".into()),
        ]);
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::MissingOptions
        );
        let mut raw = labeled(1, "Q?", ["a", "b", "c", "d"], "A");
        raw.options = RawOptions::Labeled(vec![
            ("A".into(), "a".into()),
            ("B".into(), "b".into()),
            ("C".into(), "c".into()),
        ]);
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::MissingOptions
        );
    }

    #[test]
    fn embedded_parse_failure() {
        let raw = RawRecord {
            options: RawOptions::Embedded(None),
            question: "Q? A. foo C. baz".into(),
            ..labeled(1, "", ["", "", "", ""], "A")
        };
        assert_eq!(
            validate_record(&raw).unwrap_err().reason,
            RejectReason::ParseFailure
        );
    }

    #[test]
    fn synthesized_id_when_absent() {
        let mut raw = labeled(7, "Q?", ["a", "b", "c", "d"], "A");
        raw.id = None;
        assert_eq!(validate_record(&raw).unwrap().id, "row-00007");
    }

    #[test]
    fn dedup_whitespace_variant() {
        // By hand: "What  is X ?" and "What is X ?" collapse to the same key.
        let a = record("1", "What is X ?", ["a", "b", "c", "d"]);
        let b = record("2", "What  is   X ?", ["a", "b", "c", "d"]);
        assert_eq!(dedup_key(&a), dedup_key(&b));
        let rep = dedup(vec![a, b]);
        assert_eq!(rep.accepted.len(), 1);
        assert_eq!(rep.accepted[0].id, "1");
        assert_eq!(rep.rejected[0].reason, RejectReason::Duplicate);
        assert_eq!(rep.rejected[0].row, 2);
    }

    #[test]
    fn dedup_keeps_different_options() {
        let a = record("1", "Q?", ["a", "b", "c", "d"]);
        let b = record("2", "Q?", ["a", "b", "c", "e"]);
        assert_eq!(dedup(vec![a, b]).accepted.len(), 2);
        assert_eq!(dedup(vec![]), ValidationReport::default());
    }

    #[test]
    fn dedup_ignores_option_order_and_latin_case() {
        let a = record("1", "Which is Largest?", ["Alpha", "b", "c", "d"]);
        let b = record("2", "which is largest?", ["d", "c", "b", "alpha"]);
        assert_eq!(dedup(vec![a, b]).accepted.len(), 1);
    }

    #[test]
    fn csv_loading_with_permuted_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "id,question,option_a,option_b,option_c,option_d,answer,rationale\n1,Q1?,a,b,c,d,A,r1\n2,Q2?,e,f,g,h,B,\n3,\"Q3, with comma\",i,j,k,l,C,\"says \"\"hi\"\"\"\n").unwrap();
        fs::write(&b, "answer,rationale,option_d,option_c,option_b,option_a,question,id\nA,r1,d,c,b,a,Q1?,1\nB,,h,g,f,e,Q2?,2\nC,\"says \"\"hi\"\"\",l,k,j,i,\"Q3, with comma\",3\n").unwrap();
        let la = load_dataset(&a, DatasetFormat::Csv).unwrap();
        let lb = load_dataset(&b, DatasetFormat::Csv).unwrap();
        assert_eq!(la.records.len(), 3);
        assert_eq!(la.records, lb.records);
        assert_eq!(la.records[2].rationale.as_deref(), Some("says \"hi\""));
        assert_eq!(la.records[1].rationale, None);
    }

    #[test]
    fn csv_malformed_row_is_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut body = String::from("id,question,option_a,option_b,option_c,option_d,answer\n");
        for i in 0..10 {
            if i == 4 {
                body.push_str("bad,row,with,too,few\n");
            } else {
                body.push_str(&format!("{i},Q{i}?,a{i},b,c,d,A\n"));
            }
        }
        fs::write(&p, body).unwrap();
        let l = load_dataset(&p, DatasetFormat::Csv).unwrap();
        assert_eq!(l.records.len(), 9);
        assert_eq!(l.rejected.len(), 1);
        assert_eq!(l.rejected[0].reason, RejectReason::ParseFailure);
        assert_eq!(l.rejected[0].row, 5);
    }

    #[test]
    fn csv_missing_required_column_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "id,option_a\n1,x\n").unwrap();
        assert!(matches!(
            load_dataset(&p, DatasetFormat::Csv),
            Err(DatasetError::MissingColumns { .. })
        ));
        assert!(matches!(
            load_dataset(&dir.path().join("nope.csv"), DatasetFormat::Csv),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn csv_embedded_options_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(
            &p,
            "question,answer,year\n\"Q？ A. x B. y C. z D. w\",b,2019\n",
        )
        .unwrap();
        let l = load_dataset(&p, DatasetFormat::Csv).unwrap();
        let r = &l.records[0];
        assert_eq!(r.question, "Q?");
        assert_eq!(r.options[1], "y");
        assert_eq!(r.answer_key, OptionKey::B);
        assert_eq!(r.metadata.get("year").map(String::as_str), Some("2019"));
        assert_eq!(r.id, "row-00001");
    }

    #[test]
    fn jsonl_variants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let lines = [
            r#"{"id":"j1","question":"Q1?","option_a":"a","option_b":"b","option_c":"c","option_d":"d","answer":"A"}"#,
            r#"{"id":"j2","question":"Q2?","options":{"A":"a","B":"b","C":"c","D":"d"},"answer":"D","exam_year":2020}"#,
            r#"{"id":"j3","question":"Q3?","options":["a","b","c","d"],"answer":"C"}"#,
            r#"{"id":"j4","question":"Q4?","options":"A. a B. b C. c D. d","answer":"B"}"#,
            r#"{"id":"j5","question":"Q5?","options":{"ক":"a","খ":"b","গ":"c","ঘ":"d"},"answer":"ক"}"#,
            r#"{not json"#,
            "",
        ];
        fs::write(&p, lines.join("\n")).unwrap();
        let l = load_dataset(&p, DatasetFormat::Jsonl).unwrap();
        assert_eq!(l.records.len(), 4);
        assert_eq!(
            l.records[1].metadata.get("exam_year").map(String::as_str),
            Some("2020")
        );
        assert_eq!(l.records[3].question, "Q4?");
        let reasons: Vec<_> = l.rejected.iter().map(|r| r.reason).collect();
        assert_eq!(
            reasons,
            vec![RejectReason::BadOptionLabels, RejectReason::ParseFailure]
        );
    }

    #[test]
    fn normalization_applied_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"question\":\"ক\u{00A0}খ?\",\"options\":[\"\u{FF21}\",\"b\",\"c\",\"d\"],\"answer\":\"A\"}\n").unwrap();
        let l = load_dataset(&p, DatasetFormat::Jsonl).unwrap();
        assert_eq!(l.records[0].question, "ক খ?");
        assert_eq!(l.records[0].options[0], "A");
    }

    fn arb_record() -> impl Strategy<Value = McqRecord> {
        let word = prop::sample::select(vec!["x", "y", "X", "z", "কোষ"]);
        (
            prop::collection::vec(word.clone(), 1..3),
            prop::collection::vec(word, 4),
            0usize..1000,
        )
            .prop_map(|(q, opts, n)| McqRecord {
                id: format!("r{n}"),
                question: q.join(if n % 2 == 0 { " " } else { "  " }),
                options: [
                    opts[0].into(),
                    opts[1].into(),
                    opts[2].into(),
                    opts[3].into(),
                ],
                answer_key: OptionKey::A,
                rationale: None,
                metadata: BTreeMap::new(),
            })
    }

    proptest! {
        #[test]
        fn dedup_idempotent(records in prop::collection::vec(arb_record(), 0..20)) {
            let n = records.len();
            let first = dedup(records);
            prop_assert_eq!(first.input_count(), n);
            let again = dedup(first.accepted.clone());
            prop_assert!(again.rejected.is_empty());
            prop_assert_eq!(again.accepted, first.accepted);
        }
    }
}
