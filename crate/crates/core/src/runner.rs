//! Experiment orchestration: configuration, bounded-parallel execution,
//! resumable result persistence, reports and report comparison.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{self, DatasetError, DatasetFormat, McqRecord, OptionKey};
use crate::evalmetrics::{self, MetricOptions, PrfScore, TextScores, TokenEmbedder};
use crate::providers::http::{
    credential_from_env, HttpPages, OpenAiCompatChat, OpenAiCompatEmbed, SerperSearch,
};
use crate::providers::mock::{HashChat, HashEmbedder, MockPages, MockSearch};
use crate::providers::{
    CallLog, CallRuntime, EmbedBackend, ProviderError, Providers, ResponseCache, RetryPolicy,
    SearchBackend, ThreadSleeper,
};
use crate::strategies::{
    Confidence, DecisionKind, Pipeline, PredictedOption, Prediction, PromptSet, Route, Strategy,
    StrategySettings,
};
use crate::textcorpus::{self, Chunk, ChunkingConfig, CorpusError};
use crate::vecindex::{self, IndexError};

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const REJECTIONS_FILE: &str = "rejections.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const STATE_FILE: &str = "run_state.json";
pub const CALL_LOG_FILE: &str = "calls.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Results { path: PathBuf, message: String },
}

impl RunError {
    /// 1 for problems detectable before any provider call, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Dataset(_) | RunError::Corpus(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    /// Inferred from the extension when absent.
    #[serde(default)]
    pub format: Option<DatasetFormat>,
}

impl DatasetSource {
    pub fn resolved_format(&self) -> Result<DatasetFormat, RunError> {
        self.format
            .or_else(|| DatasetFormat::from_path(&self.path))
            .ok_or_else(|| {
                RunError::Config(format!(
                    "cannot infer dataset format of {}",
                    self.path.display()
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub manifest: PathBuf,
    #[serde(default)]
    pub chunking: ChunkingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub chat_base_url: String,
    pub chat_key_env: String,
    /// Empty means token embeddings come from the local hash embedder.
    pub embed_base_url: String,
    pub embed_model: String,
    pub embed_key_env: String,
    pub search_endpoint: String,
    pub search_key_env: String,
    pub min_interval_ms: u64,
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
    pub mock_embed_dim: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Mock,
            chat_base_url: "https://api.groq.com/openai/v1".into(),
            chat_key_env: "GROQ_API_KEY".into(),
            embed_base_url: String::new(),
            embed_model: String::new(),
            embed_key_env: "EMBED_API_KEY".into(),
            search_endpoint: "https://google.serper.dev/search".into(),
            search_key_env: "SERPER_API_KEY".into(),
            min_interval_ms: 0,
            max_attempts: 4,
            base_delay_ms: 1000,
            backoff_factor: 2.0,
            mock_embed_dim: 64,
        }
    }
}

impl ProviderConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            base_delay: Duration::from_millis(self.base_delay_ms),
            backoff_factor: self.backoff_factor,
            ..RetryPolicy::default()
        }
    }
}

fn default_concurrency() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub corpus: Option<CorpusSource>,
    #[serde(default)]
    pub settings: StrategySettings,
    #[serde(default)]
    pub providers: ProviderConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset.path);
        fix(&mut cfg.output_dir);
        if let Some(c) = cfg.corpus.as_mut() {
            fix(&mut c.manifest);
        }
        if let Some(p) = cfg.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.prompts_dir.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.strategy.needs_corpus() && self.corpus.is_none() {
            return bad(format!(
                "strategy {} needs a [corpus] section",
                self.strategy
            ));
        }
        if let Some(c) = &self.corpus {
            c.chunking
                .validate()
                .map_err(|e| RunError::Config(e.to_string()))?;
        }
        self.dataset.resolved_format()?;
        self.settings.validate().map_err(RunError::Config)?;
        if self.metrics.rouge_l_beta.is_nan() || self.metrics.rouge_l_beta <= 0.0 {
            return bad("metrics.rouge_l_beta must be positive".into());
        }
        self.providers
            .retry_policy()
            .validate()
            .map_err(RunError::Config)?;
        Ok(())
    }

    pub fn load_prompts(&self) -> Result<PromptSet, RunError> {
        let set = match &self.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)
                .map_err(|e| RunError::Config(format!("{}: {e}", dir.display())))?,
            None => PromptSet::default(),
        };
        set.validate().map_err(RunError::Config)?;
        Ok(set)
    }

    /// The configuration as recorded in reports. Settings that cannot
    /// change results (worker count, output and cache locations) are left
    /// out so that equivalent runs produce identical reports.
    pub fn echo(&self, prompts: &PromptSet) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("concurrency");
            map.remove("output_dir");
            map.remove("cache_dir");
            map.remove("prompts_dir");
            map.insert(
                "prompts_sha256".into(),
                Value::String(prompts_digest(prompts)),
            );
        }
        v
    }
}

fn prompts_digest(p: &PromptSet) -> String {
    let mut h = Sha256::new();
    for t in [
        &p.zero_shot,
        &p.local_rag,
        &p.web_rag,
        &p.router,
        &p.summarize,
        &p.extract_terms,
        &p.self_check,
        &p.format_retry,
    ] {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn config_hash(echo: &Value) -> String {
    hex::encode(Sha256::digest(echo.to_string().as_bytes()))
}

/// Builds providers from configuration. In HTTP mode credentials are read
/// from the named environment variables; a missing one is a config error.
pub fn build_providers(
    cfg: &ExperimentConfig,
    call_log: Option<&Path>,
) -> Result<Providers, RunError> {
    let pc = &cfg.providers;
    let log = match call_log {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            CallLog::with_file(p).map_err(io_err(p))?
        }
        None => CallLog::in_memory(),
    };
    let runtime = Arc::new(CallRuntime::new(
        pc.retry_policy(),
        Arc::new(ThreadSleeper),
        Duration::from_millis(pc.min_interval_ms),
        Arc::new(log),
    ));
    let hash_embed: Arc<dyn EmbedBackend> = Arc::new(HashEmbedder::new(pc.mock_embed_dim.max(1)));
    let providers = match pc.mode {
        ProviderMode::Mock => Providers::with_runtime(
            runtime,
            Arc::new(HashChat),
            hash_embed,
            Arc::new(MockSearch::with_hits(0)),
            Arc::new(MockPages::new()),
        ),
        ProviderMode::Http => {
            let cred =
                |var: &str| credential_from_env(var).map_err(|e| RunError::Config(e.to_string()));
            let chat = OpenAiCompatChat::new(&pc.chat_base_url, Some(cred(&pc.chat_key_env)?));
            let embed: Arc<dyn EmbedBackend> = if pc.embed_base_url.trim().is_empty() {
                tracing::warn!("no embedding endpoint configured; using the local hash embedder");
                hash_embed
            } else {
                let key = std::env::var(&pc.embed_key_env)
                    .ok()
                    .filter(|k| !k.trim().is_empty());
                Arc::new(OpenAiCompatEmbed::new(
                    &pc.embed_base_url,
                    &pc.embed_model,
                    key,
                ))
            };
            let uses_web = matches!(cfg.strategy, Strategy::WebFallback | Strategy::Agentic);
            let search: Arc<dyn SearchBackend> = if uses_web {
                Arc::new(SerperSearch::new(
                    &pc.search_endpoint,
                    cred(&pc.search_key_env)?,
                ))
            } else {
                Arc::new(MockSearch::from_fn(|_, _| {
                    Err(ProviderError::Other("web search not configured".into()))
                }))
            };
            Providers::with_runtime(runtime, Arc::new(chat), embed, search, Arc::new(HttpPages))
        }
    };
    Ok(match &cfg.cache_dir {
        Some(dir) => {
            let dir = dir.join("responses");
            let cache = ResponseCache::open(&dir).map_err(io_err(&dir))?;
            providers.with_cache(Arc::new(cache))
        }
        None => providers,
    })
}

/// One row of the results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub question_id: String,
    pub gold: OptionKey,
    pub predicted: PredictedOption,
    pub route: Route,
    pub confidence: Option<Confidence>,
    pub decision_kind: Option<DecisionKind>,
    pub attempts: u32,
    pub gold_rationale: Option<String>,
    pub rationale: String,
    /// Absent when there is no gold rationale.
    pub scores: Option<TextScores>,
    /// Retrieval trace as compact JSON.
    pub trace: String,
    pub notes: String,
}

impl ResultRow {
    pub fn correct(&self) -> bool {
        self.predicted.key() == Some(self.gold)
    }
}

pub const RESULT_COLUMNS: [&str; 26] = [
    "question_id",
    "gold",
    "predicted",
    "correct",
    "route",
    "confidence",
    "decision_kind",
    "attempts",
    "gold_rationale",
    "rationale",
    "bert_f1",
    "meteor",
    "rouge1_p",
    "rouge1_r",
    "rouge1_f",
    "rouge2_p",
    "rouge2_r",
    "rouge2_f",
    "rougeL_p",
    "rougeL_r",
    "rougeL_f",
    "bleu1",
    "bleu2",
    "strategy",
    "trace",
    "notes",
];

fn csv_fields(row: &ResultRow, strategy: &str) -> Vec<String> {
    let num = |v: f64| v.to_string();
    let prf = |p: &PrfScore| [num(p.precision), num(p.recall), num(p.f)];
    let metric_cells: Vec<String> = match &row.scores {
        Some(s) => {
            let mut v = vec![num(s.bert_f1), num(s.meteor)];
            v.extend(prf(&s.rouge1));
            v.extend(prf(&s.rouge2));
            v.extend(prf(&s.rouge_l));
            v.push(num(s.bleu1));
            v.push(num(s.bleu2));
            v
        }
        None => vec![String::new(); 13],
    };
    let mut out = vec![
        row.question_id.clone(),
        row.gold.as_str().into(),
        row.predicted.as_str().into(),
        u8::from(row.correct()).to_string(),
        row.route.as_str().into(),
        row.confidence.map(|c| c.as_str()).unwrap_or("").into(),
        row.decision_kind.map(|d| d.as_str()).unwrap_or("").into(),
        row.attempts.to_string(),
        row.gold_rationale.clone().unwrap_or_default(),
        row.rationale.clone(),
    ];
    out.extend(metric_cells);
    out.push(strategy.into());
    out.push(row.trace.clone());
    out.push(row.notes.clone());
    out
}

fn csv_writer(file: File) -> csv::Writer<File> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file)
}

/// Writes rows (with header) in the given order.
pub fn write_results_csv(
    rows: &[ResultRow],
    strategy: Strategy,
    path: &Path,
) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv_writer(file);
    let wr = |e: csv::Error| RunError::Results {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(RESULT_COLUMNS).map_err(wr)?;
    for r in rows {
        w.write_record(csv_fields(r, strategy.as_str()))
            .map_err(wr)?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_enum<T>(
    cell: &str,
    what: &str,
    f: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>, String> {
    if cell.is_empty() {
        return Ok(None);
    }
    f(cell)
        .map(Some)
        .ok_or_else(|| format!("bad {what} {cell:?}"))
}

fn parse_route(s: &str) -> Option<Route> {
    [Route::Local, Route::Web, Route::ZeroShot, Route::NullAnswer]
        .into_iter()
        .find(|r| r.as_str() == s)
}

fn parse_confidence(s: &str) -> Option<Confidence> {
    [Confidence::High, Confidence::Medium, Confidence::Low]
        .into_iter()
        .find(|c| c.as_str() == s)
}

fn parse_decision(s: &str) -> Option<DecisionKind> {
    [
        DecisionKind::Majority,
        DecisionKind::Unanimous,
        DecisionKind::Tie,
    ]
    .into_iter()
    .find(|d| d.as_str() == s)
}

fn row_from_record(rec: &csv::StringRecord) -> Result<ResultRow, String> {
    if rec.len() != RESULT_COLUMNS.len() {
        return Err(format!(
            "expected {} fields, got {}",
            RESULT_COLUMNS.len(),
            rec.len()
        ));
    }
    let f = |i: usize| rec.get(i).unwrap_or("");
    let num = |i: usize| {
        f(i).parse::<f64>()
            .map_err(|e| format!("{}: {e}", RESULT_COLUMNS[i]))
    };
    let prf = |i: usize| -> Result<PrfScore, String> {
        Ok(PrfScore {
            precision: num(i)?,
            recall: num(i + 1)?,
            f: num(i + 2)?,
        })
    };
    let scores = if f(10).is_empty() {
        None
    } else {
        Some(TextScores {
            bert_f1: num(10)?,
            meteor: num(11)?,
            rouge1: prf(12)?,
            rouge2: prf(15)?,
            rouge_l: prf(18)?,
            bleu1: num(21)?,
            bleu2: num(22)?,
        })
    };
    let row = ResultRow {
        question_id: f(0).to_string(),
        gold: OptionKey::parse(f(1)).ok_or_else(|| format!("bad gold {:?}", f(1)))?,
        predicted: PredictedOption::parse(f(2))
            .ok_or_else(|| format!("bad prediction {:?}", f(2)))?,
        route: parse_route(f(4)).ok_or_else(|| format!("bad route {:?}", f(4)))?,
        confidence: parse_enum(f(5), "confidence", parse_confidence)?,
        decision_kind: parse_enum(f(6), "decision kind", parse_decision)?,
        attempts: f(7).parse().map_err(|e| format!("attempts: {e}"))?,
        gold_rationale: Some(f(8).to_string()).filter(|s| !s.is_empty()),
        rationale: f(9).to_string(),
        scores,
        trace: f(24).to_string(),
        notes: f(25).to_string(),
    };
    if f(3) != if row.correct() { "1" } else { "0" } {
        return Err(format!("correct flag {:?} disagrees with prediction", f(3)));
    }
    Ok(row)
}

/// Reads a results file written by [`write_results_csv`].
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, RunError> {
    let bad = |message: String| RunError::Results {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(RESULT_COLUMNS.iter().copied()) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(row_from_record(&rec).map_err(|m| bad(format!("row {}: {m}", i + 1)))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub bert_f1: f64,
    pub meteor: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_f: f64,
    pub bleu1: f64,
    pub bleu2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: Value,
    pub config_hash: String,
    /// Questions with a result row.
    pub n: usize,
    /// Questions accepted from the dataset.
    pub dataset_size: usize,
    pub complete: bool,
    pub n_correct: usize,
    pub accuracy: f64,
    pub failures: usize,
    pub null_answers: usize,
    /// Rows with a gold rationale; the metric means average over these.
    pub n_scored: usize,
    pub means: Option<MetricMeans>,
    pub routes: BTreeMap<String, usize>,
    pub confidence: BTreeMap<String, usize>,
    pub decisions: BTreeMap<String, usize>,
}

pub fn build_report(rows: &[ResultRow], config: Value, dataset_size: usize) -> EvaluationReport {
    let n = rows.len();
    let n_correct = rows.iter().filter(|r| r.correct()).count();
    let scored: Vec<&TextScores> = rows.iter().filter_map(|r| r.scores.as_ref()).collect();
    let mean = |f: &dyn Fn(&TextScores) -> f64| {
        scored.iter().map(|s| f(s)).sum::<f64>() / scored.len() as f64
    };
    let means = (!scored.is_empty()).then(|| MetricMeans {
        bert_f1: mean(&|s| s.bert_f1),
        meteor: mean(&|s| s.meteor),
        rouge1_f: mean(&|s| s.rouge1.f),
        rouge2_f: mean(&|s| s.rouge2.f),
        rouge_l_f: mean(&|s| s.rouge_l.f),
        bleu1: mean(&|s| s.bleu1),
        bleu2: mean(&|s| s.bleu2),
    });
    let mut routes = BTreeMap::new();
    let mut confidence = BTreeMap::new();
    let mut decisions = BTreeMap::new();
    for r in rows {
        *routes.entry(r.route.as_str().to_string()).or_insert(0) += 1;
        if let Some(c) = r.confidence {
            *confidence.entry(c.as_str().to_string()).or_insert(0) += 1;
        }
        if let Some(d) = r.decision_kind {
            *decisions.entry(d.as_str().to_string()).or_insert(0) += 1;
        }
    }
    EvaluationReport {
        config_hash: config_hash(&config),
        config,
        n,
        dataset_size,
        complete: n == dataset_size,
        n_correct,
        accuracy: if n == 0 {
            0.0
        } else {
            n_correct as f64 / n as f64
        },
        failures: rows
            .iter()
            .filter(|r| r.predicted == PredictedOption::Failed)
            .count(),
        null_answers: rows
            .iter()
            .filter(|r| r.predicted == PredictedOption::NA)
            .count(),
        n_scored: scored.len(),
        means,
        routes,
        confidence,
        decisions,
    }
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn report_rows(r: &EvaluationReport) -> Vec<(&'static str, Option<f64>)> {
    let m = r.means;
    vec![
        ("Accuracy", Some(r.accuracy)),
        ("BERT", m.map(|m| m.bert_f1)),
        ("METEOR", m.map(|m| m.meteor)),
        ("ROUGE-1", m.map(|m| m.rouge1_f)),
        ("ROUGE-2", m.map(|m| m.rouge2_f)),
        ("ROUGE-L", m.map(|m| m.rouge_l_f)),
        ("BLEU-1", m.map(|m| m.bleu1)),
        ("BLEU-2", m.map(|m| m.bleu2)),
    ]
}

/// Plain-text rendering with 4-decimal metrics.
pub fn render_report(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let get = |k: &str| {
        r.config
            .get(k)
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string()
    };
    let model = r
        .config
        .pointer("/settings/model_id")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let _ = writeln!(out, "{:<14}{}", "Strategy", get("strategy"));
    let _ = writeln!(out, "{:<14}{}", "Model", model);
    let _ = writeln!(out, "{:<14}{}", "N", r.n);
    for (name, v) in report_rows(r) {
        let _ = writeln!(out, "{name:<14}{}", fmt4(v));
    }
    let _ = writeln!(out, "{:<14}{}", "Scored", r.n_scored);
    let _ = writeln!(out, "{:<14}{}", "Failures", r.failures);
    let _ = writeln!(out, "{:<14}{}", "Null answers", r.null_answers);
    for (label, map) in [
        ("Route", &r.routes),
        ("Confidence", &r.confidence),
        ("Decision", &r.decisions),
    ] {
        for (k, v) in map {
            let _ = writeln!(out, "{:<14}{v}", format!("{label} {k}"));
        }
    }
    if !r.complete {
        let _ = writeln!(out, "{:<14}{} of {}", "Incomplete", r.n, r.dataset_size);
    }
    out
}

pub fn write_report(r: &EvaluationReport, dir: &Path) -> Result<(PathBuf, PathBuf), RunError> {
    let json = dir.join(REPORT_JSON);
    let text = dir.join(REPORT_TEXT);
    let mut body = serde_json::to_string_pretty(r).expect("report serializes");
    body.push('\n');
    fs::write(&json, body).map_err(io_err(&json))?;
    fs::write(&text, render_report(r)).map_err(io_err(&text))?;
    Ok((json, text))
}

pub fn read_report(path: &Path) -> Result<EvaluationReport, RunError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&body).map_err(|e| RunError::Results {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl ComparisonRow {
    pub fn delta(&self) -> Option<f64> {
        Some(self.b? - self.a?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub n: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side metrics with deltas (b − a). Both reports must cover the
/// same number of questions.
pub fn compare_reports(a: &EvaluationReport, b: &EvaluationReport) -> Result<Comparison, RunError> {
    if a.n != b.n {
        return Err(RunError::Config(format!(
            "reports cover different N ({} vs {})",
            a.n, b.n
        )));
    }
    let label = |r: &EvaluationReport| {
        let s = r
            .config
            .get("strategy")
            .and_then(Value::as_str)
            .unwrap_or("?");
        let m = r
            .config
            .pointer("/settings/model_id")
            .and_then(Value::as_str)
            .unwrap_or("?");
        format!("{s}/{m}")
    };
    let rows = report_rows(a)
        .into_iter()
        .zip(report_rows(b))
        .map(|((metric, va), (_, vb))| ComparisonRow {
            metric,
            a: va,
            b: vb,
        })
        .collect();
    Ok(Comparison {
        label_a: label(a),
        label_b: label(b),
        n: a.n,
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "a", "b", "delta"]).unwrap();
        for r in &self.rows {
            w.write_record([r.metric.to_string(), fmt4(r.a), fmt4(r.b), fmt4(r.delta())])
                .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_text(&self) -> String {
        let wa = self.label_a.len().max(8);
        let wb = self.label_b.len().max(8);
        let mut out = format!(
            "N = {}\n{:<10}  {:>wa$}  {:>wb$}  {:>8}\n",
            self.n, "Metric", self.label_a, self.label_b, "Delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10}  {:>wa$}  {:>wb$}  {:>8}",
                r.metric,
                fmt4(r.a),
                fmt4(r.b),
                fmt4(r.delta())
            );
        }
        out
    }
}

/// Writes normalized chunks of the corpus as JSON lines.
pub fn ingest_corpus(
    manifest: &Path,
    chunking: &ChunkingConfig,
    out: &Path,
) -> Result<Vec<Chunk>, RunError> {
    let docs = textcorpus::load_corpus(manifest)?;
    let chunks = textcorpus::chunk_corpus(&docs, chunking)?;
    let mut body = String::new();
    for c in &chunks {
        body.push_str(&serde_json::to_string(c).expect("chunk serializes"));
        body.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(out, body).map_err(io_err(out))?;
    Ok(chunks)
}

pub fn read_chunks(path: &Path) -> Result<Vec<Chunk>, RunError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Results {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn index_dir(cache_dir: &Path) -> PathBuf {
    cache_dir.join("index")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Discard existing results instead of resuming.
    pub fresh: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub results_path: PathBuf,
    pub report_path: PathBuf,
    pub report: EvaluationReport,
    /// Questions answered by this invocation (not resumed).
    pub answered: usize,
    /// Set when a provider outage stopped the run early.
    pub aborted: Option<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_some() || !self.report.complete {
            2
        } else {
            0
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    config_hash: String,
}

/// Rows of a previous run that form a prefix of `records`.
fn resumable_prefix(path: &Path, records: &[McqRecord]) -> Vec<ResultRow> {
    let Ok(rows) = read_results_csv(path) else {
        return Vec::new();
    };
    rows.into_iter()
        .zip(records)
        .take_while(|(row, rec)| row.question_id == rec.id)
        .map(|(row, _)| row)
        .collect()
}

fn score_row(
    record: &McqRecord,
    pred: &Prediction,
    embedder: &dyn TokenEmbedder,
    opts: &MetricOptions,
) -> Result<ResultRow, ProviderError> {
    let scores = match &record.rationale {
        Some(gold) => Some(evalmetrics::score_text(
            &pred.rationale,
            gold,
            embedder,
            opts,
        )?),
        None => None,
    };
    Ok(ResultRow {
        question_id: record.id.clone(),
        gold: record.answer_key,
        predicted: pred.option,
        route: pred.route,
        confidence: pred.confidence,
        decision_kind: pred.decision_kind,
        attempts: pred.attempts,
        gold_rationale: record.rationale.clone(),
        rationale: pred.rationale.clone(),
        scores,
        trace: serde_json::to_string(&pred.retrieval_trace).expect("trace serializes"),
        notes: pred.notes.join("; "),
    })
}

/// Recomputes rationale scores for an existing results file.
pub fn rescore(
    rows: &[ResultRow],
    embedder: &dyn TokenEmbedder,
    opts: &MetricOptions,
) -> Result<Vec<ResultRow>, ProviderError> {
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            if let Some(gold) = &r.gold_rationale {
                r.scores = Some(evalmetrics::score_text(&r.rationale, gold, embedder, opts)?);
            }
            Ok(r)
        })
        .collect()
}

/// Per-question generator: the root seed with the question's position as
/// the stream, so worker scheduling never changes the draws.
pub fn question_rng(seed: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    rng
}

/// Runs an experiment end to end with the given providers.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    providers: &Providers,
    opts: &RunOptions,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let prompts = cfg.load_prompts()?;
    let echo = cfg.echo(&prompts);
    let hash = config_hash(&echo);
    let out_dir = &cfg.output_dir;
    let state_path = out_dir.join(STATE_FILE);
    let results_path = out_dir.join(RESULTS_FILE);

    if !opts.fresh {
        if let Ok(body) = fs::read_to_string(&state_path) {
            let prev: Option<RunState> = serde_json::from_str(&body).ok();
            if prev.map(|s| s.config_hash) != Some(hash.clone()) && results_path.exists() {
                return Err(RunError::Config(format!(
                    "{} holds results of a different configuration; use a new output directory or start fresh",
                    out_dir.display()
                )));
            }
        }
    }

    let format = cfg.dataset.resolved_format()?;
    let cleaned = dataset::clean_dataset(&cfg.dataset.path, format)?;
    let records = cleaned.accepted;
    let corpus_docs = match (&cfg.corpus, cfg.strategy.needs_corpus()) {
        (Some(c), true) => Some((textcorpus::load_corpus(&c.manifest)?, c.chunking)),
        _ => None,
    };

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    dataset::write_rejections(&cleaned.rejected, &out_dir.join(REJECTIONS_FILE))?;
    let state = serde_json::to_string_pretty(&RunState { config_hash: hash }).unwrap();
    fs::write(&state_path, state).map_err(io_err(&state_path))?;

    let done = if opts.fresh {
        Vec::new()
    } else {
        resumable_prefix(&results_path, &records)
    };
    let start = done.len();
    write_results_csv(&done, cfg.strategy, &results_path)?;
    let timings_path = out_dir.join(TIMINGS_FILE);
    if start == 0 || !timings_path.exists() {
        fs::write(&timings_path, "question_id,latency_ms\n").map_err(io_err(&timings_path))?;
    }
    if start > 0 {
        tracing::info!(resumed = start, total = records.len(), "resuming run");
    }

    let index = match corpus_docs {
        Some((docs, chunking)) if start < records.len() => {
            let chunks = textcorpus::chunk_corpus(&docs, &chunking)?;
            let dir = cfg.cache_dir.as_deref().map(index_dir);
            Some(vecindex::build_index(
                &chunks,
                &providers.embedder,
                dir.as_deref(),
            )?)
        }
        _ => None,
    };

    let pipeline = Pipeline::new(providers, index.as_ref(), &prompts, &cfg.settings);
    let (answered, aborted) = execute(
        cfg,
        &pipeline,
        providers,
        &records,
        start,
        &results_path,
        &timings_path,
    )?;

    let rows = read_results_csv(&results_path)?;
    let report = build_report(&rows, echo, records.len());
    let (report_path, _) = write_report(&report, out_dir)?;
    Ok(RunOutcome {
        results_path,
        report_path,
        report,
        answered,
        aborted,
    })
}

type WorkResult = Result<(ResultRow, f64), String>;

fn execute(
    cfg: &ExperimentConfig,
    pipeline: &Pipeline<'_>,
    providers: &Providers,
    records: &[McqRecord],
    start: usize,
    results_path: &Path,
    timings_path: &Path,
) -> Result<(usize, Option<String>), RunError> {
    let append = |p: &Path| OpenOptions::new().append(true).open(p).map_err(io_err(p));
    let mut results = csv_writer(append(results_path)?);
    let mut timings = csv_writer(append(timings_path)?);
    let next = AtomicUsize::new(start);
    let stop = AtomicBool::new(false);
    let workers = cfg
        .concurrency
        .min(records.len().saturating_sub(start))
        .max(1);
    let (tx, rx) = mpsc::channel::<(usize, WorkResult)>();

    let work = |i: usize| -> WorkResult {
        let rec = &records[i];
        let began = Instant::now();
        let mut rng = question_rng(cfg.seed, i);
        let pred = pipeline
            .answer(cfg.strategy, rec, &mut rng)
            .map_err(|e| format!("{}: {e}", rec.id))?;
        let row = score_row(rec, &pred, &providers.embedder, &cfg.metrics)
            .map_err(|e| format!("{}: scoring failed: {e}", rec.id))?;
        Ok((row, began.elapsed().as_secs_f64() * 1000.0))
    };

    let mut written = 0usize;
    let mut aborted: Option<String> = None;
    let mut write_err: Option<RunError> = None;
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                let r = work(i);
                if r.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                if tx.send((i, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Single writer: rows go out strictly in input order.
        let mut pending: HashMap<usize, WorkResult> = HashMap::new();
        let mut cursor = start;
        for (i, r) in rx {
            pending.insert(i, r);
            while aborted.is_none() && write_err.is_none() {
                let Some(r) = pending.remove(&cursor) else {
                    break;
                };
                match r {
                    Ok((row, ms)) => {
                        let res = results
                            .write_record(csv_fields(&row, cfg.strategy.as_str()))
                            .and_then(|_| results.flush().map_err(Into::into))
                            .and_then(|_| {
                                timings.write_record([row.question_id.clone(), format!("{ms:.1}")])
                            })
                            .and_then(|_| timings.flush().map_err(Into::into));
                        if let Err(e) = res {
                            write_err = Some(RunError::Results {
                                path: results_path.to_path_buf(),
                                message: e.to_string(),
                            });
                            stop.store(true, Ordering::SeqCst);
                            break;
                        }
                        written += 1;
                        cursor += 1;
                        if written.is_multiple_of(50) {
                            tracing::info!(done = cursor, total = records.len(), "progress");
                        }
                    }
                    Err(msg) => {
                        tracing::error!(%msg, "provider outage; stopping");
                        aborted = Some(msg);
                        stop.store(true, Ordering::SeqCst);
                    }
                }
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    Ok((written, aborted))
}
