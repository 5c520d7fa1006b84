//! The seven answering pipelines and the machinery they share: prompt
//! construction, answer parsing, sufficiency gating, routing, query
//! refinement and k-aggregation voting.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{McqRecord, OptionKey};
use crate::providers::{ChatMessage, ChatRequest, ProviderError, Providers, DEFAULT_MAX_LINKS};
use crate::vecindex::{Origin, Passage, RetrievedContext, VectorIndex};

/// Emitted by strict local RAG when the context is insufficient
/// ("the answer was not found").
pub const NULL_ANSWER: &str = "উত্তর পাওয়া যায়নি";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    LocalRag,
    LocalFallback,
    WebFallback,
    Agentic,
    Iterative,
    Aggregate,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::ZeroShot,
        Strategy::LocalRag,
        Strategy::LocalFallback,
        Strategy::WebFallback,
        Strategy::Agentic,
        Strategy::Iterative,
        Strategy::Aggregate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::LocalRag => "local_rag",
            Strategy::LocalFallback => "local_fallback",
            Strategy::WebFallback => "web_fallback",
            Strategy::Agentic => "agentic",
            Strategy::Iterative => "iterative",
            Strategy::Aggregate => "aggregate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// Whether the strategy retrieves from the local corpus.
    pub fn needs_corpus(self) -> bool {
        !matches!(self, Strategy::ZeroShot | Strategy::WebFallback)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A predicted option. `NA` is the strict local-RAG null answer; `Failed`
/// marks a question whose answer could not be obtained or parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictedOption {
    A,
    B,
    C,
    D,
    NA,
    #[serde(rename = "FAILED")]
    Failed,
}

impl PredictedOption {
    pub fn key(self) -> Option<OptionKey> {
        match self {
            PredictedOption::A => Some(OptionKey::A),
            PredictedOption::B => Some(OptionKey::B),
            PredictedOption::C => Some(OptionKey::C),
            PredictedOption::D => Some(OptionKey::D),
            PredictedOption::NA | PredictedOption::Failed => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PredictedOption::A => "A",
            PredictedOption::B => "B",
            PredictedOption::C => "C",
            PredictedOption::D => "D",
            PredictedOption::NA => "NA",
            PredictedOption::Failed => "FAILED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "NA" => Some(PredictedOption::NA),
            "FAILED" => Some(PredictedOption::Failed),
            other => OptionKey::parse(other)
                .filter(|_| other.len() == 1)
                .map(Self::from),
        }
    }
}

impl From<OptionKey> for PredictedOption {
    fn from(k: OptionKey) -> Self {
        match k {
            OptionKey::A => PredictedOption::A,
            OptionKey::B => PredictedOption::B,
            OptionKey::C => PredictedOption::C,
            OptionKey::D => PredictedOption::D,
        }
    }
}

impl fmt::Display for PredictedOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Local,
    Web,
    ZeroShot,
    NullAnswer,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Local => "local",
            Route::Web => "web",
            Route::ZeroShot => "zero_shot",
            Route::NullAnswer => "null_answer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    pub fn as_str(self) -> &'static str {
        match self {
            Confidence::High => "high",
            Confidence::Medium => "medium",
            Confidence::Low => "low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Majority,
    Unanimous,
    Tie,
}

impl DecisionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionKind::Majority => "majority",
            DecisionKind::Unanimous => "unanimous",
            DecisionKind::Tie => "tie",
        }
    }
}

/// One retrieval step: where context came from (a `k=` label or a URL) and
/// how many characters it held.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub origin: Origin,
    pub source: String,
    pub total_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub strategy: Strategy,
    pub option: PredictedOption,
    pub rationale: String,
    pub route: Route,
    pub confidence: Option<Confidence>,
    pub decision_kind: Option<DecisionKind>,
    pub retrieval_trace: Vec<TraceEntry>,
    /// Free-form notes: router verdicts, recovered errors, substitutions.
    pub notes: Vec<String>,
    /// Provider attempts spent on answering calls; answer rounds for the
    /// iterative strategy.
    pub attempts: u32,
}

impl Prediction {
    fn new(record: &McqRecord, strategy: Strategy) -> Self {
        Self {
            question_id: record.id.clone(),
            strategy,
            option: PredictedOption::Failed,
            rationale: String::new(),
            route: Route::ZeroShot,
            confidence: None,
            decision_kind: None,
            retrieval_trace: Vec::new(),
            notes: Vec::new(),
            attempts: 0,
        }
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.option == PredictedOption::NA && self.strategy != Strategy::LocalRag {
            return Err(format!("{}: NA outside local_rag", self.question_id));
        }
        if self.confidence.is_some() != (self.strategy == Strategy::Iterative) {
            return Err(format!(
                "{}: confidence present iff iterative",
                self.question_id
            ));
        }
        if self.decision_kind.is_some() != (self.strategy == Strategy::Aggregate) {
            return Err(format!(
                "{}: decision kind present iff aggregate",
                self.question_id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgenticConfig {
    /// Minimum local context length, in characters (exclusive).
    pub tau1: usize,
    /// Minimum web summary length, in characters (exclusive).
    pub tau2: usize,
    pub k_local: usize,
    /// Falls back to the answering model when empty.
    pub router_model: String,
    /// Send router-approved but short local context to web retrieval
    /// instead of zero-shot.
    pub yes_short_to_web: bool,
}

impl Default for AgenticConfig {
    fn default() -> Self {
        Self {
            tau1: 300,
            tau2: 200,
            k_local: DEFAULT_K,
            router_model: String::new(),
            yes_short_to_web: false,
        }
    }
}

impl AgenticConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau1 == 0 || self.tau2 == 0 {
            return Err("tau1 and tau2 must be positive".into());
        }
        if self.k_local == 0 {
            return Err("k_local must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub k_values: Vec<usize>,
    pub temperature: f64,
    pub tiebreak_k: usize,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            k_values: vec![3, 5, 6],
            temperature: 0.7,
            tiebreak_k: 6,
        }
    }
}

impl AggregateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k_values.is_empty() || self.k_values[0] == 0 {
            return Err("k_values must be non-empty and positive".into());
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err("k_values must be strictly increasing".into());
        }
        if !self.k_values.contains(&self.tiebreak_k) {
            return Err(format!(
                "tiebreak_k {} is not one of k_values",
                self.tiebreak_k
            ));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err("temperature must lie in [0, 2]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Compare with the gold answer key.
    Oracle,
    /// Ask the model whether its own answer is correct.
    SelfCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeConfig {
    pub max_refinements: u32,
    pub judge_mode: JudgeMode,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            max_refinements: 2,
            judge_mode: JudgeMode::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WebConfig {
    pub max_links: usize,
    pub pages_to_read: usize,
    pub fetch_timeout_seconds: u64,
}

impl Default for WebConfig {
    fn default() -> Self {
        Self {
            max_links: DEFAULT_MAX_LINKS,
            pages_to_read: 3,
            fetch_timeout_seconds: 30,
        }
    }
}

pub const DEFAULT_K: usize = 5;

/// Everything a pipeline needs besides providers and the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySettings {
    pub model_id: String,
    /// Retrieval depth for single-retrieval strategies.
    pub k: usize,
    /// Temperature for ordinary answering calls.
    pub temperature: f64,
    pub timeout_seconds: u64,
    pub agentic: AgenticConfig,
    pub aggregate: AggregateConfig,
    pub iterative: IterativeConfig,
    pub web: WebConfig,
}

impl Default for StrategySettings {
    fn default() -> Self {
        Self {
            model_id: "mock-model".into(),
            k: DEFAULT_K,
            temperature: 0.0,
            timeout_seconds: crate::providers::DEFAULT_TIMEOUT_SECONDS,
            agentic: AgenticConfig::default(),
            aggregate: AggregateConfig::default(),
            iterative: IterativeConfig::default(),
            web: WebConfig::default(),
        }
    }
}

impl StrategySettings {
    pub fn validate(&self) -> Result<(), String> {
        if self.model_id.trim().is_empty() {
            return Err("model_id must be set".into());
        }
        if self.k == 0 {
            return Err("k must be positive".into());
        }
        if self.timeout_seconds == 0 {
            return Err("timeout_seconds must be positive".into());
        }
        if self.web.max_links == 0 || self.web.pages_to_read == 0 {
            return Err("web.max_links and web.pages_to_read must be positive".into());
        }
        self.agentic.validate()?;
        self.aggregate.validate()
    }

    fn router_model(&self) -> &str {
        if self.agentic.router_model.trim().is_empty() {
            &self.model_id
        } else {
            &self.agentic.router_model
        }
    }
}

/// Prompt templates. Placeholders are `{question}`, `{options}`,
/// `{context}`, `{pages}`, `{language}`, `{answer}` and `{rationale}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub zero_shot: String,
    pub local_rag: String,
    pub web_rag: String,
    pub router: String,
    pub summarize: String,
    pub extract_terms: String,
    pub self_check: String,
    pub format_retry: String,
}

const PROMPT_FILES: [&str; 8] = [
    "zero_shot",
    "local_rag",
    "web_rag",
    "router",
    "summarize",
    "extract_terms",
    "self_check",
    "format_retry",
];

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            zero_shot: include_str!("../prompts/zero_shot.txt").into(),
            local_rag: include_str!("../prompts/local_rag.txt").into(),
            web_rag: include_str!("../prompts/web_rag.txt").into(),
            router: include_str!("../prompts/router.txt").into(),
            summarize: include_str!("../prompts/summarize.txt").into(),
            extract_terms: include_str!("../prompts/extract_terms.txt").into(),
            self_check: include_str!("../prompts/self_check.txt").into(),
            format_retry: include_str!("../prompts/format_retry.txt").into(),
        }
    }
}

impl PromptSet {
    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "zero_shot" => &mut self.zero_shot,
            "local_rag" => &mut self.local_rag,
            "web_rag" => &mut self.web_rag,
            "router" => &mut self.router,
            "summarize" => &mut self.summarize,
            "extract_terms" => &mut self.extract_terms,
            "self_check" => &mut self.self_check,
            _ => &mut self.format_retry,
        }
    }

    /// Defaults overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        for name in PROMPT_FILES {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                *set.slot(name) = fs::read_to_string(&path)?;
            }
        }
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, tpl) in [
            ("zero_shot", &self.zero_shot),
            ("local_rag", &self.local_rag),
            ("web_rag", &self.web_rag),
        ] {
            for ph in ["{question}", "{options}"] {
                if !tpl.contains(ph) {
                    return Err(format!("prompt {name} lacks {ph}"));
                }
            }
        }
        for (name, tpl) in [
            ("local_rag", &self.local_rag),
            ("web_rag", &self.web_rag),
            ("router", &self.router),
        ] {
            if !tpl.contains("{context}") {
                return Err(format!("prompt {name} lacks {{context}}"));
            }
        }
        Ok(())
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out.trim_end().to_string()
}

pub fn is_bangla(text: &str) -> bool {
    text.chars().any(|c| ('\u{0980}'..='\u{09FF}').contains(&c))
}

fn language(record: &McqRecord) -> &'static str {
    if is_bangla(&record.question) {
        "Bangla"
    } else {
        "English"
    }
}

pub fn format_options(record: &McqRecord) -> String {
    OptionKey::ALL
        .iter()
        .map(|k| format!("{k}. {}", record.option(*k)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn format_context(ctx: &RetrievedContext) -> String {
    ctx.passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Builds the answering prompt. Context with no characters is treated as
/// absent, giving the zero-shot form.
pub fn build_prompt(
    prompts: &PromptSet,
    record: &McqRecord,
    context: Option<&RetrievedContext>,
    model_id: &str,
) -> ChatRequest {
    let options = format_options(record);
    let lang = language(record);
    let text = match context.filter(|c| !c.is_empty()) {
        None => fill(
            &prompts.zero_shot,
            &[
                ("question", &record.question),
                ("options", &options),
                ("language", lang),
            ],
        ),
        Some(ctx) => {
            let tpl = match ctx.origin {
                Origin::Local => &prompts.local_rag,
                Origin::Web => &prompts.web_rag,
            };
            fill(
                tpl,
                &[
                    ("context", &format_context(ctx)),
                    ("question", &record.question),
                    ("options", &options),
                    ("language", lang),
                ],
            )
        }
    };
    ChatRequest::new(model_id, vec![ChatMessage::user(text)])
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no answer option found in model reply")]
pub struct UnparsableAnswer;

fn salvage_option_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""O"\s*:\s*"\s*([ABCDabcd])\s*""#).unwrap())
}

fn salvage_rationale_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#""R"\s*:\s*"((?:[^"\\]|\\.)*)""#).unwrap())
}

fn option_from_value(v: &Value) -> Option<OptionKey> {
    let s = v.as_str()?.trim();
    OptionKey::parse(s).filter(|_| s.len() == 1)
}

fn unescape_json_string(raw: &str) -> String {
    serde_json::from_str::<String>(&format!("\"{raw}\"")).unwrap_or_else(|_| raw.to_string())
}

/// Reads `{"O": ..., "R": ...}` from a model reply. Strict JSON first, then
/// a salvage pass over the raw text.
pub fn parse_model_answer(text: &str) -> Result<(OptionKey, String), UnparsableAnswer> {
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text.trim()) {
        if let Some(k) = obj.get("O").and_then(option_from_value) {
            let r = obj
                .get("R")
                .and_then(Value::as_str)
                .unwrap_or("")
                .trim()
                .to_string();
            return Ok((k, r));
        }
    }
    let caps = salvage_option_regex()
        .captures(text)
        .ok_or(UnparsableAnswer)?;
    let key = OptionKey::parse(&caps[1]).ok_or(UnparsableAnswer)?;
    let o_end = caps.get(0).unwrap().end();
    let o_start = caps.get(0).unwrap().start();
    // Prefer the R value right after the option, else the nearest before it.
    let rationale = salvage_rationale_regex()
        .captures_at(text, o_end)
        .or_else(|| {
            salvage_rationale_regex()
                .captures_iter(&text[..o_start])
                .last()
        })
        .map(|c| unescape_json_string(&c[1]).trim().to_string())
        .unwrap_or_default();
    Ok((key, rationale))
}

fn yes_no_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

/// First case-insensitive "yes"/"no" in a reply; `None` when neither occurs.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    yes_no_regex()
        .captures(reply)
        .map(|c| c[1].eq_ignore_ascii_case("yes"))
}

/// The agentic routing policy.
pub fn route(
    router_says_yes: bool,
    local_chars: usize,
    web_chars: usize,
    cfg: &AgenticConfig,
) -> Route {
    let web_allowed = !router_says_yes || cfg.yes_short_to_web;
    if router_says_yes && local_chars > cfg.tau1 {
        Route::Local
    } else if web_allowed && web_chars > cfg.tau2 {
        Route::Web
    } else {
        Route::ZeroShot
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VoteError {
    #[error("expected votes for k = {expected:?}, got {got:?}")]
    Mismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Majority voting over per-k answers with a designated tie-break depth.
pub fn aggregate_votes(
    votes: &[(usize, OptionKey, String)],
    cfg: &AggregateConfig,
) -> Result<(OptionKey, DecisionKind, String), VoteError> {
    let got: Vec<usize> = votes.iter().map(|v| v.0).collect();
    if got != cfg.k_values {
        return Err(VoteError::Mismatch {
            expected: cfg.k_values.clone(),
            got,
        });
    }
    let mut counts: HashMap<OptionKey, usize> = HashMap::new();
    for (_, o, _) in votes {
        *counts.entry(*o).or_insert(0) += 1;
    }
    let m = votes.len();
    let (winner, kind) = if counts.len() == 1 {
        (votes[0].1, DecisionKind::Unanimous)
    } else if let Some((&o, _)) = counts.iter().find(|(_, &c)| 2 * c > m) {
        (o, DecisionKind::Majority)
    } else {
        let tb = votes
            .iter()
            .find(|v| v.0 == cfg.tiebreak_k)
            .expect("tiebreak_k validated");
        (tb.1, DecisionKind::Tie)
    };
    let rationale = votes
        .iter()
        .find(|v| v.1 == winner)
        .map(|v| v.2.clone())
        .unwrap_or_default();
    Ok((winner, kind, rationale))
}

/// Provider failure serious enough to stop the run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("answering provider is down: {0}")]
pub struct ProviderDown(pub ProviderError);

fn is_outage(err: &ProviderError) -> bool {
    matches!(
        err,
        ProviderError::Unavailable { .. }
            | ProviderError::Auth { .. }
            | ProviderError::MissingCredential(_)
    )
}

/// Outcome of one answering exchange (with at most one format retry).
#[derive(Debug, Clone, PartialEq)]
pub struct Answered {
    pub option: PredictedOption,
    pub rationale: String,
    pub attempts: u32,
    pub note: Option<String>,
}

pub struct Pipeline<'a> {
    pub providers: &'a Providers,
    pub index: Option<&'a VectorIndex>,
    pub prompts: &'a PromptSet,
    pub settings: &'a StrategySettings,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        providers: &'a Providers,
        index: Option<&'a VectorIndex>,
        prompts: &'a PromptSet,
        settings: &'a StrategySettings,
    ) -> Self {
        Self {
            providers,
            index,
            prompts,
            settings,
        }
    }

    /// Runs `strategy` for one question. `rng` is this question's own
    /// generator.
    pub fn answer(
        &self,
        strategy: Strategy,
        record: &McqRecord,
        rng: &mut ChaCha8Rng,
    ) -> Result<Prediction, ProviderDown> {
        let k = self.settings.k;
        let p = match strategy {
            Strategy::ZeroShot => self.answer_zero_shot(record)?,
            Strategy::LocalRag => self.answer_local_rag(record, k)?,
            Strategy::LocalFallback => self.answer_local_fallback(record, k)?,
            Strategy::WebFallback => self.answer_web_fallback(record)?,
            Strategy::Agentic => self.answer_agentic(record)?,
            Strategy::Iterative => self.answer_iterative(record, k)?,
            Strategy::Aggregate => self.answer_aggregate(record, rng)?,
        };
        debug_assert!(p.check_invariants().is_ok(), "{:?}", p.check_invariants());
        Ok(p)
    }

    fn request(
        &self,
        record: &McqRecord,
        ctx: Option<&RetrievedContext>,
        temperature: f64,
    ) -> ChatRequest {
        let mut req = build_prompt(self.prompts, record, ctx, &self.settings.model_id)
            .with_temperature(temperature);
        req.timeout_seconds = self.settings.timeout_seconds;
        req
    }

    /// One answering call plus a single format retry on an unparsable reply.
    pub fn ask(
        &self,
        record: &McqRecord,
        ctx: Option<&RetrievedContext>,
        temperature: f64,
    ) -> Result<Answered, ProviderDown> {
        let mut req = self.request(record, ctx, temperature);
        let mut attempts = 0;
        for round in 0..2 {
            match self.providers.chat.chat_complete(&req) {
                Ok(c) => {
                    attempts += c.attempts;
                    if let Ok((k, r)) = parse_model_answer(&c.text) {
                        return Ok(Answered {
                            option: k.into(),
                            rationale: r,
                            attempts,
                            note: (round > 0)
                                .then(|| "answer parsed after format retry".to_string()),
                        });
                    }
                }
                Err(e) if is_outage(&e) => return Err(ProviderDown(e)),
                Err(e) => {
                    attempts += 1;
                    return Ok(Answered {
                        option: PredictedOption::Failed,
                        rationale: String::new(),
                        attempts,
                        note: Some(format!("answer call failed: {e}")),
                    });
                }
            }
            let retry = fill(
                &self.prompts.format_retry,
                &[("language", language(record))],
            );
            req.messages.push(ChatMessage::user(retry));
        }
        Ok(Answered {
            option: PredictedOption::Failed,
            rationale: String::new(),
            attempts,
            note: Some("answer unparsable after one retry".into()),
        })
    }

    fn apply(pred: &mut Prediction, ans: Answered) {
        pred.option = ans.option;
        pred.rationale = ans.rationale;
        pred.attempts += ans.attempts;
        pred.notes.extend(ans.note);
    }

    /// Local top-k retrieval; failures become empty context plus a note.
    pub fn retrieve_local(&self, query: &str, k: usize) -> (RetrievedContext, Option<String>) {
        let Some(index) = self.index else {
            return (
                RetrievedContext::empty(k, Origin::Local),
                Some("no local index".into()),
            );
        };
        match index.retrieve(query, k, &self.providers.embedder) {
            Ok(ctx) => (ctx, None),
            Err(e) => (
                RetrievedContext::empty(k, Origin::Local),
                Some(format!("local retrieval failed: {e}")),
            ),
        }
    }

    fn trace_local(pred: &mut Prediction, ctx: &RetrievedContext, note: Option<String>) {
        pred.retrieval_trace.push(TraceEntry {
            origin: Origin::Local,
            source: format!("k={}", ctx.k_requested),
            total_chars: ctx.total_chars,
        });
        pred.notes.extend(note);
    }

    pub fn answer_zero_shot(&self, record: &McqRecord) -> Result<Prediction, ProviderDown> {
        let mut pred = Prediction::new(record, Strategy::ZeroShot);
        self.zero_shot_into(&mut pred, record)?;
        Ok(pred)
    }

    fn zero_shot_into(
        &self,
        pred: &mut Prediction,
        record: &McqRecord,
    ) -> Result<(), ProviderDown> {
        let ans = self.ask(record, None, self.settings.temperature)?;
        pred.route = Route::ZeroShot;
        Self::apply(pred, ans);
        Ok(())
    }

    fn context_into(
        &self,
        pred: &mut Prediction,
        record: &McqRecord,
        ctx: &RetrievedContext,
    ) -> Result<(), ProviderDown> {
        let ans = self.ask(record, Some(ctx), self.settings.temperature)?;
        pred.route = match ctx.origin {
            Origin::Local => Route::Local,
            Origin::Web => Route::Web,
        };
        Self::apply(pred, ans);
        Ok(())
    }

    fn sufficient_local(&self, ctx: &RetrievedContext) -> bool {
        ctx.total_chars > self.settings.agentic.tau1
    }

    pub fn answer_local_rag(
        &self,
        record: &McqRecord,
        k: usize,
    ) -> Result<Prediction, ProviderDown> {
        let mut pred = Prediction::new(record, Strategy::LocalRag);
        let (ctx, note) = self.retrieve_local(&record.question, k);
        Self::trace_local(&mut pred, &ctx, note);
        if self.sufficient_local(&ctx) {
            self.context_into(&mut pred, record, &ctx)?;
        } else {
            pred.option = PredictedOption::NA;
            pred.rationale = NULL_ANSWER.into();
            pred.route = Route::NullAnswer;
        }
        Ok(pred)
    }

    pub fn answer_local_fallback(
        &self,
        record: &McqRecord,
        k: usize,
    ) -> Result<Prediction, ProviderDown> {
        let mut pred = Prediction::new(record, Strategy::LocalFallback);
        let (ctx, note) = self.retrieve_local(&record.question, k);
        Self::trace_local(&mut pred, &ctx, note);
        if self.sufficient_local(&ctx) {
            self.context_into(&mut pred, record, &ctx)?;
        } else {
            self.zero_shot_into(&mut pred, record)?;
        }
        Ok(pred)
    }

    /// Condenses page extracts into bullet points with one chat call.
    /// Returns an empty string (and a note on failure) when nothing usable
    /// comes back.
    pub fn summarize_web(&self, pages: &[String], record: &McqRecord) -> (String, Option<String>) {
        let usable: Vec<&str> = pages
            .iter()
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .collect();
        if usable.is_empty() {
            return (String::new(), None);
        }
        let joined = usable
            .iter()
            .enumerate()
            .map(|(i, p)| format!("[{}] {p}", i + 1))
            .collect::<Vec<_>>()
            .join("\n\n");
        let text = fill(
            &self.prompts.summarize,
            &[
                ("question", &record.question),
                ("pages", &joined),
                ("language", language(record)),
            ],
        );
        let mut req = ChatRequest::new(&self.settings.model_id, vec![ChatMessage::user(text)]);
        req.timeout_seconds = self.settings.timeout_seconds;
        match self.providers.chat.chat_complete(&req) {
            Ok(c) => (c.text.trim().to_string(), None),
            Err(e) => (String::new(), Some(format!("summarization failed: {e}"))),
        }
    }

    /// Search, read the top pages, summarize. The summary is returned as a
    /// single-passage web context.
    pub fn retrieve_web(&self, record: &McqRecord, pred: &mut Prediction) -> RetrievedContext {
        let web = &self.settings.web;
        let query = format!("{} {}", record.question, record.options.join(" "));
        let hits = match self.providers.search.web_search(&query, web.max_links) {
            Ok(h) => h,
            Err(e) => {
                pred.notes.push(format!("web search failed: {e}"));
                return RetrievedContext::empty(0, Origin::Web);
            }
        };
        if hits.is_empty() {
            pred.notes.push("web search returned no results".into());
        }
        let timeout = Duration::from_secs(web.fetch_timeout_seconds);
        let mut pages = Vec::new();
        for hit in hits.iter().take(web.pages_to_read) {
            let text = match self.providers.fetcher.fetch_and_extract(&hit.url, timeout) {
                Ok(t) => t,
                Err(e) => {
                    pred.notes.push(format!("fetch {} failed: {e}", hit.url));
                    String::new()
                }
            };
            pred.retrieval_trace.push(TraceEntry {
                origin: Origin::Web,
                source: hit.url.clone(),
                total_chars: text.chars().count(),
            });
            pages.push(text);
        }
        let (summary, note) = self.summarize_web(&pages, record);
        pred.notes.extend(note);
        let ctx = if summary.is_empty() {
            RetrievedContext::empty(pages.len(), Origin::Web)
        } else {
            RetrievedContext::new(
                vec![Passage {
                    source: "web-summary".into(),
                    text: summary,
                    score: 0.0,
                }],
                pages.len(),
                Origin::Web,
            )
        };
        pred.retrieval_trace.push(TraceEntry {
            origin: Origin::Web,
            source: "summary".into(),
            total_chars: ctx.total_chars,
        });
        ctx
    }

    pub fn answer_web_fallback(&self, record: &McqRecord) -> Result<Prediction, ProviderDown> {
        let mut pred = Prediction::new(record, Strategy::WebFallback);
        let ctx = self.retrieve_web(record, &mut pred);
        if ctx.total_chars > self.settings.agentic.tau2 {
            self.context_into(&mut pred, record, &ctx)?;
        } else {
            self.zero_shot_into(&mut pred, record)?;
        }
        Ok(pred)
    }

    /// Asks the router whether `ctx` suffices. Failures and replies without
    /// a Latin yes/no count as "No".
    pub fn ask_router(
        &self,
        record: &McqRecord,
        ctx: &RetrievedContext,
        pred: &mut Prediction,
    ) -> bool {
        let text = fill(
            &self.prompts.router,
            &[
                (
                    "question",
                    &format!("{}\n{}", record.question, format_options(record)),
                ),
                ("context", &ctx.joined_text()),
            ],
        );
        let mut req = ChatRequest::new(self.settings.router_model(), vec![ChatMessage::user(text)]);
        req.timeout_seconds = self.settings.timeout_seconds;
        let verdict = match self.providers.chat.chat_complete(&req) {
            Ok(c) => parse_yes_no(&c.text).unwrap_or_else(|| {
                pred.notes
                    .push("router reply had no yes/no; treated as no".into());
                false
            }),
            Err(e) => {
                pred.notes
                    .push(format!("router call failed: {e}; treated as no"));
                false
            }
        };
        pred.notes
            .push(format!("router: {}", if verdict { "yes" } else { "no" }));
        verdict
    }

    pub fn answer_agentic(&self, record: &McqRecord) -> Result<Prediction, ProviderDown> {
        let cfg = &self.settings.agentic;
        let mut pred = Prediction::new(record, Strategy::Agentic);
        let (local, note) = self.retrieve_local(&record.question, cfg.k_local);
        Self::trace_local(&mut pred, &local, note);
        let yes = self.ask_router(record, &local, &mut pred);

        let local_taken = route(yes, local.total_chars, 0, cfg) == Route::Local;
        let web_possible = !yes || cfg.yes_short_to_web;
        let web = if !local_taken && web_possible {
            self.retrieve_web(record, &mut pred)
        } else {
            RetrievedContext::empty(0, Origin::Web)
        };
        match route(yes, local.total_chars, web.total_chars, cfg) {
            Route::Local => self.context_into(&mut pred, record, &local)?,
            Route::Web => self.context_into(&mut pred, record, &web)?,
            _ => self.zero_shot_into(&mut pred, record)?,
        }
        Ok(pred)
    }

    /// Appends key terms extracted from the question and context to the
    /// question. Falls back to the question alone.
    pub fn refine_query(
        &self,
        record: &McqRecord,
        ctx: &RetrievedContext,
    ) -> (String, Option<String>) {
        let text = fill(
            &self.prompts.extract_terms,
            &[
                ("question", &record.question),
                ("context", &ctx.joined_text()),
            ],
        );
        let mut req = ChatRequest::new(&self.settings.model_id, vec![ChatMessage::user(text)]);
        req.timeout_seconds = self.settings.timeout_seconds;
        match self.providers.chat.chat_complete(&req) {
            Ok(c) => {
                let terms = split_terms(&c.text);
                if terms.is_empty() {
                    (record.question.clone(), None)
                } else {
                    (format!("{} {}", record.question, terms.join(" ")), None)
                }
            }
            Err(e) => (
                record.question.clone(),
                Some(format!("term extraction failed: {e}")),
            ),
        }
    }

    fn judge(&self, record: &McqRecord, ans: &Answered, pred: &mut Prediction) -> bool {
        let Some(key) = ans.option.key() else {
            return false;
        };
        match self.settings.iterative.judge_mode {
            JudgeMode::Oracle => key == record.answer_key,
            JudgeMode::SelfCheck => {
                let text = fill(
                    &self.prompts.self_check,
                    &[
                        ("question", &record.question),
                        ("options", &format_options(record)),
                        ("answer", key.as_str()),
                        ("rationale", &ans.rationale),
                    ],
                );
                let mut req =
                    ChatRequest::new(&self.settings.model_id, vec![ChatMessage::user(text)]);
                req.timeout_seconds = self.settings.timeout_seconds;
                match self.providers.chat.chat_complete(&req) {
                    Ok(c) => parse_yes_no(&c.text).unwrap_or(false),
                    Err(e) => {
                        pred.notes
                            .push(format!("self-check failed: {e}; treated as incorrect"));
                        false
                    }
                }
            }
        }
    }

    pub fn answer_iterative(
        &self,
        record: &McqRecord,
        k: usize,
    ) -> Result<Prediction, ProviderDown> {
        let cfg = &self.settings.iterative;
        let mut pred = Prediction::new(record, Strategy::Iterative);
        let mut query = record.question.clone();
        let mut confidence = Confidence::Low;
        for round in 0..=cfg.max_refinements {
            let (ctx, note) = self.retrieve_local(&query, k);
            Self::trace_local(&mut pred, &ctx, note);
            let ans = self.ask(record, Some(&ctx), self.settings.temperature)?;
            pred.route = if ctx.is_empty() {
                Route::ZeroShot
            } else {
                Route::Local
            };
            pred.attempts = round + 1;
            let correct = self.judge(record, &ans, &mut pred);
            pred.option = ans.option;
            pred.rationale = ans.rationale;
            pred.notes.extend(ans.note);
            if correct {
                confidence = if round == 0 {
                    Confidence::High
                } else {
                    Confidence::Medium
                };
                break;
            }
            if round < cfg.max_refinements {
                let (q, note) = self.refine_query(record, &ctx);
                pred.notes.extend(note);
                query = q;
            }
        }
        pred.confidence = Some(confidence);
        Ok(pred)
    }

    pub fn answer_aggregate(
        &self,
        record: &McqRecord,
        rng: &mut ChaCha8Rng,
    ) -> Result<Prediction, ProviderDown> {
        let cfg = &self.settings.aggregate;
        let mut pred = Prediction::new(record, Strategy::Aggregate);
        let mut votes = Vec::with_capacity(cfg.k_values.len());
        let mut any_context = false;
        for &k in &cfg.k_values {
            let (ctx, note) = self.retrieve_local(&record.question, k);
            Self::trace_local(&mut pred, &ctx, note);
            any_context |= !ctx.is_empty();
            let ans = self.ask(record, Some(&ctx), cfg.temperature)?;
            pred.attempts += ans.attempts;
            pred.notes.extend(ans.note);
            let option = match ans.option.key() {
                Some(o) => o,
                None => {
                    let o = OptionKey::ALL[rng.gen_range(0..4)];
                    pred.notes.push(format!(
                        "k={k}: unparsable vote replaced by random option {o}"
                    ));
                    o
                }
            };
            pred.notes.push(format!("k={k}: vote {option}"));
            votes.push((k, option, ans.rationale));
        }
        let (winner, kind, rationale) = aggregate_votes(&votes, cfg).expect("one vote per k");
        pred.option = winner.into();
        pred.decision_kind = Some(kind);
        pred.rationale = rationale;
        pred.route = if any_context {
            Route::Local
        } else {
            Route::ZeroShot
        };
        Ok(pred)
    }
}

fn split_terms(reply: &str) -> Vec<String> {
    reply
        .split(|c| [',', ';', '\n', '،', '।'].contains(&c))
        .map(|t| t.trim().trim_start_matches(['-', '*', '•']).trim())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use rand::SeedableRng;

    use crate::providers::mock::{HashEmbedder, MockChat, MockPages, MockSearch};
    use crate::providers::CallRuntime;

    fn record(q: &str) -> McqRecord {
        McqRecord {
            id: "q1".into(),
            question: q.into(),
            options: ["অ", "আ", "ই", "ঈ"].map(String::from),
            answer_key: OptionKey::B,
            rationale: None,
            metadata: BTreeMap::new(),
        }
    }

    fn providers(chat: MockChat) -> Providers {
        Providers::with_runtime(
            Arc::new(CallRuntime::instant()),
            Arc::new(chat),
            Arc::new(HashEmbedder::new(16)),
            Arc::new(MockSearch::with_hits(0)),
            Arc::new(MockPages::new()),
        )
    }

    fn ctx(origin: Origin, texts: &[&str]) -> RetrievedContext {
        RetrievedContext::new(
            texts
                .iter()
                .map(|t| Passage {
                    source: "s".into(),
                    text: t.to_string(),
                    score: 1.0,
                })
                .collect(),
            texts.len(),
            origin,
        )
    }

    #[test]
    fn prompt_forms() {
        let p = PromptSet::default();
        let r = record("কোনটি?");
        let zs = build_prompt(&p, &r, None, "m").user_text();
        assert!(zs.contains("কোনটি?") && zs.contains("A. অ") && zs.contains("D. ঈ"));
        assert!(zs.contains("\"O\"") && zs.contains("Bangla"));
        assert!(!zs.contains("Textbook passages"));

        let c = ctx(Origin::Local, &["প্রথম অংশ", "দ্বিতীয় অংশ"]);
        let lp = build_prompt(&p, &r, Some(&c), "m").user_text();
        let q_at = lp.find("কোনটি?").unwrap();
        assert!(lp.find("প্রথম অংশ").unwrap() < q_at);
        assert!(lp.find("দ্বিতীয় অংশ").unwrap() < q_at);

        let empty = ctx(Origin::Local, &[]);
        assert_eq!(build_prompt(&p, &r, Some(&empty), "m").user_text(), zs);
        assert!(build_prompt(&p, &record("Which?"), None, "m")
            .user_text()
            .contains("English"));
    }

    #[test]
    fn router_prompt_is_verbatim() {
        let p = PromptSet::default();
        assert!(p.router.contains(
            "তুমি একটি রাউটার মডেল। নিচের টেক্সটে কি প্রশ্নের উত্তর দেবার জন্য যথেষ্ট তথ্য আছে? শুধু একটি শব্দে উত্তর দাও: Yes অথবা No।"
        ));
        p.validate().unwrap();
    }

    #[test]
    fn prompt_overrides_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("zero_shot.txt"), "Q={question} O={options}").unwrap();
        let p = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(p.zero_shot, "Q={question} O={options}");
        assert_eq!(p.router, PromptSet::default().router);
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(
            parse_model_answer(r#"{"O":"B","R":"ব্যাখ্যা"}"#).unwrap(),
            (OptionKey::B, "ব্যাখ্যা".into())
        );
        assert_eq!(
            parse_model_answer(r#"Sure! {"O":"C","R":"কারণ"} hope that helps"#).unwrap(),
            (OptionKey::C, "কারণ".into())
        );
        assert_eq!(
            parse_model_answer("The answer is obvious."),
            Err(UnparsableAnswer)
        );
        assert_eq!(
            parse_model_answer(r#"{"O":"E","R":"x"}"#),
            Err(UnparsableAnswer)
        );
        assert_eq!(
            parse_model_answer(r#"{"O":"a"}"#).unwrap(),
            (OptionKey::A, String::new())
        );
        assert_eq!(
            parse_model_answer("```json\n{\"R\": \"say \\\"hi\\\"\", \"O\": \"D\"}\n```").unwrap(),
            (OptionKey::D, "say \"hi\"".into())
        );
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes"), Some(true));
        assert_eq!(parse_yes_no("no."), Some(false));
        assert_eq!(parse_yes_no("NO। yes"), Some(false));
        assert_eq!(parse_yes_no("হ্যাঁ"), None);
        assert_eq!(parse_yes_no("nobody knows"), None);
    }

    #[test]
    fn route_examples() {
        let c = AgenticConfig::default();
        assert_eq!(route(true, 350, 0, &c), Route::Local);
        assert_eq!(route(false, 500, 250, &c), Route::Web);
        assert_eq!(route(true, 250, 999, &c), Route::ZeroShot);
        let alt = AgenticConfig {
            yes_short_to_web: true,
            ..c
        };
        assert_eq!(route(true, 250, 999, &alt), Route::Web);
    }

    #[test]
    fn vote_examples() {
        use OptionKey::*;
        let cfg = AggregateConfig::default();
        let v = |a, b, c| {
            vec![
                (3, a, "r3".to_string()),
                (5, b, "r5".into()),
                (6, c, "r6".into()),
            ]
        };
        assert_eq!(
            aggregate_votes(&v(A, A, B), &cfg).unwrap(),
            (A, DecisionKind::Majority, "r3".into())
        );
        assert_eq!(
            aggregate_votes(&v(C, C, C), &cfg).unwrap(),
            (C, DecisionKind::Unanimous, "r3".into())
        );
        assert_eq!(
            aggregate_votes(&v(A, B, C), &cfg).unwrap(),
            (C, DecisionKind::Tie, "r6".into())
        );
        assert!(aggregate_votes(&v(A, B, C)[..2], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AggregateConfig::default().validate().is_ok());
        let bad = AggregateConfig {
            tiebreak_k: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AggregateConfig {
            k_values: vec![5, 3, 6],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(AgenticConfig {
            tau1: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_shot_and_format_retry() {
        let pv = providers(MockChat::scripted(vec![Ok(r#"{"O":"A","R":"x"}"#.into())]));
        let prompts = PromptSet::default();
        let settings = StrategySettings::default();
        let pl = Pipeline::new(&pv, None, &prompts, &settings);
        let p = pl.answer_zero_shot(&record("q")).unwrap();
        assert_eq!(
            (p.option, p.route, p.attempts),
            (PredictedOption::A, Route::ZeroShot, 1)
        );

        let pv = providers(MockChat::scripted(vec![
            Ok("prose".into()),
            Ok("more prose".into()),
        ]));
        let pl = Pipeline::new(&pv, None, &prompts, &settings);
        let p = pl.answer_zero_shot(&record("q")).unwrap();
        assert_eq!(p.option, PredictedOption::Failed);

        let pv = providers(MockChat::scripted(vec![
            Err(ProviderError::Timeout),
            Ok(r#"{"O":"C","R":"r"}"#.into()),
        ]));
        let pl = Pipeline::new(&pv, None, &prompts, &settings);
        let p = pl.answer_zero_shot(&record("q")).unwrap();
        assert_eq!((p.option, p.attempts), (PredictedOption::C, 2));
    }

    #[test]
    fn exhausted_answer_provider_is_fatal() {
        let pv = providers(MockChat::from_fn(|_| Err(ProviderError::Timeout)));
        let prompts = PromptSet::default();
        let settings = StrategySettings::default();
        let pl = Pipeline::new(&pv, None, &prompts, &settings);
        assert!(pl.answer_zero_shot(&record("q")).is_err());
    }

    #[test]
    fn split_terms_handles_lists() {
        assert_eq!(split_terms("মাইটোকন্ড্রিয়া, শ্বসন"), ["মাইটোকন্ড্রিয়া", "শ্বসন"]);
        assert_eq!(split_terms("- a\n- b\n"), ["a", "b"]);
        assert!(split_terms("  ").is_empty());
    }

    #[test]
    fn aggregate_random_substitution_is_seeded() {
        let prompts = PromptSet::default();
        let settings = StrategySettings::default();
        let run = || {
            let pv = providers(MockChat::constant("no json here"));
            let pl = Pipeline::new(&pv, None, &prompts, &settings);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            pl.answer_aggregate(&record("q"), &mut rng).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.option.key().is_some());
        assert_eq!(
            a.notes
                .iter()
                .filter(|n| n.contains("random option"))
                .count(),
            3
        );
    }
}
