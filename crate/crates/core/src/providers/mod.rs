//! External service boundaries: chat completion, embeddings, web search and
//! page fetching.
//!
//! Each service is split into a *backend* trait (one raw attempt, implemented
//! by the HTTP clients in [`http`] and the deterministic doubles in [`mock`])
//! and a *client* wrapper that adds retry, rate limiting, call logging and the
//! optional response cache. Pipelines only ever talk to the clients.

pub mod cache;
pub mod error;
pub mod extract;
pub mod http;
pub mod mock;
pub mod retry;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;
pub use error::{ErrorClass, ProviderError};
pub use retry::{
    Attempted, CallLog, CallLogEntry, CallOutcome, CallRuntime, ProviderKind, RateLimiter,
    RecordingSleeper, RetryPolicy, Sleeper, ThreadSleeper,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub temperature: f64,
    pub max_response_chars: Option<usize>,
    pub timeout_seconds: u64,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            model_id: model_id.into(),
            temperature: 0.0,
            max_response_chars: None,
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(ProviderError::InvalidRequest("no user message".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.timeout_seconds == 0 {
            return Err(ProviderError::InvalidRequest(
                "timeout must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Concatenated text of all user messages.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub title: String,
    pub snippet: String,
    pub rank: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedPage {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: String,
}

pub trait ChatBackend: Send + Sync {
    fn endpoint(&self) -> String;
    fn send(&self, req: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait EmbedBackend: Send + Sync {
    /// Stable identity of the embedding model; part of index fingerprints.
    fn identity(&self) -> String;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

pub trait SearchBackend: Send + Sync {
    fn endpoint(&self) -> String;
    fn search(&self, query: &str, max_links: usize) -> Result<Vec<SearchResult>, ProviderError>;
}

pub trait PageBackend: Send + Sync {
    /// Fetches a page. Non-2xx responses are errors.
    fn fetch(&self, url: &str, timeout: Duration) -> Result<FetchedPage, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

#[derive(Clone)]
pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    runtime: Arc<CallRuntime>,
    cache: Option<Arc<ResponseCache>>,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, runtime: Arc<CallRuntime>) -> Self {
        Self {
            backend,
            runtime,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Sends a chat request under the retry policy and returns the assistant
    /// text verbatim (truncated to `max_response_chars` when set).
    pub fn chat_complete(&self, req: &ChatRequest) -> Result<Completion, ProviderError> {
        req.validate()?;
        let endpoint = self.backend.endpoint();
        let key = self
            .cache
            .as_ref()
            .map(|_| ResponseCache::key(ProviderKind::Chat, &endpoint, req));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get::<Completion>(key) {
                return Ok(hit);
            }
        }
        let out = self
            .runtime
            .execute(ProviderKind::Chat, &endpoint, || self.backend.send(req))?;
        let text = match req.max_response_chars {
            Some(n) => out.value.chars().take(n).collect(),
            None => out.value,
        };
        let completion = Completion {
            text,
            attempts: out.attempts,
        };
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, &completion);
        }
        Ok(completion)
    }
}

#[derive(Clone)]
pub struct Embedder {
    backend: Arc<dyn EmbedBackend>,
    runtime: Arc<CallRuntime>,
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbedBackend>, runtime: Arc<CallRuntime>) -> Self {
        Self { backend, runtime }
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    /// Embeds `texts` in order. Returns one vector per input, all sharing one
    /// dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(ProviderError::InvalidRequest(format!(
                "text {i} is empty after trimming"
            )));
        }
        let endpoint = self.backend.identity();
        let out = self
            .runtime
            .execute(ProviderKind::Embedding, &endpoint, || {
                self.backend.embed_batch(texts)
            })?
            .value;
        if out.len() != texts.len() {
            return Err(ProviderError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                out.len()
            )));
        }
        let dim = out[0].len();
        if let Some(i) = out.iter().position(|v| v.len() != dim) {
            return Err(ProviderError::Malformed(format!(
                "embedding {i} has dimension {}, expected {dim}",
                out[i].len()
            )));
        }
        if out.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ProviderError::Malformed(
                "non-finite embedding value".into(),
            ));
        }
        Ok(out)
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}

pub const DEFAULT_MAX_LINKS: usize = 8;

#[derive(Clone)]
pub struct WebSearch {
    backend: Arc<dyn SearchBackend>,
    runtime: Arc<CallRuntime>,
    cache: Option<Arc<ResponseCache>>,
}

impl WebSearch {
    pub fn new(backend: Arc<dyn SearchBackend>, runtime: Arc<CallRuntime>) -> Self {
        Self {
            backend,
            runtime,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Up to `max_links` results, ranked 1.. contiguously. An `Ok` empty list
    /// means zero hits; provider exhaustion is an `Err`.
    pub fn web_search(
        &self,
        query: &str,
        max_links: usize,
    ) -> Result<Vec<SearchResult>, ProviderError> {
        let endpoint = self.backend.endpoint();
        let key = self
            .cache
            .as_ref()
            .map(|_| ResponseCache::key(ProviderKind::Search, &endpoint, &(query, max_links)));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get::<Vec<SearchResult>>(key) {
                return Ok(hit);
            }
        }
        let mut hits = self
            .runtime
            .execute(ProviderKind::Search, &endpoint, || {
                self.backend.search(query, max_links)
            })?
            .value;
        hits.sort_by_key(|h| h.rank);
        hits.truncate(max_links);
        for (i, h) in hits.iter_mut().enumerate() {
            h.rank = i as u32 + 1;
        }
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, &hits);
        }
        Ok(hits)
    }
}

#[derive(Clone)]
pub struct PageFetcher {
    backend: Arc<dyn PageBackend>,
    runtime: Arc<CallRuntime>,
    cache: Option<Arc<ResponseCache>>,
}

impl PageFetcher {
    pub fn new(backend: Arc<dyn PageBackend>, runtime: Arc<CallRuntime>) -> Self {
        Self {
            backend,
            runtime,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Fetches `url` and returns its allowlisted visible text. Non-HTML
    /// content extracts to an empty string.
    pub fn fetch_and_extract(&self, url: &str, timeout: Duration) -> Result<String, ProviderError> {
        let parsed = reqwest::Url::parse(url)
            .map_err(|e| ProviderError::InvalidRequest(format!("bad url {url}: {e}")))?;
        if !matches!(parsed.scheme(), "http" | "https") {
            return Err(ProviderError::InvalidRequest(format!(
                "unsupported scheme in {url}"
            )));
        }
        let key = self
            .cache
            .as_ref()
            .map(|_| ResponseCache::key(ProviderKind::Fetch, "fetch", &url));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get::<String>(key) {
                return Ok(hit);
            }
        }
        let page = self
            .runtime
            .execute(
                ProviderKind::Fetch,
                parsed.host_str().unwrap_or(url),
                || self.backend.fetch(url, timeout),
            )?
            .value;
        let text = if extract::looks_like_html(page.content_type.as_deref(), &page.body) {
            extract::extract_visible_text(&page.body)
        } else {
            String::new()
        };
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, &text);
        }
        Ok(text)
    }
}

/// Every provider a pipeline may need.
#[derive(Clone)]
pub struct Providers {
    pub chat: ChatClient,
    pub embedder: Embedder,
    pub search: WebSearch,
    pub fetcher: PageFetcher,
}

impl Providers {
    /// Wires all four backends through one shared runtime.
    pub fn with_runtime(
        runtime: Arc<CallRuntime>,
        chat: Arc<dyn ChatBackend>,
        embed: Arc<dyn EmbedBackend>,
        search: Arc<dyn SearchBackend>,
        pages: Arc<dyn PageBackend>,
    ) -> Self {
        Self {
            chat: ChatClient::new(chat, runtime.clone()),
            embedder: Embedder::new(embed, runtime.clone()),
            search: WebSearch::new(search, runtime.clone()),
            fetcher: PageFetcher::new(pages, runtime),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.chat = self.chat.with_cache(cache.clone());
        self.search = self.search.with_cache(cache.clone());
        self.fetcher = self.fetcher.with_cache(cache);
        self
    }
}
