//! HTTP backends: chat-completions style chat and embeddings endpoints,
//! a Serper-style search endpoint and a plain page fetcher.
//!
//! Endpoint URLs and credentials always come from configuration and the
//! environment.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    ChatBackend, ChatRequest, EmbedBackend, FetchedPage, PageBackend, ProviderError, SearchBackend,
    SearchResult,
};

pub const USER_AGENT: &str = concat!("medqa-rag/", env!("CARGO_PKG_VERSION"));

/// Reads a credential from the named environment variable.
pub fn credential_from_env(var: &str) -> Result<String, ProviderError> {
    match std::env::var(var) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(ProviderError::MissingCredential(var.to_string())),
    }
}

fn client(timeout: Duration) -> Result<Client, ProviderError> {
    Client::builder()
        .user_agent(USER_AGENT)
        .timeout(timeout)
        .build()
        .map_err(|e| ProviderError::Connection(e.to_string()))
}

fn check(resp: Response) -> Result<Response, ProviderError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().unwrap_or_default();
    Err(ProviderError::from_status(status.as_u16(), &body))
}

fn join_url(base: &str, path: &str) -> String {
    format!(
        "{}/{}",
        base.trim_end_matches('/'),
        path.trim_start_matches('/')
    )
}

/// Builds the JSON body of a chat-completions request.
pub fn chat_request_body(req: &ChatRequest) -> Value {
    json!({
        "model": req.model_id,
        "messages": req.messages,
        "temperature": req.temperature,
    })
}

/// Pulls `choices[0].message.content` out of a chat-completions response.
pub fn parse_chat_response(body: &Value) -> Result<String, ProviderError> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
}

#[derive(Debug, Clone)]
pub struct OpenAiCompatChat {
    base_url: String,
    api_key: Option<String>,
}

impl OpenAiCompatChat {
    /// `base_url` is the API root, e.g. `https://host/openai/v1`; requests go
    /// to `{base_url}/chat/completions`.
    pub fn new(base_url: &str, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.to_string(),
            api_key,
        }
    }
}

impl ChatBackend for OpenAiCompatChat {
    fn endpoint(&self) -> String {
        join_url(&self.base_url, "chat/completions")
    }

    fn send(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let http = client(Duration::from_secs(req.timeout_seconds))?;
        let mut builder = http.post(self.endpoint()).json(&chat_request_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = check(
            builder
                .send()
                .map_err(|e| ProviderError::from_reqwest(&e))?,
        )?;
        let body: Value = resp
            .json()
            .map_err(|e| ProviderError::Malformed(e.to_string()))?;
        parse_chat_response(&body)
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiCompatEmbed {
    base_url: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl OpenAiCompatEmbed {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.to_string(),
            model: model.to_string(),
            api_key,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

/// Orders `data[]` by `index` when present.
pub fn parse_embedding_response(
    body: &Value,
    expected: usize,
) -> Result<Vec<Vec<f32>>, ProviderError> {
    let parsed: EmbeddingResponse = serde_json::from_value(body.clone())
        .map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let mut items = parsed.data;
    if items.iter().all(|i| i.index.is_some()) {
        items.sort_by_key(|i| i.index);
    }
    if items.len() != expected {
        return Err(ProviderError::Malformed(format!(
            "expected {expected} embeddings, got {}",
            items.len()
        )));
    }
    Ok(items.into_iter().map(|i| i.embedding).collect())
}

impl EmbedBackend for OpenAiCompatEmbed {
    fn identity(&self) -> String {
        format!("{}#{}", join_url(&self.base_url, "embeddings"), self.model)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let http = client(self.timeout)?;
        let mut builder = http
            .post(join_url(&self.base_url, "embeddings"))
            .json(&json!({ "model": self.model, "input": texts }));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = check(
            builder
                .send()
                .map_err(|e| ProviderError::from_reqwest(&e))?,
        )?;
        let body: Value = resp
            .json()
            .map_err(|e| ProviderError::Malformed(e.to_string()))?;
        parse_embedding_response(&body, texts.len())
    }
}

/// Serper-compatible search: `POST {endpoint}` with `{"q", "num"}` and an
/// `X-API-KEY` header; hits come from `organic[]`.
#[derive(Debug, Clone)]
pub struct SerperSearch {
    endpoint: String,
    api_key: String,
    timeout: Duration,
}

impl SerperSearch {
    pub fn new(endpoint: &str, api_key: String) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            api_key,
            timeout: Duration::from_secs(30),
        }
    }
}

pub fn parse_search_response(body: &Value) -> Vec<SearchResult> {
    let Some(organic) = body.get("organic").and_then(Value::as_array) else {
        return Vec::new();
    };
    let mut hits: Vec<SearchResult> = organic
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            let url = item.get("link").and_then(Value::as_str)?;
            Some(SearchResult {
                url: url.to_string(),
                title: item
                    .get("title")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string(),
                snippet: item
                    .get("snippet")
                    .and_then(Value::as_str)
                    .unwrap_or("")
                    .to_string(),
                rank: item
                    .get("position")
                    .and_then(Value::as_u64)
                    .map(|p| p as u32)
                    .unwrap_or(i as u32 + 1),
            })
        })
        .collect();
    hits.sort_by_key(|h| h.rank);
    hits
}

impl SearchBackend for SerperSearch {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn search(&self, query: &str, max_links: usize) -> Result<Vec<SearchResult>, ProviderError> {
        let http = client(self.timeout)?;
        let resp = http
            .post(&self.endpoint)
            .header("X-API-KEY", &self.api_key)
            .json(&json!({ "q": query, "num": max_links }))
            .send()
            .map_err(|e| ProviderError::from_reqwest(&e))?;
        let body: Value = check(resp)?
            .json()
            .map_err(|e| ProviderError::Malformed(e.to_string()))?;
        Ok(parse_search_response(&body))
    }
}

#[derive(Debug, Clone, Default)]
pub struct HttpPages;

impl PageBackend for HttpPages {
    fn fetch(&self, url: &str, timeout: Duration) -> Result<FetchedPage, ProviderError> {
        let http = client(timeout)?;
        let resp = http
            .get(url)
            .send()
            .map_err(|e| ProviderError::from_reqwest(&e))?;
        let resp = check(resp)?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp.text().map_err(|e| ProviderError::from_reqwest(&e))?;
        Ok(FetchedPage {
            status,
            content_type,
            body,
        })
    }
}
