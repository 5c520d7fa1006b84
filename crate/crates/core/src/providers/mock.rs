//! Deterministic in-process provider doubles for tests and offline runs.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{
    ChatBackend, ChatRequest, EmbedBackend, FetchedPage, PageBackend, ProviderError, SearchBackend,
    SearchResult,
};

type ChatFn = dyn Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync;

enum ChatScript {
    Queue(Mutex<VecDeque<Result<String, ProviderError>>>),
    Func(Box<ChatFn>),
}

/// Chat backend driven by a fixed queue of outcomes or by a function of the
/// request. Function-driven mocks stay deterministic under concurrency.
pub struct MockChat {
    script: ChatScript,
    calls: AtomicUsize,
}

impl MockChat {
    /// Replays `outcomes` in order; further calls fail with `Other`.
    pub fn scripted(outcomes: Vec<Result<String, ProviderError>>) -> Self {
        Self {
            script: ChatScript::Queue(Mutex::new(outcomes.into())),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn constant(reply: &str) -> Self {
        let reply = reply.to_string();
        Self::from_fn(move |_| Ok(reply.clone()))
    }

    pub fn from_fn(
        f: impl Fn(&ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: ChatScript::Func(Box::new(f)),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockChat {
    fn endpoint(&self) -> String {
        "mock-chat".into()
    }

    fn send(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.script {
            ChatScript::Queue(q) => q
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or_else(|| Err(ProviderError::Other("mock script exhausted".into()))),
            ChatScript::Func(f) => f(req),
        }
    }
}

/// Offline chat stand-in: answers every prompt with a JSON option chosen
/// from a hash of the prompt text.
#[derive(Debug, Default)]
pub struct HashChat;

impl ChatBackend for HashChat {
    fn endpoint(&self) -> String {
        "hash-chat".into()
    }

    fn send(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        let digest = Sha256::digest(req.user_text().as_bytes());
        let option = ["A", "B", "C", "D"][(digest[0] % 4) as usize];
        Ok(format!(
            r#"{{"O":"{option}","R":"mock rationale {}"}}"#,
            hex::encode(&digest[..4])
        ))
    }
}

fn hash_u64(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Bag-of-tokens feature hashing into `dim` buckets, L2-normalized.
/// Identical texts embed identically; texts sharing tokens are similar.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for tok in text.split_whitespace() {
            let h = hash_u64(&tok.to_lowercase());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbedBackend for HashEmbedder {
    fn identity(&self) -> String {
        format!("hash-embedder-{}", self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Assigns each distinct text its own basis vector (first come, first served).
#[derive(Debug)]
pub struct OneHotEmbedder {
    dim: usize,
    vocab: Mutex<HashMap<String, usize>>,
}

impl OneHotEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vocab: Mutex::new(HashMap::new()),
        }
    }
}

impl EmbedBackend for OneHotEmbedder {
    fn identity(&self) -> String {
        format!("one-hot-{}", self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let mut vocab = self.vocab.lock().unwrap();
        texts
            .iter()
            .map(|t| {
                let next = vocab.len();
                let idx = *vocab.entry(t.clone()).or_insert(next);
                if idx >= self.dim {
                    return Err(ProviderError::Other(format!(
                        "one-hot vocabulary exceeds dimension {}",
                        self.dim
                    )));
                }
                let mut v = vec![0f32; self.dim];
                v[idx] = 1.0;
                Ok(v)
            })
            .collect()
    }
}

type EmbedFn = dyn Fn(&str) -> Vec<f32> + Send + Sync;

/// Embedding backend computed per text by a closure.
pub struct MockEmbedder {
    identity: String,
    f: Box<EmbedFn>,
    fail_on: Option<String>,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn from_fn(identity: &str, f: impl Fn(&str) -> Vec<f32> + Send + Sync + 'static) -> Self {
        Self {
            identity: identity.into(),
            f: Box::new(f),
            fail_on: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Fixed vectors by text; unknown texts embed to `fallback`.
    pub fn table(identity: &str, entries: Vec<(&str, Vec<f32>)>, fallback: Vec<f32>) -> Self {
        let map: HashMap<String, Vec<f32>> = entries
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self::from_fn(identity, move |t| {
            map.get(t).cloned().unwrap_or_else(|| fallback.clone())
        })
    }

    /// Any batch containing `text` fails with a timeout.
    pub fn failing_on(mut self, text: &str) -> Self {
        self.fail_on = Some(text.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl EmbedBackend for MockEmbedder {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(bad) = &self.fail_on {
            if texts.iter().any(|t| t == bad) {
                return Err(ProviderError::Timeout);
            }
        }
        Ok(texts.iter().map(|t| (self.f)(t)).collect())
    }
}

type SearchFn = dyn Fn(&str, usize) -> Result<Vec<SearchResult>, ProviderError> + Send + Sync;

pub struct MockSearch {
    f: Box<SearchFn>,
    calls: AtomicUsize,
}

impl MockSearch {
    pub fn from_fn(
        f: impl Fn(&str, usize) -> Result<Vec<SearchResult>, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Returns `n` hits at `https://example.test/{rank}` regardless of
    /// `max_links`; truncation is the client's job.
    pub fn with_hits(n: usize) -> Self {
        Self::from_fn(move |q, _| Ok(numbered_hits(q, n)))
    }

    /// Always fails with a retryable server error.
    pub fn failing() -> Self {
        Self::from_fn(|_, _| {
            Err(ProviderError::Server {
                status: 503,
                message: "mock search down".into(),
            })
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

pub fn numbered_hits(query: &str, n: usize) -> Vec<SearchResult> {
    (1..=n)
        .map(|rank| SearchResult {
            url: format!("https://example.test/{rank}"),
            title: format!("result {rank} for {query}"),
            snippet: String::new(),
            rank: rank as u32,
        })
        .collect()
}

impl SearchBackend for MockSearch {
    fn endpoint(&self) -> String {
        "mock-search".into()
    }

    fn search(&self, query: &str, max_links: usize) -> Result<Vec<SearchResult>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(query, max_links)
    }
}

/// Static set of pages by URL; unknown URLs answer 404.
#[derive(Debug, Default)]
pub struct MockPages {
    pages: HashMap<String, FetchedPage>,
    fetched: Mutex<Vec<String>>,
}

impl MockPages {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn html(self, url: &str, body: &str) -> Self {
        self.page(url, 200, Some("text/html; charset=utf-8"), body)
    }

    pub fn page(mut self, url: &str, status: u16, content_type: Option<&str>, body: &str) -> Self {
        self.pages.insert(
            url.into(),
            FetchedPage {
                status,
                content_type: content_type.map(str::to_string),
                body: body.into(),
            },
        );
        self
    }

    pub fn fetched(&self) -> Vec<String> {
        self.fetched.lock().unwrap().clone()
    }
}

impl PageBackend for MockPages {
    fn fetch(&self, url: &str, _timeout: Duration) -> Result<FetchedPage, ProviderError> {
        self.fetched.lock().unwrap().push(url.to_string());
        match self.pages.get(url) {
            Some(p) if (200..300).contains(&p.status) => Ok(p.clone()),
            Some(p) => Err(ProviderError::from_status(p.status, &p.body)),
            None => Err(ProviderError::from_status(404, "")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_queue_runs_out() {
        let m = MockChat::scripted(vec![Ok("x".into())]);
        let r = ChatRequest::new("m", vec![super::super::ChatMessage::user("q")]);
        assert_eq!(m.send(&r).unwrap(), "x");
        assert!(m.send(&r).is_err());
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn hash_embedder_is_unit_norm() {
        let e = HashEmbedder::new(32);
        let v = e.vector("কোষ বিভাজন mitosis");
        let n: f32 = v.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
        assert_eq!(v, e.vector("কোষ বিভাজন mitosis"));
    }

    #[test]
    fn hash_chat_is_deterministic() {
        let r = ChatRequest::new("m", vec![super::super::ChatMessage::user("q1")]);
        assert_eq!(HashChat.send(&r).unwrap(), HashChat.send(&r).unwrap());
    }
}
