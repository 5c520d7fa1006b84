//! Exact flat cosine-similarity index over corpus chunks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::providers::{Embedder, ProviderError};
use crate::textcorpus::Chunk;

pub const CACHE_FORMAT_VERSION: u32 = 1;
const EMBED_BATCH: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("cannot build an index from zero chunks")]
    Empty,
    #[error("embedding failed for chunks {chunk_ids:?}: {source}")]
    Embedding {
        chunk_ids: Vec<String>,
        #[source]
        source: ProviderError,
    },
    #[error("chunk {chunk_id} embedded with dimension {got}, index dimension is {expected}")]
    DimensionMismatch {
        chunk_id: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate chunk id {0}")]
    DuplicateChunkId(String),
    #[error("query embedding failed: {0}")]
    Query(#[source] ProviderError),
    #[error("query dimension {got} does not match index dimension {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index cache i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index cache {path} is unreadable: {message}")]
    CacheFormat { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: Vec<f32>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    entries: Vec<IndexEntry>,
    dimension: usize,
    fingerprint: String,
    embedder: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Local,
    Web,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    /// Chunk id for local passages, URL (or summary label) for web ones.
    pub source: String,
    pub text: String,
    /// Cosine similarity (local) or search rank (web).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub passages: Vec<Passage>,
    pub k_requested: usize,
    pub total_chars: usize,
    pub origin: Origin,
}

impl RetrievedContext {
    pub fn new(passages: Vec<Passage>, k_requested: usize, origin: Origin) -> Self {
        let total_chars = passages.iter().map(|p| p.text.chars().count()).sum();
        Self {
            passages,
            k_requested,
            total_chars,
            origin,
        }
    }

    pub fn empty(k_requested: usize, origin: Origin) -> Self {
        Self::new(Vec::new(), k_requested, origin)
    }

    pub fn is_empty(&self) -> bool {
        self.total_chars == 0
    }

    /// Passage texts joined by blank lines.
    pub fn joined_text(&self) -> String {
        self.passages
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

/// Cosine similarity accumulated in f64. Zero-norm vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Content hash over chunk ids, offsets, texts and the embedder identity.
pub fn fingerprint(chunks: &[Chunk], embedder_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("v{CACHE_FORMAT_VERSION}\n{embedder_id}\n").as_bytes());
    for c in chunks {
        h.update(format!("{}\t{}\t{}\t", c.chunk_id, c.char_start, c.char_len).as_bytes());
        h.update((c.text.len() as u64).to_le_bytes());
        h.update(c.text.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub embedder: String,
    pub dimension: usize,
    pub entries: usize,
}

fn cache_paths(dir: &Path, fp: &str) -> (PathBuf, PathBuf) {
    let stem = format!("index-{}", &fp[..16]);
    (
        dir.join(format!("{stem}.json")),
        dir.join(format!("{stem}.manifest.json")),
    )
}

impl VectorIndex {
    /// Assembles an index from pre-computed entries, checking dimensions and
    /// id uniqueness. An empty entry list is allowed.
    pub fn from_entries(entries: Vec<IndexEntry>, embedder: &str) -> Result<Self, IndexError> {
        let dimension = entries.first().map(|e| e.vector.len()).unwrap_or(0);
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.vector.len() != dimension {
                return Err(IndexError::DimensionMismatch {
                    chunk_id: e.chunk_id.clone(),
                    expected: dimension,
                    got: e.vector.len(),
                });
            }
            if !seen.insert(e.chunk_id.as_str()) {
                return Err(IndexError::DuplicateChunkId(e.chunk_id.clone()));
            }
        }
        let mut h = Sha256::new();
        h.update(embedder.as_bytes());
        for e in &entries {
            h.update(e.chunk_id.as_bytes());
            h.update(e.text.as_bytes());
        }
        Ok(Self {
            entries,
            dimension,
            fingerprint: hex::encode(h.finalize()),
            embedder: embedder.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Ranks every entry against `query` and returns the top `k` as
    /// `(entry index, score)`, highest score first, ties by ascending chunk id.
    pub fn top_k(&self, query: &[f32], k: usize) -> Result<Vec<(usize, f64)>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dimension {
            return Err(IndexError::QueryDimension {
                expected: self.dimension,
                got: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(query, &e.vector)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.entries[a.0].chunk_id.cmp(&self.entries[b.0].chunk_id))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn retrieve_by_vector(
        &self,
        query: &[f32],
        k: usize,
    ) -> Result<RetrievedContext, IndexError> {
        let passages = self
            .top_k(query, k)?
            .into_iter()
            .map(|(i, score)| Passage {
                source: self.entries[i].chunk_id.clone(),
                text: self.entries[i].text.clone(),
                score,
            })
            .collect();
        Ok(RetrievedContext::new(passages, k, Origin::Local))
    }

    /// Embeds `query` and returns the `k` most similar chunks.
    pub fn retrieve(
        &self,
        query: &str,
        k: usize,
        embedder: &Embedder,
    ) -> Result<RetrievedContext, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Ok(RetrievedContext::empty(k, Origin::Local));
        }
        let q = embedder.embed_one(query).map_err(IndexError::Query)?;
        self.retrieve_by_vector(&q, k)
    }

    fn save(&self, dir: &Path) -> Result<(), IndexError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| IndexError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let (data, manifest) = cache_paths(dir, &self.fingerprint);
        let body = serde_json::to_vec(self).map_err(|e| IndexError::CacheFormat {
            path: data.clone(),
            message: e.to_string(),
        })?;
        fs::write(&data, body).map_err(io(&data))?;
        let m = CacheManifest {
            format_version: CACHE_FORMAT_VERSION,
            fingerprint: self.fingerprint.clone(),
            embedder: self.embedder.clone(),
            dimension: self.dimension,
            entries: self.entries.len(),
        };
        let body = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        fs::write(&manifest, body).map_err(io(&manifest))?;
        Ok(())
    }

    /// Loads a cached index when its manifest matches `fp`.
    pub fn load_cached(dir: &Path, fp: &str) -> Result<Option<Self>, IndexError> {
        let (data, manifest) = cache_paths(dir, fp);
        let Ok(raw) = fs::read(&manifest) else {
            return Ok(None);
        };
        let m: CacheManifest = match serde_json::from_slice(&raw) {
            Ok(m) => m,
            Err(_) => return Ok(None),
        };
        if m.format_version != CACHE_FORMAT_VERSION || m.fingerprint != fp {
            return Ok(None);
        }
        let raw = fs::read(&data).map_err(|source| IndexError::Io {
            path: data.clone(),
            source,
        })?;
        let index: VectorIndex =
            serde_json::from_slice(&raw).map_err(|e| IndexError::CacheFormat {
                path: data.clone(),
                message: e.to_string(),
            })?;
        if index.fingerprint != fp || index.entries.len() != m.entries {
            return Ok(None);
        }
        Ok(Some(index))
    }
}

/// Embeds every chunk and assembles the index. With a cache directory, an
/// index whose fingerprint matches is loaded without any embedding calls,
/// and a freshly built one is written back.
pub fn build_index(
    chunks: &[Chunk],
    embedder: &Embedder,
    cache_dir: Option<&Path>,
) -> Result<VectorIndex, IndexError> {
    if chunks.is_empty() {
        return Err(IndexError::Empty);
    }
    let fp = fingerprint(chunks, &embedder.identity());
    if let Some(dir) = cache_dir {
        if let Some(idx) = VectorIndex::load_cached(dir, &fp)? {
            tracing::info!(entries = idx.len(), "loaded cached vector index");
            return Ok(idx);
        }
    }

    let mut entries = Vec::with_capacity(chunks.len());
    let mut dimension: Option<usize> = None;
    let mut seen = std::collections::HashSet::new();
    for batch in chunks.chunks(EMBED_BATCH) {
        let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
        let ids = || batch.iter().map(|c| c.chunk_id.clone()).collect::<Vec<_>>();
        let vectors = match embedder.embed(&texts) {
            Ok(v) => v,
            Err(ProviderError::Malformed(msg)) if msg.contains("dimension") => {
                // Within-batch mismatch: re-embed singly to name the chunk.
                return Err(locate_mismatch(batch, embedder, dimension).unwrap_or(
                    IndexError::Embedding {
                        chunk_ids: ids(),
                        source: ProviderError::Malformed(msg),
                    },
                ));
            }
            Err(source) => {
                return Err(IndexError::Embedding {
                    chunk_ids: ids(),
                    source,
                })
            }
        };
        for (chunk, vector) in batch.iter().zip(vectors) {
            let d = *dimension.get_or_insert(vector.len());
            if vector.len() != d {
                return Err(IndexError::DimensionMismatch {
                    chunk_id: chunk.chunk_id.clone(),
                    expected: d,
                    got: vector.len(),
                });
            }
            if !seen.insert(chunk.chunk_id.clone()) {
                return Err(IndexError::DuplicateChunkId(chunk.chunk_id.clone()));
            }
            entries.push(IndexEntry {
                chunk_id: chunk.chunk_id.clone(),
                vector,
                text: chunk.text.clone(),
            });
        }
    }

    let index = VectorIndex {
        dimension: dimension.unwrap_or(0),
        entries,
        fingerprint: fp,
        embedder: embedder.identity(),
    };
    if let Some(dir) = cache_dir {
        index.save(dir)?;
    }
    Ok(index)
}

fn locate_mismatch(
    batch: &[Chunk],
    embedder: &Embedder,
    known: Option<usize>,
) -> Option<IndexError> {
    let mut expected = known;
    for c in batch {
        let v = embedder.embed_one(&c.text).ok()?;
        let d = *expected.get_or_insert(v.len());
        if v.len() != d {
            return Some(IndexError::DimensionMismatch {
                chunk_id: c.chunk_id.clone(),
                expected: d,
                got: v.len(),
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::mock::MockEmbedder;
    use crate::providers::CallRuntime;
    use std::sync::Arc;

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            text: text.into(),
            char_start: 0,
            char_len: text.chars().count(),
        }
    }

    fn table_embedder(entries: Vec<(&str, Vec<f32>)>) -> (Arc<MockEmbedder>, Embedder) {
        let m = Arc::new(MockEmbedder::table("table", entries, vec![0.0, 0.0]));
        (
            m.clone(),
            Embedder::new(m, Arc::new(CallRuntime::instant())),
        )
    }

    #[test]
    fn three_vector_example() {
        let n = (0.9f32 * 0.9 + 0.1 * 0.1).sqrt();
        let (_, emb) = table_embedder(vec![
            ("c1", vec![1.0, 0.0]),
            ("c2", vec![0.0, 1.0]),
            ("c3", vec![0.9 / n, 0.1 / n]),
            ("query", vec![1.0, 0.0]),
        ]);
        let chunks = vec![chunk("c1", "c1"), chunk("c2", "c2"), chunk("c3", "c3")];
        let idx = build_index(&chunks, &emb, None).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.dimension(), 2);

        // Brute force: cosine of (1,0) with each entry.
        let brute: Vec<(&str, f64)> = vec![
            ("c1", 1.0),
            ("c2", 0.0),
            ("c3", 0.9 / (0.81f64 + 0.01).sqrt()),
        ];
        let ctx = idx.retrieve("query", 2, &emb).unwrap();
        let ids: Vec<_> = ctx.passages.iter().map(|p| p.source.as_str()).collect();
        assert_eq!(ids, vec!["c1", "c3"]);
        assert_eq!(ctx.passages[0].score, 1.0);
        assert!((ctx.passages[1].score - brute[2].1).abs() < 1e-6);
        assert!((ctx.passages[1].score - 0.9939).abs() < 1e-4);
        assert_eq!(ctx.origin, Origin::Local);
        assert_eq!(ctx.total_chars, 4);
    }

    #[test]
    fn k_larger_than_index_returns_all_sorted() {
        let (_, emb) = table_embedder(vec![
            ("a", vec![0.0, 1.0]),
            ("b", vec![1.0, 1.0]),
            ("q", vec![1.0, 0.0]),
        ]);
        let idx = build_index(&[chunk("a", "a"), chunk("b", "b")], &emb, None).unwrap();
        let ctx = idx.retrieve("q", 10, &emb).unwrap();
        assert_eq!(ctx.passages.len(), 2);
        assert_eq!(ctx.passages[0].source, "b");
        assert_eq!(ctx.k_requested, 10);
    }

    #[test]
    fn self_similarity_ranks_first() {
        let (_, emb) = table_embedder(vec![("x", vec![0.3, 0.4, 0.5]), ("y", vec![0.5, 0.4, 0.3])]);
        let idx = build_index(&[chunk("x", "x"), chunk("y", "y")], &emb, None).unwrap();
        let ctx = idx.retrieve_by_vector(&[0.3, 0.4, 0.5], 1).unwrap();
        assert_eq!(ctx.passages[0].source, "x");
        assert!((ctx.passages[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_chunk_id() {
        let entries = vec![
            IndexEntry {
                chunk_id: "b".into(),
                vector: vec![1.0, 0.0],
                text: "b".into(),
            },
            IndexEntry {
                chunk_id: "a".into(),
                vector: vec![2.0, 0.0],
                text: "a".into(),
            },
            IndexEntry {
                chunk_id: "c".into(),
                vector: vec![0.0, 1.0],
                text: "c".into(),
            },
        ];
        let idx = VectorIndex::from_entries(entries, "t").unwrap();
        let top = idx.top_k(&[1.0, 0.0], 3).unwrap();
        let ids: Vec<_> = top
            .iter()
            .map(|(i, _)| idx.entries()[*i].chunk_id.as_str())
            .collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn zero_vector_scores_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn dimension_mismatch_names_chunk() {
        let m = Arc::new(MockEmbedder::from_fn("m", |t| {
            if t == "odd" {
                vec![1.0; 3]
            } else {
                vec![1.0; 2]
            }
        }));
        let emb = Embedder::new(m, Arc::new(CallRuntime::instant()));
        let err = build_index(&[chunk("c0", "ok"), chunk("c1", "odd")], &emb, None).unwrap_err();
        match err {
            IndexError::DimensionMismatch {
                chunk_id,
                expected,
                got,
            } => {
                assert_eq!(chunk_id, "c1");
                assert_eq!((expected, got), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_across_batches() {
        let m = Arc::new(MockEmbedder::from_fn("m", |t| {
            if t == "late" {
                vec![1.0; 5]
            } else {
                vec![1.0; 2]
            }
        }));
        let emb = Embedder::new(m, Arc::new(CallRuntime::instant()));
        let mut chunks: Vec<Chunk> = (0..EMBED_BATCH)
            .map(|i| chunk(&format!("c{i:03}"), "x"))
            .collect();
        chunks.push(chunk("late-chunk", "late"));
        let err = build_index(&chunks, &emb, None).unwrap_err();
        assert!(
            matches!(err, IndexError::DimensionMismatch { ref chunk_id, .. } if chunk_id == "late-chunk")
        );
    }

    #[test]
    fn provider_failure_carries_batch() {
        let m = Arc::new(MockEmbedder::from_fn("m", |_| vec![1.0]).failing_on("bad"));
        let emb = Embedder::new(m, Arc::new(CallRuntime::instant()));
        let err = build_index(&[chunk("c0", "fine"), chunk("c1", "bad")], &emb, None).unwrap_err();
        match err {
            IndexError::Embedding { chunk_ids, source } => {
                assert_eq!(chunk_ids, vec!["c0", "c1"]);
                assert!(matches!(
                    source,
                    ProviderError::Unavailable { attempts: 4, .. }
                ));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cache_hit_makes_no_provider_calls() {
        let dir = tempfile::tempdir().unwrap();
        let (mock, emb) = table_embedder(vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let chunks = vec![chunk("a", "a"), chunk("b", "b")];
        let first = build_index(&chunks, &emb, Some(dir.path())).unwrap();
        let calls = mock.calls();
        assert!(calls > 0);
        let second = build_index(&chunks, &emb, Some(dir.path())).unwrap();
        assert_eq!(mock.calls(), calls);
        assert_eq!(first, second);

        // Changed corpus invalidates.
        let changed = vec![chunk("a", "a"), chunk("b", "b2")];
        build_index(&changed, &emb, Some(dir.path())).unwrap();
        assert!(mock.calls() > calls);
    }

    #[test]
    fn fingerprint_tracks_embedder_identity() {
        let chunks = vec![chunk("a", "a")];
        assert_ne!(fingerprint(&chunks, "e1"), fingerprint(&chunks, "e2"));
        assert_eq!(fingerprint(&chunks, "e1"), fingerprint(&chunks, "e1"));
    }

    #[test]
    fn empty_inputs() {
        let (_, emb) = table_embedder(vec![]);
        assert!(matches!(
            build_index(&[], &emb, None),
            Err(IndexError::Empty)
        ));
        let idx = VectorIndex::from_entries(vec![], "e").unwrap();
        let ctx = idx.retrieve("q", 3, &emb).unwrap();
        assert!(ctx.passages.is_empty());
        assert_eq!(ctx.total_chars, 0);
        assert!(matches!(
            idx.retrieve("q", 0, &emb),
            Err(IndexError::InvalidK)
        ));
    }

    #[test]
    fn cosine_scale_invariance() {
        let u = [0.3f32, -1.2, 2.0];
        let v = [1.0f32, 0.5, -0.25];
        let base = cosine(&u, &v);
        for alpha in [0.5f32, 2.0, 8.0] {
            let scaled: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            assert!((cosine(&scaled, &v) - base).abs() < 1e-6);
        }
        assert_eq!(cosine(&u, &v), cosine(&v, &u));
    }
}
