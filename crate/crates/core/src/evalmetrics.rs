//! Answer accuracy and rationale-quality metrics over token sequences.
//!
//! Every function here is pure. Ratios are computed in their reduced
//! rational form where one exists so that hand-derived fixtures hold
//! exactly in floating point.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::OptionKey;
use crate::providers::{Embedder, ProviderError};
use crate::textcorpus::normalize_text;
use crate::vecindex::cosine;

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}|[^\s\p{P}]+").unwrap())
}

/// Shared tokenizer: normalize, split on whitespace, detach punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let norm = normalize_text(text);
    token_regex()
        .find_iter(&norm)
        .map(|m| m.as_str().to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl PrfScore {
    pub const ZERO: PrfScore = PrfScore {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("predictions ({predictions}) and golds ({golds}) differ in length")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("accuracy over zero questions")]
    Empty,
    #[error("bleu weights must be non-empty, non-negative and sum to 1")]
    BadWeights,
}

/// Fraction of predictions equal to gold. `None` (failed or no answer)
/// always counts as wrong.
pub fn accuracy(
    predictions: &[Option<OptionKey>],
    golds: &[OptionKey],
) -> Result<f64, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| **p == Some(**g))
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

/// Clipped multiset intersection size of two count maps.
fn clipped_matches<K: Eq + Hash>(cand: &HashMap<K, usize>, reference: &HashMap<K, usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// ROUGE-n style precision, recall and F₁ over n-grams.
pub fn ngram_prf<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> PrfScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    if candidate.len() < n || reference.len() < n {
        return PrfScore::ZERO;
    }
    let c_total = candidate.len() + 1 - n;
    let r_total = reference.len() + 1 - n;
    let m = clipped_matches(&ngram_counts(candidate, n), &ngram_counts(reference, n));
    if m == 0 {
        return PrfScore::ZERO;
    }
    PrfScore {
        precision: m as f64 / c_total as f64,
        recall: m as f64 / r_total as f64,
        f: (2 * m) as f64 / (c_total + r_total) as f64,
    }
}

pub fn lcs_length<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L with recall weighted by `beta`.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], reference: &[S], beta: f64) -> PrfScore {
    assert!(beta > 0.0, "beta must be positive");
    if candidate.is_empty() || reference.is_empty() {
        return PrfScore::ZERO;
    }
    let l = lcs_length(candidate, reference);
    if l == 0 {
        return PrfScore::ZERO;
    }
    let (c, r, l) = (candidate.len() as f64, reference.len() as f64, l as f64);
    let b2 = beta * beta;
    PrfScore {
        precision: l / c,
        recall: l / r,
        // (1+β²)PR / (R+β²P) with P = l/c, R = l/r.
        f: (1.0 + b2) * l / (c + b2 * r),
    }
}

/// Exact-match unigram alignment: each candidate token, left to right,
/// takes the earliest unused reference position holding the same token.
pub fn meteor_alignment<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    candidate
        .iter()
        .map(|tok| {
            let pos = reference
                .iter()
                .enumerate()
                .position(|(j, r)| !used[j] && r.as_ref() == tok.as_ref())?;
            used[pos] = true;
            Some(pos)
        })
        .collect()
}

/// METEOR with exact matching only: F_mean × (1 − 0.5 × (chunks/matches)³).
pub fn meteor<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    let align = meteor_alignment(candidate, reference);
    let matches = align.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let (m, c, r) = (
        matches as f64,
        candidate.len() as f64,
        reference.len() as f64,
    );
    // 10PR / (R + 9P) with P = m/c, R = m/r.
    let f_mean = 10.0 * m / (c + 9.0 * r);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

pub const BLEU1_WEIGHTS: [f64; 1] = [1.0];
pub const BLEU2_WEIGHTS: [f64; 2] = [0.5, 0.5];
const SMOOTHING_EPSILON: f64 = 0.1;

/// Corpus-free sentence BLEU against one or more references.
///
/// With `smoothing` off, any zero n-gram precision gives 0. With it on, a
/// zero match count is replaced by a small epsilon.
pub fn bleu<S: AsRef<str>>(
    candidate: &[S],
    references: &[&[S]],
    weights: &[f64],
    smoothing: bool,
) -> Result<f64, MetricError> {
    let wsum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| *w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(MetricError::BadWeights);
    }
    if candidate.is_empty() || references.is_empty() {
        return Ok(0.0);
    }

    let mut fractions: Vec<(f64, f64)> = Vec::with_capacity(weights.len());
    for n in 1..=weights.len() {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let m = clipped_matches(&cand, &max_ref);
        let num = match (m, smoothing) {
            (0, false) => return Ok(0.0),
            (0, true) => SMOOTHING_EPSILON,
            (m, _) => m as f64,
        };
        fractions.push((num, total as f64));
    }

    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };

    let uniform = weights.iter().all(|w| *w == weights[0]);
    let geo = if uniform {
        let num: f64 = fractions.iter().map(|f| f.0).product();
        let den: f64 = fractions.iter().map(|f| f.1).product();
        (num / den).powf(weights[0])
    } else {
        fractions
            .iter()
            .zip(weights)
            .map(|((num, den), w)| w * (num / den).ln())
            .sum::<f64>()
            .exp()
    };
    Ok(bp * geo)
}

/// Per-token embeddings for BERTScore.
pub trait TokenEmbedder {
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

impl TokenEmbedder for Embedder {
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let mut distinct: Vec<String> = tokens.to_vec();
        distinct.sort();
        distinct.dedup();
        let vectors = self.embed(&distinct)?;
        let table: HashMap<&str, &Vec<f32>> = distinct
            .iter()
            .map(String::as_str)
            .zip(vectors.iter())
            .collect();
        Ok(tokens.iter().map(|t| table[t.as_str()].clone()).collect())
    }
}

/// Greedy-matching BERTScore F₁ without idf weighting. Per-token maximum
/// cosines are clamped to [0, 1].
pub fn bertscore_f1(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn TokenEmbedder,
) -> Result<f64, ProviderError> {
    if candidate.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let cv = embedder.embed_tokens(candidate)?;
    let rv = embedder.embed_tokens(reference)?;
    if cv.len() != candidate.len() || rv.len() != reference.len() {
        return Err(ProviderError::Malformed(
            "token embedder returned wrong vector count".into(),
        ));
    }
    let greedy = |from: &[Vec<f32>], to: &[Vec<f32>]| -> f64 {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| cosine(a, b))
                    .fold(f64::NEG_INFINITY, f64::max)
                    .clamp(0.0, 1.0)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let p = greedy(&cv, &rv);
    let r = greedy(&rv, &cv);
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Rationale-quality scores for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TextScores {
    pub bert_f1: f64,
    pub meteor: f64,
    pub rouge1: PrfScore,
    pub rouge2: PrfScore,
    pub rouge_l: PrfScore,
    pub bleu1: f64,
    pub bleu2: f64,
}

impl TextScores {
    pub fn is_finite(&self) -> bool {
        [
            self.bert_f1,
            self.meteor,
            self.rouge1.f,
            self.rouge2.f,
            self.rouge_l.f,
            self.bleu1,
            self.bleu2,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub rouge_l_beta: f64,
    pub bleu_smoothing: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            rouge_l_beta: 1.0,
            bleu_smoothing: false,
        }
    }
}

/// Per-question metrics: answer correctness plus rationale scores when a
/// gold rationale exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub correct: u8,
    pub text: Option<TextScores>,
}

pub fn score_text(
    candidate: &str,
    reference: &str,
    embedder: &dyn TokenEmbedder,
    opts: &MetricOptions,
) -> Result<TextScores, ProviderError> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    let refs = [r.as_slice()];
    Ok(TextScores {
        bert_f1: bertscore_f1(&c, &r, embedder)?,
        meteor: meteor(&c, &r),
        rouge1: ngram_prf(&c, &r, 1),
        rouge2: ngram_prf(&c, &r, 2),
        rouge_l: rouge_l(&c, &r, opts.rouge_l_beta),
        bleu1: bleu(&c, &refs, &BLEU1_WEIGHTS, opts.bleu_smoothing).expect("valid weights"),
        bleu2: bleu(&c, &refs, &BLEU2_WEIGHTS, opts.bleu_smoothing).expect("valid weights"),
    })
}
