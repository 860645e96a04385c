//! Exemplar retrieval and frame-diverse subset selection.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ContextResponsePair;
use crate::frames::{Frame, FrameSequence, FrameTagger};
use crate::text;

pub const DIVERSITY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty response list")]
    EmptyIndex,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("reranker request failed: {0}")]
    Http(String),
    #[error("reranker returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
}

/// Sparse term-frequency vector.
pub type TermVector = BTreeMap<String, f64>;

pub fn term_vector<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> TermVector {
    let mut v = TermVector::new();
    for t in texts {
        for tok in text::tokenize(t) {
            *v.entry(tok).or_default() += 1.0;
        }
    }
    v
}

pub fn cosine(a: &TermVector, b: &TermVector) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small.iter().filter_map(|(k, x)| large.get(k).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub text: String,
    pub frames: FrameSequence,
    /// The context the response originally answered, when known.
    pub source_context: Vec<String>,
    /// Term vector of `source_context`, or of `text` when no context is known.
    pub features: TermVector,
}

impl IndexEntry {
    pub fn frame_set(&self) -> BTreeSet<Frame> {
        self.frames.to_set()
    }
}

/// Ranking backend. Returns one score per entry, higher is better.
pub trait Scorer: Send + Sync {
    fn score(&self, context: &[String], entries: &[IndexEntry]) -> Result<Vec<f64>, RetrievalError>;
}

/// Cosine between term vectors of the query context and each entry's
/// stored context.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosineScorer;

impl Scorer for TfCosineScorer {
    fn score(&self, context: &[String], entries: &[IndexEntry]) -> Result<Vec<f64>, RetrievalError> {
        let q = term_vector(context.iter().map(String::as_str));
        Ok(entries.iter().map(|e| cosine(&q, &e.features)).collect())
    }
}

#[derive(Serialize)]
struct RankRequest<'a> {
    context: &'a [String],
    candidates: Vec<&'a str>,
}

#[derive(Deserialize)]
struct RankResponse {
    scores: Vec<f64>,
}

/// Client for an external reranking service: `POST {base}/rank`.
#[derive(Debug, Clone)]
pub struct HttpReranker {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpReranker {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrievalError::Http(e.to_string()))?;
        Ok(HttpReranker {
            url: format!("{}/rank", base_url.trim_end_matches('/')),
            client,
        })
    }
}

impl Scorer for HttpReranker {
    fn score(&self, context: &[String], entries: &[IndexEntry]) -> Result<Vec<f64>, RetrievalError> {
        let body = RankRequest {
            context,
            candidates: entries.iter().map(|e| e.text.as_str()).collect(),
        };
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| RetrievalError::Http(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrievalError::Http(format!("{} returned {status}", self.url)));
        }
        let parsed: RankResponse = resp.json().map_err(|e| RetrievalError::Http(e.to_string()))?;
        if parsed.scores.len() != entries.len() {
            return Err(RetrievalError::ScoreCount {
                expected: entries.len(),
                got: parsed.scores.len(),
            });
        }
        Ok(parsed.scores)
    }
}

/// Tries `primary`; on error logs it and uses `fallback`.
pub struct FallbackScorer<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Scorer, F: Scorer> Scorer for FallbackScorer<P, F> {
    fn score(&self, context: &[String], entries: &[IndexEntry]) -> Result<Vec<f64>, RetrievalError> {
        match self.primary.score(context, entries) {
            Ok(s) => Ok(s),
            Err(e) => {
                log::warn!("primary scorer failed ({e}); using fallback");
                self.fallback.score(context, entries)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate<'a> {
    pub index: usize,
    pub entry: &'a IndexEntry,
    pub score: f64,
}

pub struct ExemplarIndex {
    entries: Vec<IndexEntry>,
    scorer: Box<dyn Scorer>,
}

impl std::fmt::Debug for ExemplarIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExemplarIndex").field("entries", &self.entries.len()).finish()
    }
}

impl ExemplarIndex {
    /// Index over bare responses; each is featurized by its own text.
    pub fn build(responses: &[String], tagger: &dyn FrameTagger) -> Result<Self, RetrievalError> {
        let items = responses.iter().map(|r| (r.clone(), Vec::new()));
        Self::from_items(items, tagger)
    }

    /// Index over corpus pairs, featurized by each response's source context.
    pub fn from_pairs(pairs: &[ContextResponsePair], tagger: &dyn FrameTagger) -> Result<Self, RetrievalError> {
        let items = pairs.iter().map(|p| (p.response.text.clone(), p.context_texts()));
        Self::from_items(items, tagger)
    }

    fn from_items<I>(items: I, tagger: &dyn FrameTagger) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (String, Vec<String>)>,
    {
        let entries: Vec<IndexEntry> = items
            .into_iter()
            .map(|(text, source_context)| {
                let features = if source_context.is_empty() {
                    term_vector([text.as_str()])
                } else {
                    term_vector(source_context.iter().map(String::as_str))
                };
                IndexEntry {
                    frames: tagger.extract_frames(&text),
                    text,
                    source_context,
                    features,
                }
            })
            .collect();
        if entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        Ok(ExemplarIndex {
            entries,
            scorer: Box::new(TfCosineScorer),
        })
    }

    pub fn with_scorer(mut self, scorer: Box<dyn Scorer>) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top `k` entries by descending score; ties keep index order.
    pub fn retrieve(&self, context: &[String], k: usize) -> Result<Vec<ScoredCandidate<'_>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        let scores = self.scorer.score(context, &self.entries)?;
        if scores.len() != self.entries.len() {
            return Err(RetrievalError::ScoreCount {
                expected: self.entries.len(),
                got: scores.len(),
            });
        }
        let mut ranked: Vec<ScoredCandidate> = self
            .entries
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(index, (entry, score))| ScoredCandidate { index, entry, score })
            .collect();
        // stable sort keeps index order on ties; NaN sinks to the bottom
        ranked.sort_by(|a, b| {
            let (x, y) = (nan_low(a.score), nan_low(b.score));
            y.total_cmp(&x)
        });
        ranked.truncate(k);
        Ok(ranked)
    }
}

fn nan_low(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// |a ∩ b| / |a ∪ b|, with two empty sets counted as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Greedy scan in rank order: keep the top candidate, then each candidate
/// whose frame-set Jaccard with every kept one is below the threshold.
/// Returns indices into `frame_sets`.
pub fn select_diverse_indices(frame_sets: &[BTreeSet<Frame>], size: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(size);
    for (i, set) in frame_sets.iter().enumerate() {
        if chosen.len() >= size {
            break;
        }
        if chosen
            .iter()
            .all(|&j| jaccard(set, &frame_sets[j]) < DIVERSITY_THRESHOLD)
        {
            chosen.push(i);
        }
    }
    chosen
}

pub fn select_diverse_subset<'a>(candidates: &[ScoredCandidate<'a>], size: usize) -> Vec<ScoredCandidate<'a>> {
    let sets: Vec<BTreeSet<Frame>> = candidates.iter().map(|c| c.entry.frame_set()).collect();
    select_diverse_indices(&sets, size)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}
