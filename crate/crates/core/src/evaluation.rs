//! Automatic metrics over generation runs: Dist-n, semantic coverage of the
//! exemplar frames and sentence-level BLEU-2 against the exemplar.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{Frame, FrameError, FrameTagger};
use crate::text;

pub const DIST_ORDERS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n must be >= 1")]
    ZeroN,
    #[error("no {0}-grams in any response")]
    NoNgrams(usize),
    #[error("run is empty")]
    EmptyRun,
    #[error("no record has a non-empty exemplar frame set")]
    NoCoverage,
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// One line of a generations JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub context: Vec<String>,
    pub exemplar: String,
    pub frames: Vec<String>,
    pub response: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub responses: usize,
    pub exemplar_set_size: usize,
    /// Records left out of SemCov because their exemplar had no frames.
    pub sem_cov_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dist: BTreeMap<String, f64>,
    pub sem_cov: f64,
    pub avg_bleu2: f64,
    pub counts: Counts,
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

/// Distinct n-grams over total n-grams, pooled over all responses.
pub fn dist_n(responses: &[Vec<String>], n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::ZeroN);
    }
    let mut distinct: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            distinct.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::NoNgrams(n));
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Fraction of the exemplar's frame set found among the frames of
/// `generated`. `None` when the exemplar set is empty.
pub fn sem_cov(generated: &str, exemplar_frames: &BTreeSet<Frame>, tagger: &dyn FrameTagger) -> Option<f64> {
    if exemplar_frames.is_empty() {
        return None;
    }
    let got = tagger.extract_frames(generated).to_set();
    let hit = exemplar_frames.intersection(&got).count();
    Some(hit as f64 / exemplar_frames.len() as f64)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU with orders 1 and 2, uniform weights and brevity penalty.
/// An order with no clipped matches scores `1 / (total + 1)`.
pub fn sentence_bleu2(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=2 {
        let hyp = counts(hypothesis, n);
        let refc = counts(reference, n);
        let total = hypothesis.len().saturating_sub(n - 1);
        let matched: usize = hyp
            .iter()
            .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 2.0;
    }
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Mean sentence BLEU-2 of each generated text against its exemplar.
pub fn avg_bleu2(pairs: &[(String, String)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let sum: f64 = pairs
        .iter()
        .map(|(g, e)| sentence_bleu2(&text::tokenize(g), &text::tokenize(e)))
        .sum();
    Ok(sum / pairs.len() as f64)
}

pub fn evaluate_run(
    records: &[RunRecord],
    tagger: &dyn FrameTagger,
    exemplar_set_size: usize,
) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let tokens: Vec<Vec<String>> = records.iter().map(|r| text::tokenize(&r.response)).collect();
    let mut dist = BTreeMap::new();
    for n in DIST_ORDERS {
        match dist_n(&tokens, n) {
            Ok(v) => {
                dist.insert(n.to_string(), v);
            }
            Err(EvalError::NoNgrams(_)) if n > 1 => log::warn!("no {n}-grams in run; Dist-{n} omitted"),
            Err(e) => return Err(e),
        }
    }

    let mut covs = Vec::with_capacity(records.len());
    let mut excluded = 0;
    for r in records {
        let frames: BTreeSet<Frame> = r.frames.iter().map(|l| Frame::new(l)).collect::<Result<_, _>>()?;
        match sem_cov(&r.response, &frames, tagger) {
            Some(v) => covs.push(v),
            None => excluded += 1,
        }
    }
    if covs.is_empty() {
        return Err(EvalError::NoCoverage);
    }
    let pairs: Vec<(String, String)> = records.iter().map(|r| (r.response.clone(), r.exemplar.clone())).collect();
    Ok(MetricsReport {
        dist,
        sem_cov: covs.iter().sum::<f64>() / covs.len() as f64,
        avg_bleu2: avg_bleu2(&pairs)?,
        counts: Counts {
            responses: records.len(),
            exemplar_set_size,
            sem_cov_excluded: excluded,
        },
    })
}
