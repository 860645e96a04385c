//! Adapter contract for the autoregressive language model.
//!
//! A backend owns its weights and optimizer state. The pipeline talks to it
//! only through [`EncodedExample`]s: `forward` for scoring and decoding,
//! `train_step` for one optimizer update on a batch of candidate sets.

use std::path::Path;

use thiserror::Error;

use crate::sequence::{CandidateSet, EncodedExample, IGNORE};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("sequence of length {len} exceeds the backend context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("vocabulary can only grow: current {current}, requested {requested}")]
    ShrinkVocabulary { current: usize, requested: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{0}")]
    Other(String),
}

/// Raw scores for every position plus the classification logit read at
/// [`EncodedExample::cls_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `logits[i]` scores the token at position `i + 1`.
    pub logits: Vec<Vec<f32>>,
    pub cls_logit: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lm_loss_weight: f64,
    pub cls_loss_weight: f64,
}

/// Losses measured during a training step, before the update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLoss {
    /// Mean NLL over labelled positions of the batch.
    pub lm_loss: f64,
    /// Number of labelled positions behind `lm_loss`.
    pub lm_tokens: usize,
    /// Mean cross-entropy of the candidate classifier.
    pub cls_loss: f64,
}

pub trait LmBackend {
    fn vocab_size(&self) -> usize;

    fn max_context(&self) -> usize;

    /// Grows the vocabulary to `new_size`, keeping existing embedding rows.
    fn resize_vocabulary(&mut self, new_size: usize) -> Result<(), BackendError>;

    fn forward(&self, example: &EncodedExample) -> Result<ForwardOutput, BackendError>;

    /// Scores for the token following the last position.
    fn next_token_logits(&self, example: &EncodedExample) -> Result<Vec<f32>, BackendError> {
        let out = self.forward(example)?;
        out.logits
            .into_iter()
            .last()
            .ok_or_else(|| BackendError::InvalidBatch("empty sequence".into()))
    }

    /// One optimizer update on the weighted sum of the LM loss (gold
    /// candidates' labelled positions) and the candidate-classification loss.
    fn train_step(&mut self, batch: &[CandidateSet], config: &StepConfig) -> Result<StepLoss, BackendError>;

    fn save(&self, dir: &Path) -> Result<(), BackendError>;

    fn load(&mut self, dir: &Path) -> Result<(), BackendError>;

    /// Whether concurrent `forward` calls on a shared reference are allowed.
    fn is_reentrant(&self) -> bool {
        false
    }
}

/// Numerically stable log-softmax in f64.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f32::NEG_INFINITY, f32::max) as f64;
    if !max.is_finite() {
        return vec![f64::NEG_INFINITY; logits.len()];
    }
    let sum: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&x| x as f64 - log_z).collect()
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Sum of NLL over labelled positions and the number of those positions.
/// Position `i`'s label is scored by `logits[i - 1]`; rows that predict an
/// unlabelled position never contribute.
pub fn masked_lm_nll(logits: &[Vec<f32>], labels: &[i32]) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for (i, &label) in labels.iter().enumerate().skip(1) {
        if label == IGNORE {
            continue;
        }
        let lp = log_softmax(&logits[i - 1]);
        total -= lp[label as usize];
        count += 1;
    }
    (total, count)
}
