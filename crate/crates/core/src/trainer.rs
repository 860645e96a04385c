//! Fine-tuning loop: joint language-modeling and next-utterance
//! classification over noised-frame sequences, with validation-based early
//! stopping and best-checkpoint selection.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{masked_lm_nll, BackendError, LmBackend, StepConfig};
use crate::corpus::{ContextResponsePair, Utterance};
use crate::noising::{self, NoiseError, NoisingConfig};
use crate::sequence::{CandidateSet, SequenceBuilder, SequenceError};
use crate::tokenizer::{TokenizerError, WordTokenizer};

pub const WEIGHTS_DIR: &str = "weights";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";

const DISTRACTOR_RETRIES: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("every response in the corpus equals the gold response; no distractor available")]
    NoDistractor,
    #[error("backend vocabulary ({backend}) is smaller than the tokenizer vocabulary ({tokenizer})")]
    VocabularyMismatch { backend: usize, tokenizer: usize },
    #[error("backend failure during {stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

fn backend_err(stage: &'static str) -> impl FnOnce(BackendError) -> TrainError {
    move |source| TrainError::Backend { stage, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub num_candidates: usize,
    pub lm_loss_weight: f64,
    pub cls_loss_weight: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 6.25e-5,
            weight_decay: 0.01,
            batch_size: 2,
            max_epochs: 10,
            num_candidates: 2,
            lm_loss_weight: 1.0,
            cls_loss_weight: 1.0,
            early_stop_patience: 2,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1");
        }
        if self.num_candidates < 2 {
            return fail("num_candidates must be >= 2");
        }
        if self.lm_loss_weight < 0.0 || self.cls_loss_weight < 0.0 {
            return fail("loss weights must be >= 0");
        }
        Ok(())
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            lm_loss_weight: self.lm_loss_weight,
            cls_loss_weight: self.cls_loss_weight,
        }
    }
}

/// Tracks validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    epochs_without_improvement: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            epochs_without_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some((_, best)) => loss < best,
        };
        if improved {
            self.best = Some((epoch, loss));
            self.epochs_without_improvement = 0;
        } else {
            self.epochs_without_improvement += 1;
        }
        Observation {
            improved,
            stop: !improved && self.epochs_without_improvement >= self.patience,
        }
    }

    /// `(epoch, loss)` of the best observation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub frame_vocab: Vec<String>,
    pub tokenizer_fingerprint: String,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Checkpoint {
    pub fn weights_dir(&self) -> PathBuf {
        self.dir.join(WEIGHTS_DIR)
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.dir.join(TOKENIZER_FILE)
    }

    fn err(dir: &Path, message: impl ToString) -> TrainError {
        TrainError::Checkpoint {
            path: dir.display().to_string(),
            message: message.to_string(),
        }
    }

    /// Writes weights, tokenizer and manifest into `dir`.
    pub fn write<B: LmBackend + ?Sized>(
        dir: &Path,
        backend: &B,
        tokenizer: &WordTokenizer,
        manifest: Manifest,
    ) -> Result<Checkpoint, TrainError> {
        std::fs::create_dir_all(dir.join(WEIGHTS_DIR)).map_err(|e| Self::err(dir, e))?;
        backend.save(&dir.join(WEIGHTS_DIR)).map_err(backend_err("save"))?;
        tokenizer.save(dir.join(TOKENIZER_FILE))?;
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Self::err(dir, e))?;
        std::fs::write(dir.join(MANIFEST_FILE), json).map_err(|e| Self::err(dir, e))?;
        Ok(Checkpoint {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Reads the manifest and tokenizer, checking that they agree.
    pub fn open(dir: &Path) -> Result<(Checkpoint, WordTokenizer), TrainError> {
        let raw = std::fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Self::err(dir, e))?;
        let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| Self::err(dir, e))?;
        let tokenizer = WordTokenizer::load(dir.join(TOKENIZER_FILE))?;
        if tokenizer.fingerprint() != manifest.tokenizer_fingerprint {
            return Err(Self::err(dir, "tokenizer fingerprint does not match manifest"));
        }
        let vocab: Vec<String> = tokenizer.frame_vocabulary().iter().map(|f| f.to_string()).collect();
        if vocab != manifest.frame_vocab {
            return Err(Self::err(dir, "frame vocabulary does not match manifest"));
        }
        Ok((
            Checkpoint {
                dir: dir.to_path_buf(),
                manifest,
            },
            tokenizer,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_lm_loss: f64,
    pub train_cls_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Examples skipped because they did not fit the sequence limit.
    pub skipped: usize,
}

/// Uniformly samples the response of another pair whose text differs from
/// the gold response.
pub fn sample_distractor<'p, R: Rng + ?Sized>(
    pairs: &'p [ContextResponsePair],
    gold_index: usize,
    rng: &mut R,
) -> Result<&'p Utterance, TrainError> {
    let gold = &pairs[gold_index].response.text;
    if pairs.len() > 1 {
        for _ in 0..DISTRACTOR_RETRIES {
            let j = rng.random_range(0..pairs.len());
            if j != gold_index && pairs[j].response.text != *gold {
                return Ok(&pairs[j].response);
            }
        }
    }
    let eligible: Vec<usize> = (0..pairs.len())
        .filter(|&j| pairs[j].response.text != *gold)
        .collect();
    if eligible.is_empty() {
        return Err(TrainError::NoDistractor);
    }
    Ok(&pairs[eligible[rng.random_range(0..eligible.len())]].response)
}

fn sample_distractors<'p, R: Rng + ?Sized>(
    pairs: &'p [ContextResponsePair],
    gold_index: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<&'p Utterance>, TrainError> {
    let mut out: Vec<&Utterance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let d = sample_distractor(pairs, gold_index, rng)?;
        if !out.iter().any(|o| o.text == d.text) {
            out.push(d);
        }
        attempts += 1;
        if attempts > count * DISTRACTOR_RETRIES {
            return Err(TrainError::NoDistractor);
        }
    }
    Ok(out)
}

/// Mean per-token NLL over response positions, conditioned on the
/// un-noised gold frames.
pub fn validate<B: LmBackend + ?Sized>(
    pairs: &[ContextResponsePair],
    backend: &B,
    builder: &SequenceBuilder,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut total = 0.0;
    let mut count = 0;
    for pair in pairs {
        let example = match builder.training_sequence(pair, &pair.response_frames) {
            Ok(ex) => ex,
            Err(SequenceError::TooLong { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let out = backend.forward(&example).map_err(backend_err("validation"))?;
        let (nll, n) = masked_lm_nll(&out.logits, &example.lm_labels);
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(TrainError::EmptyValidationSet);
    }
    Ok(total / count as f64)
}

/// Everything `train` needs besides the data and the backend.
pub struct TrainSetup<'a> {
    pub builder: &'a SequenceBuilder<'a>,
    pub config: &'a TrainingConfig,
    pub noise: &'a NoisingConfig,
    pub checkpoint_dir: &'a Path,
    /// Stored verbatim in the checkpoint manifest.
    pub config_snapshot: serde_json::Value,
}

pub fn train<B: LmBackend + ?Sized>(
    pairs: &[ContextResponsePair],
    valid_pairs: &[ContextResponsePair],
    backend: &mut B,
    setup: &TrainSetup,
) -> Result<TrainReport, TrainError> {
    let config = setup.config;
    config.validate()?;
    setup.noise.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if valid_pairs.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let builder = setup.builder;
    let tokenizer = builder.tokenizer();
    if backend.vocab_size() < tokenizer.vocab_size() {
        return Err(TrainError::VocabularyMismatch {
            backend: backend.vocab_size(),
            tokenizer: tokenizer.vocab_size(),
        });
    }
    let frame_vocab = tokenizer.frame_vocabulary().to_vec();
    let step = config.step_config();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = setup.noise.rng();
    let mut early = EarlyStopping::new(config.early_stop_patience);
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut lm_sum, mut lm_tokens, mut cls_sum, mut cls_n) = (0.0, 0usize, 0.0, 0usize);

        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<CandidateSet> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = &pairs[i];
                let frames = noising::noise(&pair.response_frames, setup.noise, &frame_vocab, &mut noise_rng)?;
                let distractors = sample_distractors(pairs, i, config.num_candidates - 1, &mut order_rng)?;
                match builder.candidate_set(pair, &frames, &distractors) {
                    Ok(set) => batch.push(set),
                    Err(SequenceError::TooLong { .. }) => {
                        if epoch == 1 {
                            skipped += 1;
                        }
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if batch.is_empty() {
                continue;
            }
            let loss = backend.train_step(&batch, &step).map_err(backend_err("training step"))?;
            lm_sum += loss.lm_loss * loss.lm_tokens as f64;
            lm_tokens += loss.lm_tokens;
            cls_sum += loss.cls_loss * batch.len() as f64;
            cls_n += batch.len();
        }
        if lm_tokens == 0 {
            return Err(TrainError::EmptyTrainingSet);
        }

        let val_loss = validate(valid_pairs, backend, builder)?;
        let stats = EpochStats {
            epoch,
            train_lm_loss: lm_sum / lm_tokens as f64,
            train_cls_loss: cls_sum / cls_n.max(1) as f64,
            val_loss,
        };
        info!(
            "epoch {epoch}: train lm {:.4} cls {:.4} | val lm {:.4}",
            stats.train_lm_loss, stats.train_cls_loss, stats.val_loss
        );
        history.push(stats);

        let obs = early.observe(epoch, val_loss);
        if obs.improved {
            let manifest = Manifest {
                config: setup.config_snapshot.clone(),
                frame_vocab: frame_vocab.iter().map(|f| f.to_string()).collect(),
                tokenizer_fingerprint: tokenizer.fingerprint(),
                epoch,
                val_loss,
            };
            best = Some(Checkpoint::write(setup.checkpoint_dir, backend, tokenizer, manifest)?);
        }
        if obs.stop {
            info!("early stopping after epoch {epoch}");
            break;
        }
    }
    if skipped > 0 {
        warn!("{skipped} training examples exceeded the sequence limit and were skipped");
    }
    let checkpoint = best.expect("first epoch always improves");
    backend
        .load(&checkpoint.weights_dir())
        .map_err(backend_err("restoring best checkpoint"))?;
    Ok(TrainReport {
        checkpoint,
        history,
        skipped,
    })
}
