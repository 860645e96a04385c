//! Training-time perturbation of frame sequences.
//!
//! Three independent perturbations, composed in this order:
//! drop each frame with probability `drop_rate`, swap adjacent pairs with
//! probability `shuffle_prob`, then insert `round(add_ratio * len)` random
//! vocabulary frames at random positions (length measured after dropping).
//!
//! All randomness comes from [`NoiseRng`] (ChaCha8), so a fixed seed gives
//! the same output on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{Frame, FrameSequence};

pub type NoiseRng = ChaCha8Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("{name} must be in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("add_ratio must be a finite value >= 0, got {0}")]
    AddRatio(f64),
    #[error("cannot add {0} random frames from an empty vocabulary")]
    EmptyVocabulary(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisingConfig {
    pub drop_rate: f64,
    pub shuffle_prob: f64,
    pub add_ratio: f64,
    pub seed: u64,
}

impl Default for NoisingConfig {
    fn default() -> Self {
        NoisingConfig {
            drop_rate: 0.15,
            shuffle_prob: 0.1,
            add_ratio: 0.30,
            seed: 0,
        }
    }
}

impl NoisingConfig {
    /// No perturbation at all.
    pub fn identity() -> Self {
        NoisingConfig {
            drop_rate: 0.0,
            shuffle_prob: 0.0,
            add_ratio: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        check_probability("drop_rate", self.drop_rate)?;
        check_probability("shuffle_prob", self.shuffle_prob)?;
        if !self.add_ratio.is_finite() || self.add_ratio < 0.0 {
            return Err(NoiseError::AddRatio(self.add_ratio));
        }
        Ok(())
    }

    pub fn rng(&self) -> NoiseRng {
        NoiseRng::seed_from_u64(self.seed)
    }
}

fn check_probability(name: &'static str, value: f64) -> Result<(), NoiseError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(NoiseError::Probability { name, value })
    }
}

fn with_frames(seq: &FrameSequence, frames: Vec<Frame>) -> FrameSequence {
    FrameSequence {
        frames,
        source_text: seq.source_text.clone(),
    }
}

/// Removes each frame independently with probability `rate`.
pub fn drop_frames<R: Rng + ?Sized>(seq: &FrameSequence, rate: f64, rng: &mut R) -> Result<FrameSequence, NoiseError> {
    check_probability("drop_rate", rate)?;
    let kept = seq
        .iter()
        .filter(|_| rng.random::<f64>() >= rate)
        .cloned()
        .collect();
    Ok(with_frames(seq, kept))
}

/// Left-to-right scan; at each position with a right neighbour, swaps the
/// pair with probability `prob` and skips past it.
pub fn shuffle_frames<R: Rng + ?Sized>(seq: &FrameSequence, prob: f64, rng: &mut R) -> Result<FrameSequence, NoiseError> {
    check_probability("shuffle_prob", prob)?;
    let mut frames = seq.frames.clone();
    let mut i = 0;
    while i + 1 < frames.len() {
        if rng.random::<f64>() < prob {
            frames.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(with_frames(seq, frames))
}

/// Number of frames inserted for a sequence of `len` frames.
pub fn added_count(len: usize, ratio: f64) -> usize {
    // f64::round is half away from zero
    (ratio * len as f64).round() as usize
}

/// Inserts `round(ratio * len)` frames drawn uniformly (with replacement)
/// from `vocab`, each at a uniformly random position.
pub fn add_random_frames<R: Rng + ?Sized>(
    seq: &FrameSequence,
    ratio: f64,
    vocab: &[Frame],
    rng: &mut R,
) -> Result<FrameSequence, NoiseError> {
    if !ratio.is_finite() || ratio < 0.0 {
        return Err(NoiseError::AddRatio(ratio));
    }
    let k = added_count(seq.len(), ratio);
    if k > 0 && vocab.is_empty() {
        return Err(NoiseError::EmptyVocabulary(k));
    }
    let mut frames = seq.frames.clone();
    for _ in 0..k {
        let frame = vocab[rng.random_range(0..vocab.len())].clone();
        let at = rng.random_range(0..=frames.len());
        frames.insert(at, frame);
    }
    Ok(with_frames(seq, frames))
}

/// drop → shuffle → add.
pub fn noise<R: Rng + ?Sized>(
    seq: &FrameSequence,
    config: &NoisingConfig,
    vocab: &[Frame],
    rng: &mut R,
) -> Result<FrameSequence, NoiseError> {
    config.validate()?;
    let dropped = drop_frames(seq, config.drop_rate, rng)?;
    let shuffled = shuffle_frames(&dropped, config.shuffle_prob, rng)?;
    add_random_frames(&shuffled, config.add_ratio, vocab, rng)
}

/// [`noise`] with a fresh generator seeded from `config.seed`.
pub fn noise_seeded(seq: &FrameSequence, config: &NoisingConfig, vocab: &[Frame]) -> Result<FrameSequence, NoiseError> {
    noise(seq, config, vocab, &mut config.rng())
}

/// True if `needle` appears in `haystack` in order (not necessarily
/// contiguously).
pub fn is_subsequence<T: PartialEq>(needle: &[T], haystack: &[T]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}
