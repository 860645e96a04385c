//! Nucleus-sampled decoding conditioned on context and exemplar frames.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{softmax, BackendError, LmBackend};
use crate::corpus::{CorpusError, IntentExemplar, ScamEmail, Speaker, Utterance};
use crate::frames::FrameSequence;
use crate::sequence::{SequenceBuilder, SequenceError};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;
const MASS_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("no token left to sample after masking")]
    EmptyDistribution,
    #[error("prompt of {prompt} tokens plus {max_length} generated exceeds the backend context of {limit}")]
    ContextOverflow {
        prompt: usize,
        max_length: usize,
        limit: usize,
    },
    #[error("at least one exemplar is required")]
    NoExemplars,
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub top_p: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            top_p: 0.9,
            min_length: 4,
            max_length: 50,
            num_samples: 1,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenerationError::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.min_length < 1 || self.min_length > self.max_length {
            return Err(GenerationError::Config(format!(
                "need 1 <= min_length <= max_length, got {} and {}",
                self.min_length, self.max_length
            )));
        }
        if self.num_samples == 0 {
            return Err(GenerationError::Config("num_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedResponse {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub frames: FrameSequence,
    pub exemplar: Option<String>,
    pub context: Vec<String>,
    pub seed: u64,
}

/// Keeps the smallest descending-probability prefix whose mass reaches
/// `p` (plus anything tied with its last member) and renormalizes.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>, GenerationError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(GenerationError::Config(format!("top_p must be in (0, 1], got {p}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || probs.iter().any(|x| *x < 0.0 || x.is_nan()) {
        return Err(GenerationError::NotNormalized(sum));
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut cum = 0.0;
    let mut cutoff = 0.0;
    for &i in &order {
        cum += probs[i];
        cutoff = probs[i];
        if cum >= p - MASS_EPSILON {
            break;
        }
    }
    let mut out: Vec<f64> = probs.iter().map(|&x| if x > 0.0 && x >= cutoff { x } else { 0.0 }).collect();
    let kept: f64 = out.iter().sum();
    for x in &mut out {
        *x /= kept;
    }
    Ok(out)
}

/// Inverse-CDF draw from an unnormalized non-negative weight vector.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut cum = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last = Some(i);
        if target < cum {
            return Some(i);
        }
    }
    last
}

/// Seed for the `i`-th independent draw under base seed `seed`
/// (splitmix64 of `seed + i * golden-ratio constant`).
pub fn derive_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples one response. Reserved tokens are never sampled, and `<eos>`
/// is only allowed once `min_length` word tokens exist.
pub fn generate<B: LmBackend + ?Sized, R: Rng + ?Sized>(
    backend: &B,
    builder: &SequenceBuilder,
    context: &[Utterance],
    frames: &FrameSequence,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<(Vec<u32>, String), GenerationError> {
    config.validate()?;
    let tokenizer = builder.tokenizer();
    let special = tokenizer.special();
    let mut example = builder.inference_prompt(context, frames)?;
    let limit = backend.max_context();
    if example.len() + config.max_length > limit {
        return Err(GenerationError::ContextOverflow {
            prompt: example.len(),
            max_length: config.max_length,
            limit,
        });
    }
    let role = *example.role_ids.last().expect("prompt is never empty");
    let vocab = tokenizer.vocab_size();
    let mut generated = Vec::new();

    while generated.len() < config.max_length {
        let mut logits = backend.next_token_logits(&example)?;
        let allow_eos = generated.len() >= config.min_length;
        for (id, l) in logits.iter_mut().enumerate() {
            let id32 = id as u32;
            let allowed = id < vocab
                && (!tokenizer.is_reserved(id32) || (allow_eos && id32 == special.eos));
            if !allowed {
                *l = f32::NEG_INFINITY;
            }
        }
        if logits.iter().all(|l| *l == f32::NEG_INFINITY) {
            return Err(GenerationError::EmptyDistribution);
        }
        let probs = softmax(&logits);
        let filtered = nucleus_filter(&probs, config.top_p)?;
        let next = sample_index(&filtered, rng).ok_or(GenerationError::EmptyDistribution)? as u32;
        if next == special.eos {
            break;
        }
        generated.push(next);
        example.push(next, role);
    }
    let text = tokenizer.decode(&generated);
    Ok((generated, text))
}

/// `config.num_samples` independent draws, the `i`-th seeded with
/// `derive_seed(config.seed, i)`.
pub fn generate_samples<B: LmBackend + ?Sized>(
    backend: &B,
    builder: &SequenceBuilder,
    context: &[Utterance],
    frames: &FrameSequence,
    exemplar: Option<&str>,
    config: &GenerationConfig,
) -> Result<Vec<GeneratedResponse>, GenerationError> {
    config.validate()?;
    let context_texts: Vec<String> = context.iter().map(|u| u.text.clone()).collect();
    (0..config.num_samples as u64)
        .map(|i| {
            let seed = derive_seed(config.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (token_ids, text) = generate(backend, builder, context, frames, config, &mut rng)?;
            Ok(GeneratedResponse {
                text,
                token_ids,
                frames: frames.clone(),
                exemplar: exemplar.map(str::to_string),
                context: context_texts.clone(),
                seed,
            })
        })
        .collect()
}

/// One generation run per exemplar with the email body as a single-turn
/// context, grouped by intent. Exemplar `j` uses base seed
/// `derive_seed(config.seed, j)`.
pub fn generate_controlled<B: LmBackend + ?Sized>(
    backend: &B,
    builder: &SequenceBuilder,
    email: &ScamEmail,
    exemplars: &[IntentExemplar],
    config: &GenerationConfig,
) -> Result<BTreeMap<String, Vec<GeneratedResponse>>, GenerationError> {
    if exemplars.is_empty() {
        return Err(GenerationError::NoExemplars);
    }
    let context = vec![Utterance::new(Speaker::A, &email.body)?];
    let mut grouped: BTreeMap<String, Vec<GeneratedResponse>> = BTreeMap::new();
    for (j, ex) in exemplars.iter().enumerate() {
        let cfg = GenerationConfig {
            seed: derive_seed(config.seed, j as u64),
            ..*config
        };
        let out = generate_samples(backend, builder, &context, &ex.frames, Some(&ex.text), &cfg)?;
        grouped.entry(ex.intent.clone()).or_default().extend(out);
    }
    Ok(grouped)
}
