//! Word-level tokenizer with reserved control tokens and one atomic token
//! per frame label.
//!
//! Id layout: control tokens first (fixed order), then frame tokens in
//! sorted label order, then words by descending corpus frequency (ties in
//! lexicographic order). The layout is a pure function of the inputs, so
//! two builds over the same corpus produce the same fingerprint.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frames::Frame;
use crate::text;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const BOF: &str = "<bof>";
pub const BOR: &str = "<bor>";
pub const SPEAKER_A: &str = "<speaker1>";
pub const SPEAKER_B: &str = "<speaker2>";
pub const UNK: &str = "<unk>";

const CONTROL_TOKENS: [&str; 8] = [PAD, BOS, EOS, BOF, BOR, SPEAKER_A, SPEAKER_B, UNK];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("reading tokenizer {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("tokenizer file: {0}")]
    Format(String),
}

/// Reserved token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub bof: u32,
    pub bor: u32,
    pub speaker_a: u32,
    pub speaker_b: u32,
    pub unk: u32,
}

fn frame_token(frame: &Frame) -> String {
    format!("<frame:{}>", frame.as_str())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerFile {
    tokens: Vec<String>,
    num_frames: usize,
}

#[derive(Debug, Clone)]
pub struct WordTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    frames: Vec<Frame>,
    frame_ids: HashMap<Frame, u32>,
    special: SpecialTokens,
}

impl WordTokenizer {
    /// Builds the vocabulary from raw texts and the frame vocabulary.
    pub fn build<'a, I>(texts: I, frame_vocab: &BTreeSet<Frame>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in text::tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = CONTROL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(frame_vocab.iter().map(frame_token));
        tokens.extend(words.into_iter().map(|(w, _)| w));
        Self::from_tokens(tokens, frame_vocab.len()).expect("freshly built vocabulary is valid")
    }

    fn from_tokens(tokens: Vec<String>, num_frames: usize) -> Result<Self, TokenizerError> {
        if tokens.len() < CONTROL_TOKENS.len() + num_frames
            || tokens[..CONTROL_TOKENS.len()] != CONTROL_TOKENS.map(String::from)
        {
            return Err(TokenizerError::Format("control token block is missing".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::Format(format!("duplicate token {t:?}")));
            }
        }
        let mut frames = Vec::with_capacity(num_frames);
        let mut frame_ids = HashMap::with_capacity(num_frames);
        for (offset, tok) in tokens[CONTROL_TOKENS.len()..CONTROL_TOKENS.len() + num_frames]
            .iter()
            .enumerate()
        {
            let label = tok
                .strip_prefix("<frame:")
                .and_then(|s| s.strip_suffix('>'))
                .ok_or_else(|| TokenizerError::Format(format!("bad frame token {tok:?}")))?;
            let frame = Frame::new(label).map_err(|e| TokenizerError::Format(e.to_string()))?;
            frame_ids.insert(frame.clone(), (CONTROL_TOKENS.len() + offset) as u32);
            frames.push(frame);
        }
        let id = |s: &str| ids[s];
        let special = SpecialTokens {
            pad: id(PAD),
            bos: id(BOS),
            eos: id(EOS),
            bof: id(BOF),
            bor: id(BOR),
            speaker_a: id(SPEAKER_A),
            speaker_b: id(SPEAKER_B),
            unk: id(UNK),
        };
        Ok(WordTokenizer {
            tokens,
            ids,
            frames,
            frame_ids,
            special,
        })
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn frame_vocabulary(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame_id(&self, frame: &Frame) -> Option<u32> {
        self.frame_ids.get(frame).copied()
    }

    /// Inverse of [`frame_id`](Self::frame_id).
    pub fn frame_for_id(&self, id: u32) -> Option<&Frame> {
        let start = CONTROL_TOKENS.len() as u32;
        let idx = id.checked_sub(start)? as usize;
        self.frames.get(idx)
    }

    /// Control and frame tokens: never part of generated text.
    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < CONTROL_TOKENS.len() + self.frames.len()
    }

    pub fn encode(&self, input: &str) -> Vec<u32> {
        text::tokenize(input)
            .iter()
            .map(|t| self.ids.get(t.as_str()).copied().unwrap_or(self.special.unk))
            .collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Decodes word ids; reserved ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| !self.is_reserved(id))
            .filter_map(|&id| self.token(id))
            .collect();
        text::detokenize(&words)
    }

    /// Hex SHA-256 over the ordered vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        let file = TokenizerFile {
            tokens: self.tokens.clone(),
            num_frames: self.frames.len(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| TokenizerError::Format(e.to_string()))?;
        std::fs::write(path, json).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: TokenizerFile = serde_json::from_str(&raw).map_err(|e| TokenizerError::Format(e.to_string()))?;
        Self::from_tokens(file.tokens, file.num_frames)
    }
}
