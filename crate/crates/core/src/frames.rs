//! Frame extraction: turns an utterance into its ordered sequence of
//! semantic-frame labels.
//!
//! The default backend is a deterministic lexicon tagger. Lexical units
//! (single words or multiword phrases) map to FrameNet-style frame labels;
//! a fixed set of augmented tokens (wh-words, `yes`, `no`, `?` and personal
//! pronouns) stands in for words that have no FrameNet frame. Any other
//! frame-semantic parser can be plugged in by implementing [`FrameTagger`].
//!
//! Matching rules, in priority order at each token position:
//!
//! 1. the longest lexicon match starting at the position (multiword units
//!    first; ties go to the entry that appears first in the lexicon file);
//! 2. an augmented token on the same single-token span beats a one-token
//!    lexicon match;
//! 3. a match emits only the first frame label stored for that unit.
//!
//! Tokens are compared through [`lemma_candidates`], a small suffix-stripping
//! lemmatizer, so `eggs` matches a lexicon entry `egg`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("invalid frame label {0:?}")]
    InvalidLabel(String),
    #[error("lexicon line {line}: expected 2 tab-separated columns, found {found}")]
    MalformedRow { line: usize, found: usize },
    #[error("lexicon line {line}: empty lexical unit")]
    EmptyUnit { line: usize },
    #[error("lexicon contains no entries")]
    EmptyLexicon,
    #[error("reading lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Canonical frame label. FrameNet names are uppercased with `_` rewritten to
/// `-` (`Body_parts` becomes `BODY-PARTS`); augmented tokens such as `?` keep
/// their surface form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Frame(String);

impl Frame {
    pub fn new(label: &str) -> Result<Self, FrameError> {
        let trimmed = label.trim();
        if trimmed.is_empty() || trimmed.chars().any(char::is_whitespace) {
            return Err(FrameError::InvalidLabel(label.to_string()));
        }
        Ok(Frame(trimmed.to_uppercase().replace('_', "-")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Frame {
    type Error = FrameError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Frame::new(&value)
    }
}

impl From<Frame> for String {
    fn from(frame: Frame) -> String {
        frame.0
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered frame labels extracted from a text. Repeats are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Self {
        FrameSequence {
            frames,
            source_text: None,
        }
    }

    /// Parses whitespace-separated labels, e.g. `"FOOD USEFULNESS BODY-PARTS"`.
    pub fn parse(labels: &str) -> Result<Self, FrameError> {
        labels
            .split_whitespace()
            .map(Frame::new)
            .collect::<Result<Vec<_>, _>>()
            .map(FrameSequence::new)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }

    pub fn labels(&self) -> Vec<String> {
        self.frames.iter().map(|f| f.0.clone()).collect()
    }

    /// Deduplicated label set.
    pub fn to_set(&self) -> BTreeSet<Frame> {
        self.frames.iter().cloned().collect()
    }
}

impl fmt::Display for FrameSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<&str> = self.frames.iter().map(Frame::as_str).collect();
        f.write_str(&labels.join(" "))
    }
}

/// Adapter contract for frame-semantic taggers.
pub trait FrameTagger: Send + Sync {
    fn extract_frames(&self, text: &str) -> FrameSequence;

    /// Every label this tagger can emit, plus augmented tokens.
    fn frame_vocabulary(&self) -> BTreeSet<Frame>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentedKind {
    WhWord,
    Answer,
    QuestionMark,
    Pronoun,
}

const WH_WORDS: [&str; 7] = ["why", "how", "what", "who", "when", "where", "which"];
const ANSWERS: [&str; 2] = ["yes", "no"];
const PRONOUNS: [&str; 7] = ["i", "you", "he", "she", "it", "we", "they"];

/// Non-FrameNet control tokens added to the frame vocabulary.
#[derive(Debug, Clone)]
pub struct AugmentedTokens {
    by_surface: HashMap<String, (Frame, AugmentedKind)>,
}

impl Default for AugmentedTokens {
    fn default() -> Self {
        let mut by_surface = HashMap::new();
        let mut add = |surface: &str, kind| {
            let frame = Frame::new(surface).expect("built-in augmented label");
            by_surface.insert(surface.to_string(), (frame, kind));
        };
        for w in WH_WORDS {
            add(w, AugmentedKind::WhWord);
        }
        for w in ANSWERS {
            add(w, AugmentedKind::Answer);
        }
        add("?", AugmentedKind::QuestionMark);
        for w in PRONOUNS {
            add(w, AugmentedKind::Pronoun);
        }
        AugmentedTokens { by_surface }
    }
}

impl AugmentedTokens {
    pub fn lookup(&self, token: &str) -> Option<&(Frame, AugmentedKind)> {
        self.by_surface.get(token)
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.by_surface.values().map(|(f, _)| f)
    }

    pub fn len(&self) -> usize {
        self.by_surface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_surface.is_empty()
    }
}

/// One lexical unit with the frames it evokes, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexicalUnit {
    pub words: Vec<String>,
    pub frames: Vec<Frame>,
}

/// Lexicon-backed frame tagger.
#[derive(Debug, Clone, Default)]
pub struct FrameLexicon {
    units: Vec<LexicalUnit>,
    by_key: HashMap<String, usize>,
    /// first word -> unit indices, in file order
    by_first_word: HashMap<String, Vec<usize>>,
    augmented: AugmentedTokens,
    emit_pronouns: bool,
}

/// Candidate lemmas for a lowercased token, in lookup order. The surface form
/// always comes first.
///
/// Rules: plural `-ies → -y`, `-es`, `-s` (not `-ss`); gerund `-ing` (plain,
/// `+e`, undoubled consonant); past `-ed` (plain, `-d` only, undoubled).
pub fn lemma_candidates(token: &str) -> Vec<String> {
    let mut out = vec![token.to_string()];
    let n = token.len();
    if !token.is_ascii() {
        return out;
    }
    let mut push = |s: String| {
        if !s.is_empty() && !out.contains(&s) {
            out.push(s);
        }
    };
    if n > 4 && token.ends_with("ies") {
        push(format!("{}y", &token[..n - 3]));
    }
    if n > 3 && token.ends_with("es") {
        push(token[..n - 2].to_string());
    }
    if n > 3 && token.ends_with('s') && !token.ends_with("ss") {
        push(token[..n - 1].to_string());
    }
    if n > 5 && token.ends_with("ing") {
        let stem = &token[..n - 3];
        push(stem.to_string());
        push(format!("{stem}e"));
        push(undouble(stem));
    }
    if n > 4 && token.ends_with("ed") {
        let stem = &token[..n - 2];
        push(stem.to_string());
        push(token[..n - 1].to_string());
        push(undouble(stem));
    }
    out
}

fn undouble(stem: &str) -> String {
    let b = stem.as_bytes();
    if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] && !b"aeiou".contains(&b[b.len() - 1]) {
        stem[..stem.len() - 1].to_string()
    } else {
        stem.to_string()
    }
}

impl FrameLexicon {
    /// Empty lexicon: only augmented tokens are tagged.
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether pronoun tokens (`I`, `YOU`, ...) are emitted as frames. They
    /// are always part of the frame vocabulary; emission is off by default.
    pub fn with_pronoun_emission(mut self, emit: bool) -> Self {
        self.emit_pronouns = emit;
        self
    }

    pub fn emits_pronouns(&self) -> bool {
        self.emit_pronouns
    }

    /// Adds (or extends) a lexical unit. Repeated units merge, keeping the
    /// first-seen frame order.
    pub fn insert(&mut self, unit: &str, frame: Frame) -> Result<(), FrameError> {
        let words = text::tokenize(unit);
        if words.is_empty() {
            return Err(FrameError::EmptyUnit { line: 0 });
        }
        self.insert_words(words, frame);
        Ok(())
    }

    fn insert_words(&mut self, words: Vec<String>, frame: Frame) {
        let key = words.join(" ");
        if let Some(&idx) = self.by_key.get(&key) {
            let unit = &mut self.units[idx];
            if !unit.frames.contains(&frame) {
                unit.frames.push(frame);
            }
            return;
        }
        let idx = self.units.len();
        self.by_first_word
            .entry(words[0].clone())
            .or_default()
            .push(idx);
        self.by_key.insert(key, idx);
        self.units.push(LexicalUnit {
            words,
            frames: vec![frame],
        });
    }

    /// Parses the TSV lexicon format: `lexical_unit<TAB>FRAME_LABEL`, with
    /// `#` comment lines and blank lines ignored.
    pub fn parse(contents: &str) -> Result<Self, FrameError> {
        let mut lexicon = FrameLexicon::new();
        for (i, raw) in contents.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return Err(FrameError::MalformedRow {
                    line: line_no,
                    found: cols.len(),
                });
            }
            let words = text::tokenize(cols[0]);
            if words.is_empty() {
                return Err(FrameError::EmptyUnit { line: line_no });
            }
            let frame = Frame::new(cols[1])?;
            lexicon.insert_words(words, frame);
        }
        if lexicon.units.is_empty() {
            return Err(FrameError::EmptyLexicon);
        }
        Ok(lexicon)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FrameError> {
        let path = path.as_ref();
        let contents = std::fs::read_to_string(path).map_err(|source| FrameError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&contents)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[LexicalUnit] {
        &self.units
    }

    pub fn augmented(&self) -> &AugmentedTokens {
        &self.augmented
    }

    /// Frames of the unit keyed exactly by `unit` (after tokenization).
    pub fn frames_for(&self, unit: &str) -> Option<&[Frame]> {
        let key = text::tokenize(unit).join(" ");
        self.by_key.get(&key).map(|&i| self.units[i].frames.as_slice())
    }

    /// Longest unit matching at `pos`; returns (unit index, token length).
    fn longest_match(&self, lemmas: &[Vec<String>], pos: usize) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for cand in &lemmas[pos] {
            let Some(units) = self.by_first_word.get(cand) else {
                continue;
            };
            for &idx in units {
                let words = &self.units[idx].words;
                let len = words.len();
                if pos + len > lemmas.len() {
                    continue;
                }
                let matches = words
                    .iter()
                    .enumerate()
                    .all(|(k, w)| lemmas[pos + k].iter().any(|c| c == w));
                if !matches {
                    continue;
                }
                match best {
                    Some((best_idx, best_len))
                        if best_len > len || (best_len == len && best_idx < idx) => {}
                    _ => best = Some((idx, len)),
                }
            }
        }
        best
    }

    /// Extraction with the byte offset of each trigger span.
    pub fn extract_with_offsets(&self, input: &str) -> Vec<(Frame, usize)> {
        let spans = text::tokenize_spans(input);
        let lemmas: Vec<Vec<String>> = spans.iter().map(|s| lemma_candidates(&s.text)).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < spans.len() {
            let lexical = self.longest_match(&lemmas, i);
            let augmented = self.augmented.lookup(&spans[i].text);
            match (lexical, augmented) {
                (Some((idx, len)), _) if len > 1 => {
                    out.push((self.units[idx].frames[0].clone(), spans[i].start));
                    i += len;
                }
                (_, Some((frame, kind))) => {
                    if *kind != AugmentedKind::Pronoun || self.emit_pronouns {
                        out.push((frame.clone(), spans[i].start));
                    }
                    i += 1;
                }
                (Some((idx, _)), None) => {
                    out.push((self.units[idx].frames[0].clone(), spans[i].start));
                    i += 1;
                }
                (None, None) => i += 1,
            }
        }
        out
    }
}

impl FrameTagger for FrameLexicon {
    fn extract_frames(&self, input: &str) -> FrameSequence {
        FrameSequence {
            frames: self
                .extract_with_offsets(input)
                .into_iter()
                .map(|(f, _)| f)
                .collect(),
            source_text: Some(input.to_string()),
        }
    }

    fn frame_vocabulary(&self) -> BTreeSet<Frame> {
        self.units
            .iter()
            .flat_map(|u| u.frames.iter())
            .chain(self.augmented.frames())
            .cloned()
            .collect()
    }
}
