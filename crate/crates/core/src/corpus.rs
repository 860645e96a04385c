//! Dialogue and scam-email ingestion.
//!
//! All text is lowercased at ingestion. Dialogues become context/response
//! pairs with a flat window of at most [`MAX_CONTEXT_UTTERANCES`] previous
//! turns. Scam emails are stripped of links and addresses and clipped to
//! their first and last three sentences.

use std::path::Path;
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{FrameSequence, FrameTagger};
use crate::text;

pub const MAX_CONTEXT_UTTERANCES: usize = 5;
pub const EMAIL_HEAD_SENTENCES: usize = 3;
pub const EMAIL_TAIL_SENTENCES: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("email is empty after removing links and addresses")]
    EmptyEmail,
    #[error("empty utterance text")]
    EmptyUtterance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl TryFrom<u8> for Speaker {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Speaker::A),
            1 => Ok(Speaker::B),
            other => Err(format!("speaker must be 0 or 1, got {other}")),
        }
    }
}

impl From<Speaker> for u8 {
    fn from(s: Speaker) -> u8 {
        match s {
            Speaker::A => 0,
            Speaker::B => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    /// Normalizes (lowercases, trims) the text; empty text is rejected.
    pub fn new(speaker: Speaker, text: &str) -> Result<Self, CorpusError> {
        let text = text::normalize(text.trim());
        if text.is_empty() {
            return Err(CorpusError::EmptyUtterance);
        }
        Ok(Utterance { speaker, text })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextResponsePair {
    pub context: Vec<Utterance>,
    pub response: Utterance,
    pub response_frames: FrameSequence,
}

impl ContextResponsePair {
    pub fn context_texts(&self) -> Vec<String> {
        self.context.iter().map(|u| u.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScamEmail {
    pub id: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntentExemplar {
    pub intent: String,
    pub text: String,
    pub frames: FrameSequence,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped_empty: usize,
}

#[derive(Deserialize)]
struct RawTurn {
    speaker: u8,
    text: String,
}

#[derive(Deserialize)]
struct RawDialogue {
    id: String,
    turns: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawExemplar {
    intent: String,
    text: String,
}

#[derive(Deserialize)]
struct RawEmail {
    id: String,
    body: String,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn jsonl_lines(contents: &str) -> impl Iterator<Item = (usize, &str)> {
    contents
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Parses dialogue JSONL text. `origin` is only used in error messages.
pub fn parse_dialogues(contents: &str, origin: &str) -> Result<(Vec<Dialogue>, LoadStats), CorpusError> {
    let mut stats = LoadStats::default();
    let mut dialogues = Vec::new();
    for (line, raw) in jsonl_lines(contents) {
        let err = |message: String| CorpusError::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let parsed: RawDialogue = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if parsed.turns.is_empty() {
            stats.skipped_empty += 1;
            warn!("{origin}:{line}: dialogue {:?} has no turns, skipped", parsed.id);
            continue;
        }
        let turns = parsed
            .turns
            .iter()
            .map(|t| {
                let speaker = Speaker::try_from(t.speaker).map_err(&err)?;
                Utterance::new(speaker, &t.text).map_err(|e| err(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        dialogues.push(Dialogue { id: parsed.id, turns });
    }
    stats.loaded = dialogues.len();
    Ok((dialogues, stats))
}

pub fn load_dialogues(path: impl AsRef<Path>) -> Result<(Vec<Dialogue>, LoadStats), CorpusError> {
    let path = path.as_ref();
    parse_dialogues(&read(path)?, &path.display().to_string())
}

/// One pair per turn after the first: the response is turn `t+1` and the
/// context is the (up to) five turns before it.
pub fn build_pairs(dialogues: &[Dialogue], tagger: &dyn FrameTagger) -> Vec<ContextResponsePair> {
    let mut pairs = Vec::new();
    for dialogue in dialogues {
        for r in 1..dialogue.turns.len() {
            let start = r.saturating_sub(MAX_CONTEXT_UTTERANCES);
            let response = dialogue.turns[r].clone();
            let response_frames = tagger.extract_frames(&response.text);
            pairs.push(ContextResponsePair {
                context: dialogue.turns[start..r].to_vec(),
                response,
                response_frames,
            });
        }
    }
    pairs
}

fn url_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S*").expect("url regex"))
}

fn email_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)+").expect("email regex")
    })
}

/// True if `s` still contains a URL or email address by the cleaning patterns.
pub fn contains_link_or_address(s: &str) -> bool {
    url_pattern().is_match(s) || email_pattern().is_match(s)
}

/// Splits on `.`, `!` or `?` followed by whitespace. The terminator stays with
/// its sentence; a trailing fragment without terminator is a sentence too.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let terminal = matches!(c, '.' | '!' | '?');
        if terminal && chars.peek().is_some_and(|n| n.is_whitespace()) {
            let s = current.trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        sentences.push(s.to_string());
    }
    sentences
}

/// Removes links and email addresses, then keeps the first and last three
/// sentences when there are more than six.
pub fn preprocess_scam_email(id: &str, raw: &str) -> Result<ScamEmail, CorpusError> {
    let mut cleaned = email_pattern().replace_all(raw, " ").into_owned();
    // removal can expose a new match (e.g. "www.a@b.co"), so iterate to a fixpoint
    loop {
        let next = url_pattern().replace_all(&cleaned, " ");
        let next = email_pattern().replace_all(&next, " ").into_owned();
        if next == cleaned {
            break;
        }
        cleaned = next;
    }
    let collapsed = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    let normalized = text::normalize(&collapsed);
    let sentences = split_sentences(&normalized);
    if sentences.is_empty() || text::tokenize(&normalized).is_empty() {
        return Err(CorpusError::EmptyEmail);
    }
    let kept: Vec<String> = if sentences.len() > EMAIL_HEAD_SENTENCES + EMAIL_TAIL_SENTENCES {
        let n = sentences.len();
        sentences[..EMAIL_HEAD_SENTENCES]
            .iter()
            .chain(&sentences[n - EMAIL_TAIL_SENTENCES..])
            .cloned()
            .collect()
    } else {
        sentences
    };
    Ok(ScamEmail {
        id: id.to_string(),
        body: kept.join(" "),
    })
}

pub fn load_scam_emails(path: impl AsRef<Path>) -> Result<Vec<ScamEmail>, CorpusError> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let contents = read(path)?;
    jsonl_lines(&contents)
        .map(|(line, raw)| {
            let err = |message: String| CorpusError::Parse {
                path: origin.clone(),
                line,
                message,
            };
            let email: RawEmail = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
            preprocess_scam_email(&email.id, &email.body).map_err(|e| err(e.to_string()))
        })
        .collect()
}

pub fn parse_exemplars(
    contents: &str,
    origin: &str,
    tagger: &dyn FrameTagger,
) -> Result<Vec<IntentExemplar>, CorpusError> {
    jsonl_lines(contents)
        .map(|(line, raw)| {
            let err = |message: String| CorpusError::Parse {
                path: origin.to_string(),
                line,
                message,
            };
            let ex: RawExemplar = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
            let intent = ex.intent.trim().to_string();
            if intent.is_empty() {
                return Err(err("empty intent".into()));
            }
            let text = text::normalize(ex.text.trim());
            if text.is_empty() {
                return Err(err("empty exemplar text".into()));
            }
            let frames = tagger.extract_frames(&text);
            Ok(IntentExemplar { intent, text, frames })
        })
        .collect()
}

pub fn load_exemplars(path: impl AsRef<Path>, tagger: &dyn FrameTagger) -> Result<Vec<IntentExemplar>, CorpusError> {
    let path = path.as_ref();
    parse_exemplars(&read(path)?, &path.display().to_string(), tagger)
}
