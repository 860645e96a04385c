//! Input sequences for the conditional language model.
//!
//! Layout of a training sequence:
//!
//! ```text
//! <bos> <spk> ctx_1 ... <spk> ctx_n <bof> F_1 ... F_k <bor> r_1 ... r_m <eos>
//! ```
//!
//! Every context utterance is prefixed by its speaker token. Role ids are
//! speaker token ids: each context block carries its speaker, `<bos>` takes
//! the role of the first context utterance, and everything from `<bof>`
//! onwards carries the responder's role. `lm_labels[i]` holds the token
//! expected at position `i` (predicted from positions `< i`) and is
//! [`IGNORE`] everywhere except the response tokens and the closing `<eos>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ContextResponsePair, Speaker, Utterance};
use crate::frames::FrameSequence;
use crate::tokenizer::{SpecialTokens, WordTokenizer};

pub const IGNORE: i32 = -100;
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("context must contain at least one utterance")]
    EmptyContext,
    #[error("frame {0} is not in the tokenizer's frame vocabulary")]
    UnknownFrame(String),
    #[error("sequence needs {needed} positions but the limit is {limit}")]
    TooLong { needed: usize, limit: usize },
    #[error("distractor response is identical to the gold response")]
    DistractorEqualsGold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsLabel {
    Correct,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: Vec<u32>,
    pub role_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub lm_labels: Vec<i32>,
    pub cls_label: Option<ClsLabel>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Position whose hidden state feeds the classification head (the last
    /// token, `<eos>` for complete sequences).
    pub fn cls_index(&self) -> usize {
        self.token_ids.len().saturating_sub(1)
    }

    pub fn active_labels(&self) -> usize {
        self.lm_labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Token ids strictly between `<bof>` and `<bor>`.
    pub fn frame_block(&self, special: &SpecialTokens) -> Option<&[u32]> {
        let bof = self.token_ids.iter().position(|&t| t == special.bof)?;
        let bor = self.token_ids.iter().position(|&t| t == special.bor)?;
        (bof < bor).then(|| &self.token_ids[bof + 1..bor])
    }

    /// Appends one token with the given role (used during decoding).
    pub fn push(&mut self, token: u32, role: u32) {
        self.position_ids.push(self.token_ids.len() as u32);
        self.token_ids.push(token);
        self.role_ids.push(role);
        self.lm_labels.push(IGNORE);
    }
}

/// A gold sequence and its distractors sharing one context+frame block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub candidates: Vec<EncodedExample>,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceLimits {
    pub max_sequence_length: usize,
    /// Positions kept free after `<bor>` when building inference prompts.
    #[serde(default)]
    pub response_reserve: usize,
}

impl Default for SequenceLimits {
    fn default() -> Self {
        SequenceLimits {
            max_sequence_length: DEFAULT_MAX_SEQUENCE_LENGTH,
            response_reserve: 0,
        }
    }
}

pub struct SequenceBuilder<'a> {
    tokenizer: &'a WordTokenizer,
    limits: SequenceLimits,
    mask_frame_tokens: bool,
}

struct Prefix {
    tokens: Vec<u32>,
    roles: Vec<u32>,
    frame_start: usize,
    frame_end: usize,
    responder_role: u32,
}

impl<'a> SequenceBuilder<'a> {
    pub fn new(tokenizer: &'a WordTokenizer, limits: SequenceLimits) -> Self {
        SequenceBuilder {
            tokenizer,
            limits,
            mask_frame_tokens: true,
        }
    }

    /// When false, frame tokens and `<bor>` also carry LM targets.
    pub fn mask_frame_tokens(mut self, mask: bool) -> Self {
        self.mask_frame_tokens = mask;
        self
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        self.tokenizer
    }

    pub fn limits(&self) -> SequenceLimits {
        self.limits
    }

    pub fn role_of(&self, speaker: Speaker) -> u32 {
        let sp = self.tokenizer.special();
        match speaker {
            Speaker::A => sp.speaker_a,
            Speaker::B => sp.speaker_b,
        }
    }

    fn frame_ids(&self, frames: &FrameSequence) -> Result<Vec<u32>, SequenceError> {
        frames
            .iter()
            .map(|f| {
                self.tokenizer
                    .frame_id(f)
                    .ok_or_else(|| SequenceError::UnknownFrame(f.to_string()))
            })
            .collect()
    }

    /// Builds everything up to and including `<bor>`, truncating the context
    /// so that `tail` more positions still fit.
    fn prefix(
        &self,
        context: &[Utterance],
        responder: Speaker,
        frames: &FrameSequence,
        tail: usize,
    ) -> Result<Prefix, SequenceError> {
        if context.is_empty() {
            return Err(SequenceError::EmptyContext);
        }
        let sp = self.tokenizer.special();
        let frame_ids = self.frame_ids(frames)?;
        let limit = self.limits.max_sequence_length;
        let fixed = 1 + 1 + frame_ids.len() + 1 + tail;

        let mut blocks: Vec<(u32, Vec<u32>)> = context
            .iter()
            .map(|u| (self.role_of(u.speaker), self.tokenizer.encode(&u.text)))
            .collect();
        let cost = |blocks: &[(u32, Vec<u32>)]| blocks.iter().map(|(_, t)| 1 + t.len()).sum::<usize>();

        while blocks.len() > 1 && fixed + cost(&blocks) > limit {
            blocks.remove(0);
        }
        let total = fixed + cost(&blocks);
        if total > limit {
            let overflow = total - limit;
            let words = &mut blocks[0].1;
            if words.len() <= overflow {
                return Err(SequenceError::TooLong {
                    needed: fixed + 2,
                    limit,
                });
            }
            words.drain(..overflow);
        }

        let responder_role = self.role_of(responder);
        let mut tokens = vec![sp.bos];
        let mut roles = vec![blocks[0].0];
        for (role, words) in &blocks {
            tokens.push(*role);
            roles.push(*role);
            tokens.extend(words);
            roles.extend(std::iter::repeat_n(*role, words.len()));
        }
        tokens.push(sp.bof);
        let frame_start = tokens.len();
        tokens.extend(&frame_ids);
        let frame_end = tokens.len();
        tokens.push(sp.bor);
        roles.extend(std::iter::repeat_n(responder_role, frame_ids.len() + 2));
        Ok(Prefix {
            tokens,
            roles,
            frame_start,
            frame_end,
            responder_role,
        })
    }

    fn finish(&self, prefix: Prefix, response: Option<&[u32]>, labelled: bool) -> EncodedExample {
        let Prefix {
            mut tokens,
            mut roles,
            frame_start,
            frame_end,
            responder_role,
        } = prefix;
        let mut lm_labels = vec![IGNORE; tokens.len()];
        if labelled && !self.mask_frame_tokens {
            for i in frame_start..=frame_end {
                lm_labels[i] = tokens[i] as i32;
            }
        }
        if let Some(resp) = response {
            let eos = self.tokenizer.special().eos;
            for &t in resp.iter().chain(std::iter::once(&eos)) {
                tokens.push(t);
                roles.push(responder_role);
                lm_labels.push(if labelled { t as i32 } else { IGNORE });
            }
        }
        let position_ids = (0..tokens.len() as u32).collect();
        EncodedExample {
            token_ids: tokens,
            role_ids: roles,
            position_ids,
            lm_labels,
            cls_label: None,
        }
    }

    /// Full training sequence for `pair.response` conditioned on `frames`
    /// (usually a noised copy of the response's own frames).
    pub fn training_sequence(
        &self,
        pair: &ContextResponsePair,
        frames: &FrameSequence,
    ) -> Result<EncodedExample, SequenceError> {
        let response = self.tokenizer.encode(&pair.response.text);
        let prefix = self.prefix(&pair.context, pair.response.speaker, frames, response.len() + 1)?;
        Ok(self.finish(prefix, Some(&response), true))
    }

    /// The training layout cut after `<bor>`; no labels. Room for
    /// `limits.response_reserve` generated tokens is kept.
    pub fn inference_prompt(
        &self,
        context: &[Utterance],
        frames: &FrameSequence,
    ) -> Result<EncodedExample, SequenceError> {
        let responder = context
            .last()
            .ok_or(SequenceError::EmptyContext)?
            .speaker
            .other();
        let prefix = self.prefix(context, responder, frames, self.limits.response_reserve)?;
        Ok(self.finish(prefix, None, false))
    }

    /// Gold sequence plus one sequence per distractor, identical up to
    /// `<bor>`. Only the gold sequence carries LM labels.
    pub fn candidate_set(
        &self,
        pair: &ContextResponsePair,
        frames: &FrameSequence,
        distractors: &[&Utterance],
    ) -> Result<CandidateSet, SequenceError> {
        let gold = self.tokenizer.encode(&pair.response.text);
        let mut others = Vec::with_capacity(distractors.len());
        for d in distractors {
            if d.text.trim() == pair.response.text.trim() {
                return Err(SequenceError::DistractorEqualsGold);
            }
            others.push(self.tokenizer.encode(&d.text));
        }
        let longest = others.iter().map(Vec::len).chain([gold.len()]).max().unwrap_or(0);
        let prefix = self.prefix(&pair.context, pair.response.speaker, frames, longest + 1)?;

        let mut candidates = Vec::with_capacity(others.len() + 1);
        for resp in &others {
            let p = Prefix {
                tokens: prefix.tokens.clone(),
                roles: prefix.roles.clone(),
                ..prefix
            };
            let mut ex = self.finish(p, Some(resp), false);
            ex.cls_label = Some(ClsLabel::Distractor);
            candidates.push(ex);
        }
        let mut gold_ex = self.finish(prefix, Some(&gold), true);
        gold_ex.cls_label = Some(ClsLabel::Correct);
        candidates.push(gold_ex);
        let correct = candidates.len() - 1;
        Ok(CandidateSet { candidates, correct })
    }

    /// `(gold, distractor)` pair for the next-utterance classification
    /// objective with two candidates.
    pub fn classification_pair(
        &self,
        pair: &ContextResponsePair,
        frames: &FrameSequence,
        distractor: &Utterance,
    ) -> Result<(EncodedExample, EncodedExample), SequenceError> {
        let mut set = self.candidate_set(pair, frames, &[distractor])?;
        let gold = set.candidates.pop().expect("gold candidate");
        let other = set.candidates.pop().expect("distractor candidate");
        Ok((gold, other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{Frame, FrameSequence};
    use std::collections::BTreeSet;

    fn tokenizer(texts: &[&str], frames: &[&str]) -> WordTokenizer {
        let vocab: BTreeSet<Frame> = frames.iter().map(|f| Frame::new(f).unwrap()).collect();
        WordTokenizer::build(texts.iter().copied(), &vocab)
    }

    fn pair(context: &[(Speaker, &str)], response: (Speaker, &str)) -> ContextResponsePair {
        ContextResponsePair {
            context: context
                .iter()
                .map(|(s, t)| Utterance::new(*s, t).unwrap())
                .collect(),
            response: Utterance::new(response.0, response.1).unwrap(),
            response_frames: FrameSequence::default(),
        }
    }

    #[test]
    fn hello_layout() {
        let tok = tokenizer(&["hi", "hello"], &["GREETING"]);
        let sp = tok.special();
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        let p = pair(&[(Speaker::A, "hi")], (Speaker::B, "hello"));
        let frames = FrameSequence::parse("GREETING").unwrap();
        let ex = b.training_sequence(&p, &frames).unwrap();
        let hi = tok.encode("hi")[0];
        let hello = tok.encode("hello")[0];
        let greeting = tok.frame_id(&Frame::new("GREETING").unwrap()).unwrap();
        assert_eq!(
            ex.token_ids,
            vec![sp.bos, sp.speaker_a, hi, sp.bof, greeting, sp.bor, hello, sp.eos]
        );
        let i = IGNORE;
        assert_eq!(ex.lm_labels, vec![i, i, i, i, i, i, hello as i32, sp.eos as i32]);
        assert_eq!(ex.position_ids, (0..8).collect::<Vec<u32>>());
        let (a, bb) = (sp.speaker_a, sp.speaker_b);
        assert_eq!(ex.role_ids, vec![a, a, a, bb, bb, bb, bb, bb]);
    }

    #[test]
    fn empty_frames_give_adjacent_control_tokens() {
        let tok = tokenizer(&["hi", "hello"], &[]);
        let sp = tok.special();
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        let p = pair(&[(Speaker::A, "hi")], (Speaker::B, "hello"));
        let ex = b.training_sequence(&p, &FrameSequence::default()).unwrap();
        let bof = ex.token_ids.iter().position(|&t| t == sp.bof).unwrap();
        assert_eq!(ex.token_ids[bof + 1], sp.bor);
        assert_eq!(ex.frame_block(&sp).unwrap(), &[] as &[u32]);
    }

    /// Five alternating utterances against ids written out by hand for a
    /// fixed toy vocabulary.
    #[test]
    fn alternating_context_roles_match_hand_built_oracle() {
        // vocabulary: 8 control tokens, frame "?" = 8, words ordered by
        // frequency then lexicographically
        let texts = ["a b", "c", "a", "d e", "f", "g"];
        let tok = tokenizer(&texts, &["?"]);
        // a:2 -> 9, then b c d e f g -> 10..=15
        assert_eq!(tok.encode("a b c d e f g"), vec![9, 10, 11, 12, 13, 14, 15]);
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        let p = pair(
            &[
                (Speaker::A, "a b"),
                (Speaker::B, "c"),
                (Speaker::A, "a"),
                (Speaker::B, "d e"),
                (Speaker::A, "f"),
            ],
            (Speaker::B, "g"),
        );
        let ex = b.training_sequence(&p, &FrameSequence::parse("?").unwrap()).unwrap();
        // bos=1 eos=2 bof=3 bor=4 spk1=5 spk2=6
        let expected_tokens = vec![1, 5, 9, 10, 6, 11, 5, 9, 6, 12, 13, 5, 14, 3, 8, 4, 15, 2];
        let expected_roles = vec![5, 5, 5, 5, 6, 6, 5, 5, 6, 6, 6, 5, 5, 6, 6, 6, 6, 6];
        let i = IGNORE;
        let expected_labels = vec![i, i, i, i, i, i, i, i, i, i, i, i, i, i, i, i, 15, 2];
        assert_eq!(ex.token_ids, expected_tokens);
        assert_eq!(ex.role_ids, expected_roles);
        assert_eq!(ex.lm_labels, expected_labels);
    }

    #[test]
    fn unknown_frame_is_rejected() {
        let tok = tokenizer(&["hi"], &["FOOD"]);
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        let p = pair(&[(Speaker::A, "hi")], (Speaker::B, "hi"));
        let err = b
            .training_sequence(&p, &FrameSequence::parse("BODY-PARTS").unwrap())
            .unwrap_err();
        assert_eq!(err, SequenceError::UnknownFrame("BODY-PARTS".into()));
    }

    #[test]
    fn truncation_drops_oldest_utterances_first() {
        let tok = tokenizer(&["one two three", "four five", "six"], &["FOOD"]);
        let limits = SequenceLimits {
            max_sequence_length: 12,
            response_reserve: 0,
        };
        let b = SequenceBuilder::new(&tok, limits);
        let p = pair(
            &[(Speaker::A, "one two three"), (Speaker::B, "four five")],
            (Speaker::A, "six"),
        );
        let frames = FrameSequence::parse("FOOD").unwrap();
        let ex = b.training_sequence(&p, &frames).unwrap();
        // fixed: bos bof FOOD bor six eos = 6, ctx 4 + 3 = 7 -> drop first
        assert_eq!(ex.len(), 9);
        assert_eq!(tok.decode(&ex.token_ids), "four five six");
        // tighter: left-truncate the remaining utterance
        let b = SequenceBuilder::new(&tok, SequenceLimits { max_sequence_length: 8, response_reserve: 0 });
        let ex = b.training_sequence(&p, &frames).unwrap();
        assert_eq!(tok.decode(&ex.token_ids), "five six");
        // frames + response alone do not fit
        let b = SequenceBuilder::new(&tok, SequenceLimits { max_sequence_length: 7, response_reserve: 0 });
        assert!(matches!(
            b.training_sequence(&p, &frames),
            Err(SequenceError::TooLong { .. })
        ));
    }

    #[test]
    fn prompt_is_training_layout_cut_after_bor() {
        let tok = tokenizer(&["we started eating vegan food", "vegan food is healthy"], &["FOOD", "USEFULNESS", "BODY-PARTS"]);
        let sp = tok.special();
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        let p = pair(&[(Speaker::A, "we started eating vegan food")], (Speaker::B, "vegan food is healthy"));
        let frames = FrameSequence::parse("FOOD USEFULNESS BODY-PARTS").unwrap();
        let full = b.training_sequence(&p, &frames).unwrap();
        let prompt = b.inference_prompt(&p.context, &frames).unwrap();
        let cut = full.token_ids.iter().position(|&t| t == sp.bor).unwrap() + 1;
        assert_eq!(prompt.token_ids, full.token_ids[..cut]);
        assert_eq!(prompt.role_ids, full.role_ids[..cut]);
        assert_eq!(prompt.active_labels(), 0);
        let block: Vec<_> = prompt
            .frame_block(&sp)
            .unwrap()
            .iter()
            .map(|&id| tok.frame_for_id(id).unwrap().to_string())
            .collect();
        assert_eq!(block, vec!["FOOD", "USEFULNESS", "BODY-PARTS"]);
    }

    #[test]
    fn prompt_with_empty_context_is_an_error() {
        let tok = tokenizer(&["hi"], &[]);
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        assert_eq!(
            b.inference_prompt(&[], &FrameSequence::default()).unwrap_err(),
            SequenceError::EmptyContext
        );
    }

    #[test]
    fn classification_pair_shares_conditioning_block() {
        let tok = tokenizer(&["hi", "hello", "goodbye now"], &["GREETING"]);
        let sp = tok.special();
        let b = SequenceBuilder::new(&tok, SequenceLimits::default());
        let p = pair(&[(Speaker::A, "hi")], (Speaker::B, "hello"));
        let frames = FrameSequence::parse("GREETING").unwrap();
        let bye = Utterance::new(Speaker::B, "goodbye now").unwrap();
        let (gold, other) = b.classification_pair(&p, &frames, &bye).unwrap();
        assert_eq!(gold.cls_label, Some(ClsLabel::Correct));
        assert_eq!(other.cls_label, Some(ClsLabel::Distractor));
        let cut = gold.token_ids.iter().position(|&t| t == sp.bor).unwrap() + 1;
        assert_eq!(gold.token_ids[..cut], other.token_ids[..cut]);
        assert_ne!(gold.token_ids[cut..], other.token_ids[cut..]);
        assert_eq!(gold.token_ids[gold.cls_index()], sp.eos);
        assert_eq!(other.token_ids[other.cls_index()], sp.eos);
        assert_eq!(other.active_labels(), 0);
        assert_eq!(gold.active_labels(), 2);

        let same = Utterance::new(Speaker::B, "Hello").unwrap();
        assert_eq!(
            b.classification_pair(&p, &frames, &same).unwrap_err(),
            SequenceError::DistractorEqualsGold
        );
    }

    #[test]
    fn unmasked_frames_carry_labels() {
        let tok = tokenizer(&["hi", "hello"], &["GREETING"]);
        let b = SequenceBuilder::new(&tok, SequenceLimits::default()).mask_frame_tokens(false);
        let p = pair(&[(Speaker::A, "hi")], (Speaker::B, "hello"));
        let ex = b.training_sequence(&p, &FrameSequence::parse("GREETING").unwrap()).unwrap();
        // GREETING, <bor>, hello, <eos>
        assert_eq!(ex.active_labels(), 4);
    }
}
