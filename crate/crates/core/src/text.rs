//! Shared text normalization and tokenization.
//!
//! All text entering the pipeline is lowercased and split into word tokens
//! and single-character punctuation tokens. Words are maximal runs of
//! alphanumeric characters, with internal apostrophes kept (`don't`, `i'm`).
//! The same rule is used by the frame tagger, the word tokenizer and the
//! diversity/overlap metrics, so a response decoded by the model and
//! re-tokenized for scoring produces the tokens it was built from.

/// A token together with its byte offset in the normalized (lowercased) text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub text: String,
    pub start: usize,
}

pub fn normalize(text: &str) -> String {
    text.to_lowercase()
}

/// Lowercases and tokenizes, keeping byte offsets into the lowercased text.
pub fn tokenize_spans(text: &str) -> Vec<Span> {
    let lowered = normalize(text);
    let chars: Vec<(usize, char)> = lowered.char_indices().collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_alphanumeric() {
            let mut j = i + 1;
            while j < chars.len() {
                let cj = chars[j].1;
                let apostrophe_inside = (cj == '\'' || cj == '\u{2019}')
                    && j + 1 < chars.len()
                    && chars[j + 1].1.is_alphanumeric();
                if cj.is_alphanumeric() || apostrophe_inside {
                    j += 1;
                } else {
                    break;
                }
            }
            let end = if j < chars.len() { chars[j].0 } else { lowered.len() };
            spans.push(Span {
                text: lowered[start..end].replace('\u{2019}', "'"),
                start,
            });
            i = j;
        } else {
            spans.push(Span {
                text: c.to_string(),
                start,
            });
            i += 1;
        }
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_spans(text).into_iter().map(|s| s.text).collect()
}

fn is_closing_punct(token: &str) -> bool {
    matches!(token, "." | "," | "!" | "?" | ";" | ":" | ")")
}

/// Joins tokens back into display text; closing punctuation attaches to the
/// previous token. `tokenize(detokenize(t)) == t` for tokens produced by
/// [`tokenize`].
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if i > 0 && !is_closing_punct(tok) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}
