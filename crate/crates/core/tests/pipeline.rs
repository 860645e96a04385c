//! Library-level checks over the shipped data files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use edge_core::corpus::{self, Speaker};
use edge_core::frames::{Frame, FrameLexicon, FrameTagger};
use edge_core::noising::{self, NoisingConfig};
use edge_core::retrieval::{self, ExemplarIndex};
use edge_core::sequence::{SequenceBuilder, SequenceLimits, IGNORE};
use edge_core::tokenizer::WordTokenizer;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn lexicon() -> FrameLexicon {
    FrameLexicon::load(data("lexicon.tsv")).unwrap()
}

#[test]
fn toy_corpus_yields_fifty_pairs_with_frames() {
    let lex = lexicon();
    let (dialogues, stats) = corpus::load_dialogues(data("toy/train.jsonl")).unwrap();
    assert_eq!(stats.loaded, 10);
    let pairs = corpus::build_pairs(&dialogues, &lex);
    assert_eq!(pairs.len(), 50);
    assert!(pairs.iter().all(|p| !p.response_frames.is_empty()), "every toy response evokes a frame");
    assert!(pairs.iter().all(|p| p.context.len() <= corpus::MAX_CONTEXT_UTTERANCES));
    assert!(pairs
        .iter()
        .all(|p| p.context.last().unwrap().speaker == p.response.speaker.other()));
}

#[test]
fn every_lexicon_frame_fits_the_tokenizer() {
    let lex = lexicon();
    let vocab = lex.frame_vocabulary();
    let tok = WordTokenizer::build(["hello there"], &vocab);
    assert_eq!(tok.frame_vocabulary().len(), vocab.len());
    for f in &vocab {
        let id = tok.frame_id(f).unwrap();
        assert_eq!(tok.frame_for_id(id), Some(f));
        assert!(tok.is_reserved(id));
    }
}

#[test]
fn noised_training_sequences_stay_well_formed() {
    let lex = lexicon();
    let (dialogues, _) = corpus::load_dialogues(data("toy/train.jsonl")).unwrap();
    let pairs = corpus::build_pairs(&dialogues, &lex);
    let vocab: Vec<Frame> = lex.frame_vocabulary().into_iter().collect();
    let tok = WordTokenizer::build(
        dialogues.iter().flat_map(|d| d.turns.iter().map(|u| u.text.as_str())),
        &lex.frame_vocabulary(),
    );
    let builder = SequenceBuilder::new(&tok, SequenceLimits::default());
    let config = NoisingConfig::default();
    let mut rng = config.rng();
    for pair in &pairs {
        let noised = noising::noise(&pair.response_frames, &config, &vocab, &mut rng).unwrap();
        let ex = builder.training_sequence(pair, &noised).unwrap();
        let labelled = ex.lm_labels.iter().filter(|&&l| l != IGNORE).count();
        assert_eq!(labelled, tok.encode(&pair.response.text).len() + 1);
        let block: Vec<Frame> = ex
            .frame_block(&tok.special())
            .unwrap()
            .iter()
            .map(|&id| tok.frame_for_id(id).unwrap().clone())
            .collect();
        assert_eq!(block, noised.iter().cloned().collect::<Vec<_>>());
        assert_eq!(*ex.role_ids.last().unwrap(), builder.role_of(pair.response.speaker));
    }
}

#[test]
fn retrieved_subsets_are_frame_diverse() {
    let lex = lexicon();
    let (dialogues, _) = corpus::load_dialogues(data("toy/train.jsonl")).unwrap();
    let pairs = corpus::build_pairs(&dialogues, &lex);
    let index = ExemplarIndex::from_pairs(&pairs, &lex).unwrap();
    for pair in &pairs {
        let ranked = index.retrieve(&pair.context_texts(), 50).unwrap();
        assert_eq!(ranked.len(), 50);
        for size in [1, 5, 10] {
            let subset = retrieval::select_diverse_subset(&ranked, size);
            assert!(!subset.is_empty() && subset.len() <= size);
            assert_eq!(subset[0].index, ranked[0].index);
            for (i, a) in subset.iter().enumerate() {
                for b in &subset[i + 1..] {
                    assert!(retrieval::jaccard(&a.entry.frame_set(), &b.entry.frame_set()) < 0.5);
                }
            }
        }
    }
}

#[test]
fn anti_scam_fixtures_load() {
    let lex = lexicon();
    let emails = corpus::load_scam_emails(data("antiscam/emails.jsonl")).unwrap();
    assert_eq!(emails.len(), 5);
    for e in &emails {
        assert!(!corpus::contains_link_or_address(&e.body), "{}", e.id);
        assert!(corpus::split_sentences(&e.body).len() <= 6);
    }
    let exemplars = corpus::load_exemplars(data("antiscam/exemplars.jsonl"), &lex).unwrap();
    assert_eq!(exemplars.len(), 20);
    let intents: BTreeSet<&str> = exemplars.iter().map(|e| e.intent.as_str()).collect();
    assert_eq!(intents.len(), 5);
    assert!(exemplars.iter().all(|e| !e.frames.is_empty()));

    let interest = exemplars.iter().find(|e| e.text.to_lowercase().starts_with("very excited")).unwrap();
    assert_eq!(
        interest.frames.labels(),
        [
            "DEGREE",
            "EMOTION-DIRECTED",
            "TOPIC",
            "CARDINAL-NUMBERS",
            "MONEY",
            "POSSESSION",
            "COMMITMENT",
            "CAPABILITY",
            "USING",
            "BUSINESSES"
        ]
    );
}

#[test]
fn speaker_roles_alternate_in_prompts() {
    let lex = lexicon();
    let (dialogues, _) = corpus::load_dialogues(data("toy/train.jsonl")).unwrap();
    let pairs = corpus::build_pairs(&dialogues, &lex);
    let tok = WordTokenizer::build(["x"], &lex.frame_vocabulary());
    let builder = SequenceBuilder::new(&tok, SequenceLimits::default());
    let sp = tok.special();
    for pair in pairs.iter().filter(|p| p.context.len() > 1) {
        let prompt = builder.inference_prompt(&pair.context, &pair.response_frames).unwrap();
        let markers: Vec<u32> = prompt
            .token_ids
            .iter()
            .copied()
            .filter(|&t| t == sp.speaker_a || t == sp.speaker_b)
            .collect();
        assert_eq!(markers.len(), pair.context.len());
        assert!(markers.windows(2).all(|w| w[0] != w[1]));
        let first = if pair.context[0].speaker == Speaker::A { sp.speaker_a } else { sp.speaker_b };
        assert_eq!(markers[0], first);
    }
}
