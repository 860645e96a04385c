//! Subcommand implementations. Each one validates its inputs, runs the
//! pipeline stage and writes its artifacts.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use edge_core::corpus::{self, ContextResponsePair, Dialogue};
use edge_core::evaluation::{self, MetricsReport, RunRecord};
use edge_core::generation::{self, derive_seed, GenerationConfig, GeneratedResponse};
use edge_core::retrieval::{self, ExemplarIndex, FallbackScorer, HttpReranker, TfCosineScorer};
use edge_core::sequence::SequenceBuilder;
use edge_core::tokenizer::WordTokenizer;
use edge_core::trainer::{self, Checkpoint, TrainReport, TrainSetup};
use edge_core::{FrameLexicon, FrameTagger};
use edge_tinylm::{TinyConfig, TinyLm};
use log::info;
use serde::Serialize;
use serde_json::Value;

use crate::config::{require_files, ExemplarSource, RunConfig};

pub const HISTORY_FILE: &str = "history.json";
pub const ANTI_SCAM_FILE: &str = "anti_scam.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const GOLD_RUN_FILE: &str = "generations_gold.jsonl";

pub fn generations_file(size: usize) -> String {
    format!("generations_{size}.jsonl")
}

fn load_lexicon(path: &Path) -> Result<FrameLexicon> {
    FrameLexicon::load(path).with_context(|| format!("loading lexicon {}", path.display()))
}

fn load_pairs(path: &Path, tagger: &dyn FrameTagger) -> Result<(Vec<Dialogue>, Vec<ContextResponsePair>)> {
    let (dialogues, stats) =
        corpus::load_dialogues(path).with_context(|| format!("loading dialogues {}", path.display()))?;
    let pairs = corpus::build_pairs(&dialogues, tagger);
    info!(
        "{}: {} dialogues ({} empty skipped), {} pairs",
        path.display(),
        stats.loaded,
        stats.skipped_empty,
        pairs.len()
    );
    Ok((dialogues, pairs))
}

fn create_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush().with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Reads utterances, one per line, or JSONL objects with a `text` field.
pub fn extract_frames(input: &Path, lexicon: &Path, output: &Path, pronouns: bool) -> Result<usize> {
    let tagger = load_lexicon(lexicon)?.with_pronoun_emission(pronouns);
    let raw = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;

    #[derive(Serialize)]
    struct Row {
        text: String,
        frames: Vec<String>,
    }
    let mut rows = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let text = if line.starts_with('{') {
            let v: Value = serde_json::from_str(line)
                .with_context(|| format!("{}:{}: invalid JSON", input.display(), i + 1))?;
            match v.get("text").and_then(Value::as_str) {
                Some(t) => t.to_string(),
                None => bail!("{}:{}: object has no string \"text\" field", input.display(), i + 1),
            }
        } else {
            line.to_string()
        };
        let frames = tagger.extract_frames(&text).labels();
        rows.push(Row { text, frames });
    }
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_output_dir(parent)?;
    }
    write_jsonl(output, &rows)?;
    Ok(rows.len())
}

pub fn train(config: &RunConfig, snapshot: Value) -> Result<TrainReport> {
    let paths = &config.paths;
    require_files(&[
        ("paths.lexicon", Some(&paths.lexicon)),
        ("paths.train", paths.train.as_deref()),
        ("paths.valid", paths.valid.as_deref()),
    ])?;
    let train_path = paths.train.as_deref().expect("checked above");
    let valid_path = paths.valid.as_deref().expect("checked above");

    let lexicon = load_lexicon(&paths.lexicon)?;
    let (dialogues, pairs) = load_pairs(train_path, &lexicon)?;
    let (_, valid_pairs) = load_pairs(valid_path, &lexicon)?;
    let texts = dialogues.iter().flat_map(|d| d.turns.iter().map(|u| u.text.as_str()));
    let tokenizer = WordTokenizer::build(texts, &lexicon.frame_vocabulary());
    info!(
        "vocabulary: {} tokens, {} frames",
        tokenizer.vocab_size(),
        tokenizer.frame_vocabulary().len()
    );

    let mut model = TinyLm::new(TinyConfig {
        vocab_size: tokenizer.vocab_size(),
        ..config.model
    })?;
    info!("model: {} parameters", model.num_parameters());
    let builder = SequenceBuilder::new(&tokenizer, config.sequence);
    let setup = TrainSetup {
        builder: &builder,
        config: &config.training,
        noise: &config.noising,
        checkpoint_dir: &paths.checkpoint,
        config_snapshot: snapshot,
    };
    let report = trainer::train(&pairs, &valid_pairs, &mut model, &setup)?;
    for s in &report.history {
        info!(
            "epoch {}: lm {:.4} cls {:.4} val {:.4}",
            s.epoch, s.train_lm_loss, s.train_cls_loss, s.val_loss
        );
    }
    write_json(&paths.checkpoint.join(HISTORY_FILE), &report.history)?;
    Ok(report)
}

/// Loads the checkpoint named in the config.
pub fn load_model(config: &RunConfig) -> Result<(TinyLm, WordTokenizer)> {
    let dir = &config.paths.checkpoint;
    let (checkpoint, tokenizer) =
        Checkpoint::open(dir).with_context(|| format!("opening checkpoint {}", dir.display()))?;
    let model = TinyLm::from_dir(&checkpoint.weights_dir())
        .with_context(|| format!("loading weights from {}", checkpoint.weights_dir().display()))?;
    if model.config().vocab_size != tokenizer.vocab_size() {
        bail!(
            "checkpoint {}: model vocabulary {} does not match tokenizer {}",
            dir.display(),
            model.config().vocab_size,
            tokenizer.vocab_size()
        );
    }
    Ok((model, tokenizer))
}

fn record(r: GeneratedResponse) -> RunRecord {
    RunRecord {
        context: r.context,
        exemplar: r.exemplar.unwrap_or_default(),
        frames: r.frames.labels(),
        response: r.text,
        seed: r.seed,
    }
}

fn build_index(config: &RunConfig, pairs: &[ContextResponsePair], tagger: &dyn FrameTagger) -> Result<ExemplarIndex> {
    let index = ExemplarIndex::from_pairs(pairs, tagger)?;
    Ok(match &config.retrieval.reranker_url {
        Some(url) => {
            let timeout = Duration::from_millis(config.retrieval.reranker_timeout_ms);
            index.with_scorer(Box::new(FallbackScorer {
                primary: HttpReranker::new(url, timeout)?,
                fallback: TfCosineScorer,
            }))
        }
        None => index,
    })
}

/// Generates for every test pair. Retrieved mode writes one file per
/// subset size; gold mode writes a single file.
pub fn generate(config: &RunConfig, context_file: Option<&Path>) -> Result<Vec<PathBuf>> {
    let paths = &config.paths;
    let test_path = context_file.or(paths.valid.as_deref());
    let retrieved = config.retrieval.exemplars == ExemplarSource::Retrieved;
    let mut inputs = vec![("paths.lexicon", Some(paths.lexicon.as_path())), ("contexts", test_path)];
    if retrieved {
        inputs.push(("paths.train", paths.train.as_deref()));
    }
    require_files(&inputs)?;
    let test_path = test_path.expect("checked above");

    let lexicon = load_lexicon(&paths.lexicon)?;
    let (model, tokenizer) = load_model(config)?;
    let builder = SequenceBuilder::new(&tokenizer, config.generation_limits());
    let (_, test_pairs) = load_pairs(test_path, &lexicon)?;
    if test_pairs.is_empty() {
        bail!("{} yields no context/response pairs", test_path.display());
    }
    create_output_dir(&paths.output_dir)?;

    let base = config.generation;
    let sample = |i: usize, j: usize, pair: &ContextResponsePair, frames, exemplar: &str| {
        let cfg = GenerationConfig {
            seed: derive_seed(derive_seed(base.seed, i as u64), j as u64),
            ..base
        };
        generation::generate_samples(&model, &builder, &pair.context, frames, Some(exemplar), &cfg)
            .map(|v| v.into_iter().map(record))
    };

    if !retrieved {
        let mut records = Vec::new();
        for (i, pair) in test_pairs.iter().enumerate() {
            records.extend(sample(i, 0, pair, &pair.response_frames, &pair.response.text)?);
        }
        let out = paths.output_dir.join(GOLD_RUN_FILE);
        write_jsonl(&out, &records)?;
        info!("wrote {} records to {}", records.len(), out.display());
        return Ok(vec![out]);
    }

    let (_, train_pairs) = load_pairs(paths.train.as_deref().expect("checked above"), &lexicon)?;
    let index = build_index(config, &train_pairs, &lexicon)?;
    let k = config.retrieval.candidates.min(index.len());
    let mut written = Vec::new();
    for &size in &config.retrieval.subset_sizes {
        let mut records = Vec::new();
        for (i, pair) in test_pairs.iter().enumerate() {
            let mut ranked = index.retrieve(&pair.context_texts(), k)?;
            if config.retrieval.exclude_gold {
                ranked.retain(|c| c.entry.text != pair.response.text);
            }
            let subset = retrieval::select_diverse_subset(&ranked, size);
            for (j, c) in subset.iter().enumerate() {
                records.extend(sample(i, j, pair, &c.entry.frames, &c.entry.text)?);
            }
        }
        let out = paths.output_dir.join(generations_file(size));
        write_jsonl(&out, &records)?;
        info!("wrote {} records to {}", records.len(), out.display());
        written.push(out);
    }
    Ok(written)
}

pub fn read_run(path: &Path) -> Result<Vec<RunRecord>> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

/// Mean number of records per distinct context, i.e. exemplars per context
/// when one sample is drawn per exemplar.
fn infer_set_size(records: &[RunRecord]) -> usize {
    let contexts: BTreeSet<&Vec<String>> = records.iter().map(|r| &r.context).collect();
    if contexts.is_empty() {
        0
    } else {
        records.len() / contexts.len()
    }
}

pub fn evaluate(
    config: &RunConfig,
    run_file: &Path,
    output: Option<&Path>,
    set_size: Option<usize>,
) -> Result<(MetricsReport, PathBuf)> {
    require_files(&[("paths.lexicon", Some(&config.paths.lexicon)), ("--run-file", Some(run_file))])?;
    let lexicon = load_lexicon(&config.paths.lexicon)?;
    let records = read_run(run_file)?;
    let size = set_size.unwrap_or_else(|| infer_set_size(&records));
    let report = evaluation::evaluate_run(&records, &lexicon, size)
        .with_context(|| format!("evaluating {}", run_file.display()))?;
    let out = match output.or(config.paths.report.as_deref()) {
        Some(p) => p.to_path_buf(),
        None => config.paths.output_dir.join(REPORT_FILE),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_output_dir(parent)?;
    }
    write_json(&out, &report)?;
    Ok((report, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AntiScamRecord {
    pub email_id: String,
    pub intent: String,
    pub exemplar: String,
    pub frames: Vec<String>,
    pub response: String,
    pub seed: u64,
}

/// Every (email, exemplar) pair, grouped by intent within each email.
/// Email `e` uses base seed `derive_seed(seed, e)`.
pub fn anti_scam(config: &RunConfig, emails: &Path, exemplars: &Path) -> Result<(Vec<AntiScamRecord>, PathBuf)> {
    require_files(&[
        ("paths.lexicon", Some(&config.paths.lexicon)),
        ("--emails", Some(emails)),
        ("--exemplars", Some(exemplars)),
    ])?;
    let lexicon = load_lexicon(&config.paths.lexicon)?;
    let (model, tokenizer) = load_model(config)?;
    let builder = SequenceBuilder::new(&tokenizer, config.generation_limits());
    let emails = corpus::load_scam_emails(emails)?;
    let exemplars = corpus::load_exemplars(exemplars, &lexicon)?;
    create_output_dir(&config.paths.output_dir)?;

    let mut records = Vec::new();
    for (e, email) in emails.iter().enumerate() {
        let cfg = GenerationConfig {
            seed: derive_seed(config.generation.seed, e as u64),
            ..config.generation
        };
        let grouped = generation::generate_controlled(&model, &builder, email, &exemplars, &cfg)
            .with_context(|| format!("email {}", email.id))?;
        for (intent, responses) in grouped {
            for r in responses {
                records.push(AntiScamRecord {
                    email_id: email.id.clone(),
                    intent: intent.clone(),
                    exemplar: r.exemplar.unwrap_or_default(),
                    frames: r.frames.labels(),
                    response: r.text,
                    seed: r.seed,
                });
            }
        }
    }
    let out = config.paths.output_dir.join(ANTI_SCAM_FILE);
    write_jsonl(&out, &records)?;
    info!("wrote {} records to {}", records.len(), out.display());
    Ok((records, out))
}
