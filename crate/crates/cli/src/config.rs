//! Run configuration: one JSON file merging every pipeline section.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use edge_core::generation::GenerationConfig;
use edge_core::noising::NoisingConfig;
use edge_core::sequence::SequenceLimits;
use edge_core::trainer::TrainingConfig;
use edge_tinylm::TinyConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Sections that get the top-level seed unless they set their own.
const SEEDED_SECTIONS: [&str; 4] = ["noising", "training", "generation", "model"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub lexicon: PathBuf,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarSource {
    /// Retrieved from the training responses by context similarity.
    Retrieved,
    /// The test response's own frames.
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSettings {
    pub subset_sizes: Vec<usize>,
    pub exemplars: ExemplarSource,
    /// Candidates ranked before the diversity filter.
    pub candidates: usize,
    pub reranker_url: Option<String>,
    pub reranker_timeout_ms: u64,
    /// Drop retrieved responses identical to the gold response.
    pub exclude_gold: bool,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            subset_sizes: vec![1, 5, 10],
            exemplars: ExemplarSource::Retrieved,
            candidates: 50,
            reranker_url: None,
            reranker_timeout_ms: 5000,
            exclude_gold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub noising: NoisingConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub model: TinyConfig,
    #[serde(default)]
    pub sequence: SequenceLimits,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
}

/// Applies `key.path=value` to a JSON tree. The value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("override key {key:?} has an empty segment");
        }
        let obj = match node {
            Value::Object(map) => map,
            _ => bail!("override key {key:?}: {:?} is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

fn inject_seed(root: &mut Value) {
    let Some(obj) = root.as_object_mut() else {
        return;
    };
    let seed = obj.get("seed").cloned().unwrap_or(Value::from(0u64));
    for section in SEEDED_SECTIONS {
        let entry = obj
            .entry(section.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if let Value::Object(map) = entry {
            map.entry("seed".to_string()).or_insert(seed.clone());
        }
    }
}

impl RunConfig {
    /// Parses config JSON after overrides; returns the config and the
    /// merged JSON it came from.
    pub fn from_json(raw: &str, overrides: &[String]) -> Result<(RunConfig, Value)> {
        let mut root: Value = serde_json::from_str(raw).context("config is not valid JSON")?;
        if !root.is_object() {
            bail!("config must be a JSON object");
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        inject_seed(&mut root);
        let config: RunConfig = serde_json::from_value(root.clone()).context("invalid config")?;
        config.validate()?;
        Ok((config, root))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<(RunConfig, Value)> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&raw, overrides).with_context(|| format!("config {}", path.display()))
    }

    /// Every numeric section, checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.noising.validate() {
            problems.push(format!("noising: {e}"));
        }
        if let Err(e) = self.training.validate() {
            problems.push(format!("training: {e}"));
        }
        if let Err(e) = self.generation.validate() {
            problems.push(format!("generation: {e}"));
        }
        // the vocabulary size comes from the tokenizer at train time
        let model = TinyConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model
        };
        if let Err(e) = model.validate() {
            problems.push(format!("model: {e}"));
        }
        if self.sequence.max_sequence_length > self.model.max_positions {
            problems.push(format!(
                "sequence.max_sequence_length {} exceeds model.max_positions {}",
                self.sequence.max_sequence_length, self.model.max_positions
            ));
        }
        if self.generation.max_length + 1 >= self.sequence.max_sequence_length {
            problems.push("generation.max_length leaves no room for the prompt".to_string());
        }
        if self.retrieval.subset_sizes.is_empty() || self.retrieval.subset_sizes.contains(&0) {
            problems.push("retrieval.subset_sizes must be non-empty and positive".to_string());
        }
        if self.retrieval.candidates == 0 {
            problems.push("retrieval.candidates must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  {}", problems.join("\n  "))
        }
    }

    /// Limits for inference prompts: room for the longest response plus `<eos>`.
    pub fn generation_limits(&self) -> SequenceLimits {
        SequenceLimits {
            response_reserve: self.generation.max_length + 1,
            ..self.sequence
        }
    }
}

/// Collects every missing input file so they can be reported together.
pub fn require_files(files: &[(&str, Option<&Path>)]) -> Result<()> {
    let mut missing = Vec::new();
    for (name, path) in files {
        match path {
            None => missing.push(format!("{name}: not set")),
            Some(p) if !p.is_file() => missing.push(format!("{name}: {} does not exist", p.display())),
            Some(_) => {}
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        bail!("missing inputs:\n  {}", missing.join("\n  "))
    }
}
