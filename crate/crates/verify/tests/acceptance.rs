//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Oracles here are written independently of the
//! library code they check.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;
use edge_cli::commands::{self, AntiScamRecord};
use edge_cli::config::RunConfig;
use edge_core::corpus::{self, ContextResponsePair, Speaker, Utterance};
use edge_core::evaluation::{self, MetricsReport};
use edge_core::frames::{Frame, FrameLexicon, FrameSequence, FrameTagger};
use edge_core::generation::{self, derive_seed, GenerationConfig};
use edge_core::noising::{self, NoisingConfig};
use edge_core::retrieval::{self, IndexEntry, ScoredCandidate};
use edge_core::sequence::{SequenceBuilder, SequenceLimits, IGNORE};
use edge_core::tokenizer::WordTokenizer;
use edge_core::trainer::EpochStats;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Runs one CLI invocation in-process through the real argument parser.
fn cli(args: &[String]) -> Result<(), String> {
    let parsed = edge_cli::Cli::try_parse_from(args).map_err(|e| e.to_string())?;
    edge_cli::run(parsed).map_err(|e| format!("{e:#}"))
}

struct Outcome {
    pass: bool,
    detail: String,
}

type Check<'a> = Box<dyn FnOnce() -> Result<Outcome, String> + 'a>;

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome, String> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------- 1

#[derive(Deserialize)]
struct GoldenRow {
    id: String,
    text: String,
    lexicon: Vec<(String, String)>,
    expected: Vec<String>,
}

fn frame_golden() -> Result<Outcome, String> {
    let raw = std::fs::read_to_string(edge_verify::data("golden/frames.jsonl")).map_err(|e| e.to_string())?;
    let rows: Vec<GoldenRow> = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let start = Instant::now();
    let mut failures = Vec::new();
    for row in &rows {
        let tsv: String = row.lexicon.iter().map(|(u, f)| format!("{u}\t{f}\n")).collect();
        let lexicon = FrameLexicon::parse(&tsv).map_err(|e| e.to_string())?;
        let got = lexicon.extract_frames(&row.text).labels();
        if got != row.expected {
            failures.push(format!(
                "{}: expected [{}] got [{}]",
                row.id,
                row.expected.join(" "),
                got.join(" ")
            ));
        }
    }
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(1);
    let mut detail = format!(
        "{}/{} rows exact in {:.1} ms",
        rows.len() - failures.len(),
        rows.len(),
        elapsed.as_secs_f64() * 1e3
    );
    for f in &failures {
        detail.push_str("\n      ");
        detail.push_str(f);
    }
    outcome(failures.is_empty() && in_time && rows.len() == 6, detail)
}

// ---------------------------------------------------------------- 2

fn multiset(frames: &[Frame]) -> Vec<&str> {
    let mut v: Vec<&str> = frames.iter().map(Frame::as_str).collect();
    v.sort_unstable();
    v
}

fn in_order(needle: &[Frame], haystack: &[Frame]) -> bool {
    let mut j = 0;
    for h in haystack {
        if j < needle.len() && needle[j] == *h {
            j += 1;
        }
    }
    j == needle.len()
}

fn noising_stats() -> Result<Outcome, String> {
    const TRIALS: usize = 10_000;
    let start = Instant::now();
    let vocab: Vec<Frame> = (0..100).map(|i| Frame::new(&format!("F{i}")).unwrap()).collect();
    let seq = FrameSequence::new(vocab.clone());
    let config = NoisingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let (mut dropped_total, mut full_total) = (0usize, 0usize);
    let (mut shuffle_ok, mut add_ok) = (0usize, 0usize);
    for _ in 0..TRIALS {
        dropped_total += noising::drop_frames(&seq, config.drop_rate, &mut rng).unwrap().len();
        full_total += noising::noise(&seq, &config, &vocab, &mut rng).unwrap().len();
        let shuffled = noising::shuffle_frames(&seq, config.shuffle_prob, &mut rng).unwrap();
        let collected: Vec<Frame> = shuffled.iter().cloned().collect();
        if multiset(&collected) == multiset(&vocab) {
            shuffle_ok += 1;
        }
        let added = noising::add_random_frames(&seq, config.add_ratio, &vocab, &mut rng).unwrap();
        let added: Vec<Frame> = added.iter().cloned().collect();
        if added.len() == 130 && in_order(&vocab, &added) {
            add_ok += 1;
        }
    }
    let drop_mean = dropped_total as f64 / TRIALS as f64;
    let full_mean = full_total as f64 / TRIALS as f64;
    let elapsed = start.elapsed();
    let pass = (84.0..=86.0).contains(&drop_mean)
        && (109.0..=112.0).contains(&full_mean)
        && shuffle_ok == TRIALS
        && add_ok == TRIALS
        && elapsed < Duration::from_secs(30);
    outcome(
        pass,
        format!(
            "drop mean {drop_mean:.3}, full mean {full_mean:.3}, shuffle multiset {shuffle_ok}/{TRIALS}, \
             add subsequence {add_ok}/{TRIALS}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn brute_dist(responses: &[Vec<String>], n: usize) -> Option<f64> {
    let mut all: Vec<Vec<String>> = Vec::new();
    for r in responses {
        if r.len() >= n {
            for i in 0..=r.len() - n {
                all.push(r[i..i + n].to_vec());
            }
        }
    }
    if all.is_empty() {
        return None;
    }
    let mut distinct = 0;
    for i in 0..all.len() {
        if !all[..i].contains(&all[i]) {
            distinct += 1;
        }
    }
    Some(distinct as f64 / all.len() as f64)
}

fn brute_jaccard(a: &[String], b: &[String]) -> f64 {
    let mut union: Vec<&String> = a.iter().chain(b).collect();
    union.sort();
    union.dedup();
    if union.is_empty() {
        return 1.0;
    }
    let inter = union.iter().filter(|x| a.contains(x) && b.contains(x)).count();
    inter as f64 / union.len() as f64
}

fn hand_nucleus(probs: &[f64], p: f64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    let mut keep = vec![false; probs.len()];
    let mut mass = 0.0;
    for &i in &idx {
        keep[i] = true;
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let kept: f64 = (0..probs.len()).filter(|&i| keep[i]).map(|i| probs[i]).sum();
    (0..probs.len()).map(|i| if keep[i] { probs[i] / kept } else { 0.0 }).collect()
}

fn metric_oracles() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let words: Vec<String> = ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()).collect();

    let mut dist_ok = 0;
    for _ in 0..500 {
        let corpus: Vec<Vec<String>> = (0..rng.random_range(1..8))
            .map(|_| (0..rng.random_range(0..9)).map(|_| words.choose(&mut rng).unwrap().clone()).collect())
            .collect();
        let all_match = (1..=3).all(|n| match (evaluation::dist_n(&corpus, n), brute_dist(&corpus, n)) {
            (Ok(a), Some(b)) => a == b,
            (Err(_), None) => true,
            _ => false,
        });
        if all_match {
            dist_ok += 1;
        }
    }

    let labels: Vec<String> = (0..8).map(|i| format!("L{i}")).collect();
    let mut pools_ok = 0;
    let mut jaccard_ok = true;
    for _ in 0..1000 {
        let pool: Vec<Vec<String>> = (0..rng.random_range(1..15))
            .map(|_| {
                let mut s: Vec<String> = (0..rng.random_range(0..5))
                    .map(|_| labels.choose(&mut rng).unwrap().clone())
                    .collect();
                s.sort();
                s.dedup();
                s
            })
            .collect();
        let entries: Vec<IndexEntry> = pool
            .iter()
            .map(|s| IndexEntry {
                text: s.join(" "),
                frames: FrameSequence::new(s.iter().map(|l| Frame::new(l).unwrap()).collect()),
                source_context: Vec::new(),
                features: Default::default(),
            })
            .collect();
        let cands: Vec<ScoredCandidate> = entries
            .iter()
            .enumerate()
            .map(|(index, entry)| ScoredCandidate {
                index,
                entry,
                score: 0.0,
            })
            .collect();
        for a in &entries {
            for b in &entries {
                let lib = retrieval::jaccard(&a.frame_set(), &b.frame_set());
                if (lib - brute_jaccard(&a.frames.labels(), &b.frames.labels())).abs() > 1e-12 {
                    jaccard_ok = false;
                }
            }
        }
        let size = rng.random_range(1..12);
        let chosen = retrieval::select_diverse_subset(&cands, size);
        let mut ok = !chosen.is_empty() && chosen.len() <= size;
        for (x, a) in chosen.iter().enumerate() {
            for b in &chosen[x + 1..] {
                if brute_jaccard(&pool[a.index], &pool[b.index]) >= 0.5 {
                    ok = false;
                }
            }
        }
        if ok {
            pools_ok += 1;
        }
    }

    let mut nucleus_ok = 0;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.random_range(2..20);
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let p = rng.random_range(0.05..1.0);
        let lib = generation::nucleus_filter(&probs, p).map_err(|e| e.to_string())?;
        let hand = hand_nucleus(&probs, p);
        let err = lib.iter().zip(&hand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        if err <= 1e-9 {
            nucleus_ok += 1;
        }
    }

    outcome(
        dist_ok == 500 && pools_ok == 1000 && jaccard_ok && nucleus_ok == 50,
        format!(
            "dist_n {dist_ok}/500 exact, diverse pools {pools_ok}/1000, jaccard oracle {}, \
             nucleus {nucleus_ok}/50 (max err {worst:.1e})",
            if jaccard_ok { "agrees" } else { "disagrees" }
        ),
    )
}

// ---------------------------------------------------------------- 4

fn mask_exactness() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let frame_vocab: BTreeSet<Frame> = (0..25).map(|i| Frame::new(&format!("FR{i}")).unwrap()).collect();
    let frames: Vec<Frame> = frame_vocab.iter().cloned().collect();
    let tokenizer = WordTokenizer::build(words.iter().map(String::as_str), &frame_vocab);
    let builder = SequenceBuilder::new(&tokenizer, SequenceLimits::default());
    let special = tokenizer.special();
    let sentence = |rng: &mut ChaCha8Rng, max: usize| {
        (0..rng.random_range(1..=max))
            .map(|_| words.choose(rng).unwrap().as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };

    let (mut labels_ok, mut block_ok) = (0, 0);
    for _ in 0..1000 {
        let mut speaker = if rng.random() { Speaker::A } else { Speaker::B };
        let context: Vec<Utterance> = (0..rng.random_range(1..=5))
            .map(|_| {
                let u = Utterance::new(speaker, &sentence(&mut rng, 12)).unwrap();
                speaker = speaker.other();
                u
            })
            .collect();
        let response = Utterance::new(speaker, &sentence(&mut rng, 15)).unwrap();
        let cond = FrameSequence::new(
            (0..rng.random_range(0..10))
                .map(|_| frames.choose(&mut rng).unwrap().clone())
                .collect(),
        );
        let pair = ContextResponsePair {
            context,
            response_frames: cond.clone(),
            response,
        };
        let ex = builder.training_sequence(&pair, &cond).map_err(|e| e.to_string())?;
        let response_len = tokenizer.encode(&pair.response.text).len();
        if ex.lm_labels.iter().filter(|&&l| l != IGNORE).count() == response_len + 1 {
            labels_ok += 1;
        }
        let back: Option<Vec<Frame>> = ex
            .frame_block(&special)
            .map(|ids| ids.iter().filter_map(|&id| tokenizer.frame_for_id(id).cloned()).collect());
        if back.as_deref() == Some(cond.iter().cloned().collect::<Vec<_>>().as_slice()) {
            block_ok += 1;
        }
    }
    outcome(
        labels_ok == 1000 && block_ok == 1000,
        format!("label count exact {labels_ok}/1000, frame block round trip {block_ok}/1000"),
    )
}

// ---------------------------------------------------------------- 5-8

/// Toy-config arguments with every path redirected into `dir`.
fn toy_overrides(dir: &Path) -> Vec<String> {
    let p = |x: &Path| x.display().to_string();
    vec![
        format!("paths.lexicon={}", p(&edge_verify::data("lexicon.tsv"))),
        format!("paths.train={}", p(&edge_verify::data("toy/train.jsonl"))),
        format!("paths.valid={}", p(&edge_verify::data("toy/valid.jsonl"))),
        format!("paths.checkpoint={}", p(&dir.join("checkpoint"))),
        format!("paths.output_dir={}", p(dir)),
        format!("paths.report={}", p(&dir.join("report.json"))),
    ]
}

fn edge(command: &str, dir: &Path, extra: &[&str], sets: &[&str]) -> Result<(), String> {
    let mut args: Vec<String> = vec![
        "edge".into(),
        command.into(),
        "--config".into(),
        edge_verify::config("toy.json").display().to_string(),
    ];
    for s in toy_overrides(dir).iter().map(String::as_str).chain(sets.iter().copied()) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    cli(&args)
}

fn toy_config(dir: &Path) -> Result<RunConfig, String> {
    RunConfig::load(&edge_verify::config("toy.json"), &toy_overrides(dir))
        .map(|(c, _)| c)
        .map_err(|e| format!("{e:#}"))
}

fn overfit(dir: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    edge("train", dir, &[], &[])?;
    let history: Vec<EpochStats> = serde_json::from_str(
        &std::fs::read_to_string(dir.join("checkpoint").join(commands::HISTORY_FILE)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let first = history.first().ok_or("empty history")?.train_lm_loss;
    let last = history.last().unwrap().train_lm_loss;

    edge("generate", dir, &[], &["retrieval.exemplars=gold"])?;
    let run = dir.join(commands::GOLD_RUN_FILE);
    edge("evaluate", dir, &["--run-file", &run.display().to_string()], &[])?;
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ratio = last / first;
    outcome(
        ratio < 0.5 && report.sem_cov >= 0.6 && elapsed < Duration::from_secs(600),
        format!(
            "{} epochs, lm loss {first:.3} -> {last:.3} (ratio {ratio:.3}), gold-frame SemCov {:.3} over {} responses, {:.0} s",
            history.len(),
            report.sem_cov,
            report.counts.responses,
            elapsed.as_secs_f64()
        ),
    )
}

fn frame_set(labels: &FrameSequence) -> BTreeSet<Frame> {
    labels.iter().cloned().collect()
}

/// Training pair whose frame set overlaps least with `gold` (Jaccard), ties
/// to the lowest index. Pairs without frames are never chosen.
fn unrelated<'p>(gold: &BTreeSet<Frame>, pool: &'p [ContextResponsePair]) -> Option<&'p ContextResponsePair> {
    pool.iter()
        .filter(|p| !p.response_frames.is_empty())
        .map(|p| {
            let s = frame_set(&p.response_frames);
            let inter = s.intersection(gold).count();
            let union = s.union(gold).count();
            (inter as f64 / union as f64, p)
        })
        .fold(None, |best: Option<(f64, &ContextResponsePair)>, (j, p)| match best {
            Some((bj, _)) if bj <= j => best,
            _ => Some((j, p)),
        })
        .map(|(_, p)| p)
}

fn control_vs_ignore(dir: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    let config = toy_config(dir)?;
    let lexicon = FrameLexicon::load(&config.paths.lexicon).map_err(|e| e.to_string())?;
    let (model, tokenizer) = commands::load_model(&config).map_err(|e| format!("{e:#}"))?;
    let builder = SequenceBuilder::new(&tokenizer, config.generation_limits());
    let load = |p: &PathBuf| -> Result<Vec<ContextResponsePair>, String> {
        let (d, _) = corpus::load_dialogues(p).map_err(|e| e.to_string())?;
        Ok(corpus::build_pairs(&d, &lexicon))
    };
    let train = load(config.paths.train.as_ref().unwrap())?;
    let test = load(config.paths.valid.as_ref().unwrap())?;

    let (mut gold_sum, mut other_sum, mut own_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for (i, pair) in test.iter().enumerate() {
        let gold = frame_set(&pair.response_frames);
        if gold.is_empty() {
            continue;
        }
        let other = unrelated(&gold, &train).ok_or("no unrelated exemplar")?;
        let cfg = GenerationConfig {
            seed: derive_seed(config.generation.seed, i as u64),
            ..config.generation
        };
        let gen = |frames: &FrameSequence| -> Result<String, String> {
            let out = generation::generate_samples(&model, &builder, &pair.context, frames, None, &cfg)
                .map_err(|e| e.to_string())?;
            Ok(out[0].text.clone())
        };
        let with_gold = gen(&pair.response_frames)?;
        let with_other = gen(&other.response_frames)?;
        gold_sum += evaluation::sem_cov(&with_gold, &gold, &lexicon).unwrap();
        other_sum += evaluation::sem_cov(&with_other, &gold, &lexicon).unwrap();
        own_sum += evaluation::sem_cov(&with_other, &frame_set(&other.response_frames), &lexicon).unwrap();
        n += 1;
    }
    let (g, o, own) = (gold_sum / n as f64, other_sum / n as f64, own_sum / n as f64);
    let elapsed = start.elapsed();
    outcome(
        g - o >= 0.15 && elapsed < Duration::from_secs(120),
        format!(
            "SemCov against gold frames: gold-conditioned {g:.3}, unrelated-conditioned {o:.3}, gap {:.3} \
             ({n} pairs; unrelated output covers its own exemplar at {own:.3}), {:.0} s",
            g - o,
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Result<Outcome, String> {
    let start = Instant::now();
    let run = || -> Result<(tempfile::TempDir, Vec<Vec<u8>>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        edge("train", dir.path(), &[], &[])?;
        edge("generate", dir.path(), &[], &[])?;
        let files = [1, 5, 10]
            .iter()
            .map(|s| std::fs::read(dir.path().join(commands::generations_file(*s))).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((dir, files))
    };
    let (_a, first) = run()?;
    let (_b, second) = run()?;
    let bytes: usize = first.iter().map(Vec::len).sum();
    let identical = first == second && bytes > 0;
    outcome(
        identical,
        format!(
            "3 generations files, {bytes} bytes, {}, {:.0} s",
            if identical { "byte-identical" } else { "differ" },
            start.elapsed().as_secs_f64()
        ),
    )
}

fn anti_scam_shape(dir: &Path) -> Result<Outcome, String> {
    let emails = edge_verify::data("antiscam/emails.jsonl");
    let exemplars = edge_verify::data("antiscam/exemplars.jsonl");
    edge(
        "anti-scam",
        dir,
        &[
            "--emails",
            &emails.display().to_string(),
            "--exemplars",
            &exemplars.display().to_string(),
        ],
        &[],
    )?;
    let raw = std::fs::read_to_string(dir.join(commands::ANTI_SCAM_FILE)).map_err(|e| e.to_string())?;
    let records: Vec<AntiScamRecord> = raw
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;

    let lexicon = FrameLexicon::load(edge_verify::data("lexicon.tsv")).map_err(|e| e.to_string())?;
    let frames_ok = records
        .iter()
        .all(|r| !r.frames.is_empty() && r.frames == lexicon.extract_frames(&r.exemplar).labels());
    let pairs: BTreeSet<(&str, &str)> = records.iter().map(|r| (r.email_id.as_str(), r.exemplar.as_str())).collect();
    let intents: BTreeSet<&str> = records.iter().map(|r| r.intent.as_str()).collect();
    let emails_seen: BTreeSet<&str> = records.iter().map(|r| r.email_id.as_str()).collect();
    // within each email, an intent never reappears after another intent
    let grouped = emails_seen.iter().all(|e| {
        let seq: Vec<&str> = records.iter().filter(|r| r.email_id == *e).map(|r| r.intent.as_str()).collect();
        let mut seen: Vec<&str> = Vec::new();
        seq.iter().all(|i| {
            if seen.last() == Some(i) {
                true
            } else if seen.contains(i) {
                false
            } else {
                seen.push(i);
                true
            }
        })
    });
    outcome(
        records.len() == 100 && pairs.len() == 100 && intents.len() == 5 && emails_seen.len() == 5 && frames_ok && grouped,
        format!(
            "{} responses, {} distinct (email, exemplar) pairs, {} intents, {} emails, frames recorded: {}, intent-grouped: {}",
            records.len(),
            pairs.len(),
            intents.len(),
            emails_seen.len(),
            frames_ok,
            grouped
        ),
    )
}

fn main() {
    let workdir = tempfile::tempdir().expect("temp dir");
    let shared = workdir.path().to_path_buf();
    let checks: Vec<(&str, Check)> = vec![
        ("1 frame-extraction golden suite", Box::new(frame_golden)),
        ("2 noising statistics", Box::new(noising_stats)),
        ("3 metric oracles", Box::new(metric_oracles)),
        ("4 sequence-builder mask exactness", Box::new(mask_exactness)),
        ("5 overfit reproduction", Box::new(|| overfit(&shared))),
        ("6 control-vs-ignore", Box::new(|| control_vs_ignore(&shared))),
        ("7 end-to-end determinism", Box::new(determinism)),
        ("8 anti-scam shape", Box::new(|| anti_scam_shape(&shared))),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            })
            .unwrap_or_else(|e| Outcome {
                pass: false,
                detail: format!("error: {e}"),
            });
        if !result.pass {
            failed += 1;
        }
        println!("{} criterion {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
