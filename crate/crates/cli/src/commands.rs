//! Subcommand implementations.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use arbor_core::cka::layer_report;
use arbor_core::decode::PredictedTree;
use arbor_core::encoder::Encoder;
use arbor_core::metrics::uas_las;
use arbor_core::pipeline::{
    arms_csv, fingerprint_bytes, load_checkpoint, restore_model, run_arms, save_checkpoint,
    stream_rng, train_stage, CheckpointMeta, ExperimentSpec, MlmTask, ParseTask, RestoredModel,
    StageTask, TuneMode,
};
use arbor_core::synth;
use arbor_core::tokenizer::{train_bpe, Vocab};
use arbor_core::treebank::{
    check_heads, load_conllu, serialize_conllu, LabelInventory, LoadMode, Sentence,
};

use crate::config::{ExperimentFile, ScheduleSection};

/// Marker for errors that should exit with the usage/config code (2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.is::<UsageError>())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(usage(format!("file not found: {}", path.display())));
    }
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_treebank(path: &Path, mode: LoadMode) -> Result<Vec<Sentence>> {
    let text = read_file(path)?;
    load_conllu(&text, mode).with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

#[derive(Serialize)]
struct Provenance {
    seed: u64,
    config_sha256: String,
}

pub fn gen_data(
    out_dir: &Path,
    seed: u64,
    train: usize,
    dev: usize,
    test: usize,
    task_size: usize,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut rng = stream_rng(seed, 900);
    let splits = [("train", train), ("dev", dev), ("test", test)];
    for (name, n) in splits {
        let bank = synth::toy_treebank(n, 3, 9, &mut rng);
        write_text(&out_dir.join(format!("{name}.conllu")), &serialize_conllu(&bank))?;
    }
    let mut task_rng = stream_rng(seed, 901);
    for name in ["train", "dev", "test"] {
        let seqc = synth::toy_seqc(task_size, &mut task_rng);
        write_text(&out_dir.join(format!("seqc.{name}.jsonl")), &synth::to_jsonl(&seqc))?;
        let mcc = synth::toy_mcc(task_size, 3, &mut task_rng);
        write_text(&out_dir.join(format!("mcc.{name}.jsonl")), &synth::to_jsonl(&mcc))?;
    }
    println!(
        "wrote treebank splits ({train}/{dev}/{test}) and task files to {}",
        out_dir.display()
    );
    Ok(())
}

struct LoadedExperiment {
    file: ExperimentFile,
    seed: u64,
    output_dir: PathBuf,
    fingerprint: String,
}

fn load_experiment(
    config_path: &Path,
    seed_flag: Option<u64>,
    mode_flag: Option<&str>,
) -> Result<LoadedExperiment> {
    if !config_path.exists() {
        return Err(usage(format!("config file not found: {}", config_path.display())));
    }
    let mut file = ExperimentFile::load(config_path).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(seed) = seed_flag {
        file.seed = Some(seed);
    }
    if let Some(mode) = mode_flag {
        if !matches!(mode, "standard" | "adapter") {
            return Err(usage(format!("--mode must be `standard` or `adapter`, got `{mode}`")));
        }
        file.schedule.mode = mode.to_string();
    }
    let seed = file.seed.unwrap_or(42);
    let output_dir = file
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&output_dir)?;
    let fingerprint = file.fingerprint();
    Ok(LoadedExperiment {
        file,
        seed,
        output_dir,
        fingerprint,
    })
}

/// Loads the vocabulary named in the config, or trains one on the supplied
/// sentences and saves it next to the other outputs.
fn obtain_vocab(
    exp: &LoadedExperiment,
    train_sentences: &[Sentence],
) -> Result<(Vocab, String, PathBuf)> {
    match &exp.file.data.vocab {
        Some(path) => {
            let text = read_file(path)?;
            let vocab = Vocab::from_json(&text).map_err(|e| usage(e.to_string()))?;
            Ok((vocab, fingerprint_bytes(text.as_bytes()), path.clone()))
        }
        None => {
            let corpus: Vec<Vec<String>> =
                train_sentences.iter().map(|s| s.forms()).collect();
            let vocab = train_bpe(&corpus, exp.file.encoder.vocab_size)
                .map_err(|e| anyhow!(e.to_string()))?;
            let json = vocab.to_json();
            let path = exp.output_dir.join("vocab.json");
            write_text(&path, &json)?;
            Ok((vocab, fingerprint_bytes(json.as_bytes()), path))
        }
    }
}

#[derive(Serialize)]
struct ParserReport {
    uas: f64,
    las: f64,
    tree_rate: f64,
    n_sentences: usize,
    n_tokens: usize,
    decode_mode: String,
    best_dev_loss: f64,
    update_steps: u64,
    provenance: Provenance,
}

pub fn train_parser(
    config_path: &Path,
    seed_flag: Option<u64>,
    mode_flag: Option<&str>,
    mst: bool,
    strict: bool,
) -> Result<()> {
    let exp = load_experiment(config_path, seed_flag, mode_flag)?;
    let train_path = exp.file.require("train", &exp.file.data.train).map_err(|e| usage(e.to_string()))?;
    let dev_path = exp.file.require("dev", &exp.file.data.dev).map_err(|e| usage(e.to_string()))?;
    let test_path = exp.file.require("test", &exp.file.data.test).map_err(|e| usage(e.to_string()))?;

    let train_mode = if strict { LoadMode::Strict } else { LoadMode::SkipInvalid };
    let train = read_treebank(&train_path, train_mode)?;
    let dev = read_treebank(&dev_path, LoadMode::SkipInvalid)?;
    let test = read_treebank(&test_path, LoadMode::KeepAll)?;

    let (vocab, vocab_fp, _) = obtain_vocab(&exp, &train)?;
    let cfg = exp.file.encoder.to_config(vocab.size());
    let schedule = exp.file.schedule.to_schedule().map_err(|e| usage(e.to_string()))?;

    let mut encoder = Encoder::new(cfg.clone(), &mut stream_rng(exp.seed, 0));
    if schedule.mode == TuneMode::Adapter {
        encoder
            .inject_adapters(
                arbor_core::encoder::AdapterConfig { size: exp.file.adapter.size },
                &mut stream_rng(exp.seed, 1),
            )
            .map_err(|e| anyhow!(e.to_string()))?;
    }
    let mut task = ParseTask::new(&train, &dev, &vocab, cfg.hidden, cfg.dropout, &mut stream_rng(exp.seed, 2))?;
    let report = train_stage(&mut encoder, &mut task, &schedule, exp.seed.wrapping_add(11))?;
    let eval = task.evaluate(&encoder, &test, &vocab, mst)?;

    let meta = CheckpointMeta::new(
        "ipt",
        &encoder,
        Some(task.inventory.labels().to_vec()),
        vocab_fp,
        exp.seed,
        &stream_rng(exp.seed, 99),
    );
    let ckpt_path = exp.output_dir.join("parser.ckpt");
    save_checkpoint(&ckpt_path, &meta, &encoder, &task.head_params())?;

    let out = ParserReport {
        uas: eval.uas,
        las: eval.las,
        tree_rate: eval.tree_rate,
        n_sentences: eval.n_sentences,
        n_tokens: eval.n_tokens,
        decode_mode: if mst { "mst" } else { "greedy" }.into(),
        best_dev_loss: report.best_dev_loss,
        update_steps: report.update_steps,
        provenance: Provenance {
            seed: exp.seed,
            config_sha256: exp.fingerprint.clone(),
        },
    };
    write_json(&exp.output_dir.join("parse_eval.json"), &out)?;
    println!(
        "UAS {:.1} LAS {:.1} tree_rate {:.1} | checkpoint {}",
        eval.uas,
        eval.las,
        eval.tree_rate,
        ckpt_path.display()
    );
    Ok(())
}

fn restore_checked(path: &Path) -> Result<RestoredModel> {
    if !path.exists() {
        return Err(usage(format!("checkpoint not found: {}", path.display())));
    }
    let loaded = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(restore_model(loaded)?)
}

fn check_vocab_match(meta: &CheckpointMeta, vocab_text: &str, what: &str) -> Result<()> {
    let fp = fingerprint_bytes(vocab_text.as_bytes());
    if meta.vocab_fingerprint != fp {
        return Err(usage(format!(
            "{what}: vocabulary fingerprint {fp} does not match the checkpoint ({})",
            meta.vocab_fingerprint
        )));
    }
    Ok(())
}

pub fn parse(
    checkpoint: &Path,
    vocab_path: &Path,
    input: &Path,
    output: &Path,
    mst: bool,
) -> Result<()> {
    let model = restore_checked(checkpoint)?;
    let head = model
        .parse_head
        .as_ref()
        .ok_or_else(|| usage("checkpoint carries no parsing head"))?;
    let labels = model
        .meta
        .labels
        .clone()
        .ok_or_else(|| usage("checkpoint carries no label inventory"))?;
    let inventory = LabelInventory::from_labels(labels);
    let vocab_text = read_file(vocab_path)?;
    check_vocab_match(&model.meta, &vocab_text, "parse")?;
    let vocab = Vocab::from_json(&vocab_text).map_err(|e| usage(e.to_string()))?;

    let mut sentences = read_treebank(input, LoadMode::KeepAll)?;
    for sentence in &mut sentences {
        let encoded = vocab.encode_words(&sentence.forms());
        let tape = arbor_core::tensor::Tape::eval();
        let states = model.encoder.encode_single(&tape, &encoded.ids, None)?;
        let x = arbor_core::encoder::pool_words(&tape, states.final_state(), &encoded)?;
        let xp = arbor_core::encoder::parser_inputs(&tape, states.final_state(), &x)?;
        let scores = head.score(&tape, &x, &xp)?;
        let mut tree = if mst {
            arbor_core::decode::mst_decode(&scores.arc)
        } else {
            arbor_core::decode::greedy_decode(&scores.arc)
        };
        tree.rels = arbor_core::decode::assign_labels(&scores, &tree.heads);
        for (i, tok) in sentence.tokens.iter_mut().enumerate() {
            tok.head = tree.heads[i];
            tok.deprel = inventory.label_of(tree.rels[i]).to_string();
        }
    }
    write_text(output, &serialize_conllu(&sentences))?;
    println!("parsed {} sentences -> {}", sentences.len(), output.display());
    Ok(())
}

#[derive(Serialize)]
struct FinetuneReport {
    arms: Vec<arbor_core::pipeline::ArmReport>,
    provenance: Provenance,
}

pub fn finetune(config_path: &Path, seed_flag: Option<u64>, mode_flag: Option<&str>) -> Result<()> {
    let exp = load_experiment(config_path, seed_flag, mode_flag)?;
    let train_path = exp.file.require("train", &exp.file.data.train).map_err(|e| usage(e.to_string()))?;
    let dev_path = exp.file.require("dev", &exp.file.data.dev).map_err(|e| usage(e.to_string()))?;
    let task_train = exp.file.require("task_train", &exp.file.data.task_train).map_err(|e| usage(e.to_string()))?;
    let task_dev = exp.file.require("task_dev", &exp.file.data.task_dev).map_err(|e| usage(e.to_string()))?;
    let task_test = exp.file.require("task_test", &exp.file.data.task_test).map_err(|e| usage(e.to_string()))?;
    let kind = exp
        .file
        .data
        .task_kind
        .clone()
        .ok_or_else(|| usage("config key `data.task_kind` is required (seqc | mcc)"))?;

    let train = read_treebank(&train_path, LoadMode::Strict)?;
    let dev = read_treebank(&dev_path, LoadMode::SkipInvalid)?;
    let task_data = match kind.as_str() {
        "seqc" => arbor_core::pipeline::TaskData::Seqc {
            train: synth::seqc_from_jsonl(&read_file(&task_train)?)?,
            dev: synth::seqc_from_jsonl(&read_file(&task_dev)?)?,
            test: synth::seqc_from_jsonl(&read_file(&task_test)?)?,
        },
        "mcc" => arbor_core::pipeline::TaskData::Mcc {
            train: synth::mcc_from_jsonl(&read_file(&task_train)?)?,
            dev: synth::mcc_from_jsonl(&read_file(&task_dev)?)?,
            test: synth::mcc_from_jsonl(&read_file(&task_test)?)?,
        },
        other => return Err(usage(format!("config key `data.task_kind`: unknown value `{other}`"))),
    };

    let (vocab, _fp, _) = obtain_vocab(&exp, &train)?;
    let downstream = exp
        .file
        .downstream
        .clone()
        .unwrap_or_else(|| ScheduleSection::downstream_default(&kind));
    let spec = ExperimentSpec {
        encoder: exp.file.encoder.to_config(vocab.size()),
        adapter: arbor_core::encoder::AdapterConfig { size: exp.file.adapter.size },
        intermediate_schedule: exp.file.schedule.to_schedule().map_err(|e| usage(e.to_string()))?,
        downstream_schedule: downstream.to_schedule().map_err(|e| usage(e.to_string()))?,
        mask_rate: exp.file.finetune.mask_rate,
        seed: exp.seed,
    };
    let arms = exp.file.finetune.parse_arms().map_err(|e| usage(e.to_string()))?;

    let reports = run_arms(&arms, &spec, &train, &dev, &task_data, &vocab)?;
    let csv = arms_csv(&reports);
    write_text(&exp.output_dir.join("arms.csv"), &csv)?;
    write_json(
        &exp.output_dir.join("arms.json"),
        &FinetuneReport {
            arms: reports.clone(),
            provenance: Provenance {
                seed: exp.seed,
                config_sha256: exp.fingerprint.clone(),
            },
        },
    )?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct MlmReport {
    initial_masked_accuracy: f64,
    final_masked_accuracy: f64,
    best_dev_loss: f64,
    update_steps: u64,
    provenance: Provenance,
}

pub fn mlm_train(
    config_path: &Path,
    seed_flag: Option<u64>,
    mode_flag: Option<&str>,
    rate: Option<f64>,
) -> Result<()> {
    let exp = load_experiment(config_path, seed_flag, mode_flag)?;
    let mask_rate = rate.unwrap_or(exp.file.finetune.mask_rate);
    if !(mask_rate > 0.0 && mask_rate <= 1.0) {
        return Err(usage(format!("--rate must lie in (0, 1], got {mask_rate}")));
    }
    let train_path = exp.file.require("train", &exp.file.data.train).map_err(|e| usage(e.to_string()))?;
    let dev_path = exp.file.require("dev", &exp.file.data.dev).map_err(|e| usage(e.to_string()))?;
    let train = read_treebank(&train_path, LoadMode::Strict)?;
    let dev = read_treebank(&dev_path, LoadMode::SkipInvalid)?;
    let (vocab, vocab_fp, _) = obtain_vocab(&exp, &train)?;
    let cfg = exp.file.encoder.to_config(vocab.size());
    let schedule = exp.file.schedule.to_schedule().map_err(|e| usage(e.to_string()))?;

    let mut encoder = Encoder::new(cfg.clone(), &mut stream_rng(exp.seed, 0));
    if schedule.mode == TuneMode::Adapter {
        encoder
            .inject_adapters(
                arbor_core::encoder::AdapterConfig { size: exp.file.adapter.size },
                &mut stream_rng(exp.seed, 1),
            )
            .map_err(|e| anyhow!(e.to_string()))?;
    }
    let mut task = MlmTask::new(
        &train,
        &dev,
        &vocab,
        cfg.hidden,
        cfg.dropout,
        mask_rate,
        exp.seed.wrapping_add(4),
        &mut stream_rng(exp.seed, 2),
    )?;
    let train_ids: Vec<Vec<u32>> = task.train_ids().to_vec();
    let initial = task.masked_accuracy(&encoder, &train_ids, exp.seed.wrapping_add(50))?;
    let report = train_stage(&mut encoder, &mut task, &schedule, exp.seed.wrapping_add(11))?;
    let fin = task.masked_accuracy(&encoder, &train_ids, exp.seed.wrapping_add(50))?;

    let meta = CheckpointMeta::new("ilmt", &encoder, None, vocab_fp, exp.seed, &stream_rng(exp.seed, 99));
    save_checkpoint(
        &exp.output_dir.join("mlm.ckpt"),
        &meta,
        &encoder,
        &task.head_params(),
    )?;
    write_json(
        &exp.output_dir.join("mlm_report.json"),
        &MlmReport {
            initial_masked_accuracy: initial,
            final_masked_accuracy: fin,
            best_dev_loss: report.best_dev_loss,
            update_steps: report.update_steps,
            provenance: Provenance {
                seed: exp.seed,
                config_sha256: exp.fingerprint.clone(),
            },
        },
    )?;
    println!("masked accuracy {initial:.1} -> {fin:.1}");
    Ok(())
}

#[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
struct CkaLongRow {
    layer: usize,
    pair: String,
    score: f64,
}

#[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
struct CkaJsonReport {
    sentence_set: String,
    n_sentences: usize,
    rows: Vec<CkaLongRow>,
}

#[allow(clippy::too_many_arguments)]
pub fn cka(
    ckpt_a: &Path,
    ckpt_b: &Path,
    vocab_path: &Path,
    sentences_path: &Path,
    out_prefix: &Path,
    tag_a: &str,
    tag_b: &str,
) -> Result<()> {
    let a = restore_checked(ckpt_a)?;
    let b = restore_checked(ckpt_b)?;
    let vocab_text = read_file(vocab_path)?;
    check_vocab_match(&a.meta, &vocab_text, "checkpoint A")?;
    check_vocab_match(&b.meta, &vocab_text, "checkpoint B")?;
    let vocab = Vocab::from_json(&vocab_text).map_err(|e| usage(e.to_string()))?;
    let sentences = read_treebank(sentences_path, LoadMode::KeepAll)?;

    let report = layer_report(
        &[(tag_a, &a.encoder), (tag_b, &b.encoder)],
        &vocab,
        &sentences,
        &sentences_path.display().to_string(),
    )?;
    let csv_path = out_prefix.with_extension("csv");
    write_text(&csv_path, &report.to_csv())?;
    let rows: Vec<CkaLongRow> = report
        .scores
        .iter()
        .enumerate()
        .flat_map(|(layer, row)| {
            report
                .pairs
                .iter()
                .zip(row.iter())
                .map(move |((pa, pb), &score)| CkaLongRow {
                    layer,
                    pair: format!("{pa}-{pb}"),
                    score,
                })
        })
        .collect();
    let json = CkaJsonReport {
        sentence_set: report.sentence_set.clone(),
        n_sentences: report.n_sentences,
        rows,
    };
    write_json(&out_prefix.with_extension("json"), &json)?;
    println!("wrote {} and {}", csv_path.display(), out_prefix.with_extension("json").display());
    Ok(())
}

pub fn eval(pred_path: &Path, gold_path: &Path, out: Option<&Path>) -> Result<()> {
    let pred = read_treebank(pred_path, LoadMode::KeepAll)?;
    let gold = read_treebank(gold_path, LoadMode::KeepAll)?;
    let inventory = LabelInventory::from_sentences(&gold)?;
    let trees: Vec<PredictedTree> = pred
        .iter()
        .map(|s| {
            let heads = s.gold_heads();
            let is_tree = check_heads(&heads).is_valid_tree();
            PredictedTree {
                rels: s
                    .tokens
                    .iter()
                    .map(|t| inventory.index_of(&t.deprel))
                    .collect(),
                heads,
                is_tree,
            }
        })
        .collect();
    let eval = uas_las(&trees, &gold, &inventory)?;
    let text = serde_json::to_string_pretty(&eval)?;
    match out {
        Some(path) => write_text(path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}
