//! Command-line pipeline: chunking, vocabulary building, training, caption
//! generation, evaluation, gradient checking, synthetic-data generation and
//! corpus statistics.
//!
//! Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure
//! (gradient check above tolerance, training divergence).

mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use philstm_core::chunker::{chunk, parse_conllu, Unit};
use philstm_core::corpus::{load_dataset, parse_captions_tsv, preprocess, Vocab};
use philstm_core::decode::{generate_captions, DecodeConfig, DecodeOutcome};
use philstm_core::eval::{bleu, corpus_stats, eval_perplexity};
use philstm_core::gradcheck::{run as run_gradcheck, GradCheckSpec};
use philstm_core::model::{load_checkpoint, save_checkpoint, BatchItem, ModelDims, PhiModel};
use philstm_core::optim::{train, TrainConfig};
use philstm_core::synth;
use philstm_core::{Error, Rng};

use manifest::{hex32, RunManifest};

#[derive(Parser)]
#[command(name = "philstm", about = "Phrase-based hierarchical LSTM captioning pipeline")]
struct Cli {
    /// Seed for all randomness (training config may override via file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread cap; 0 uses the runtime default.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// JSON training-config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk CoNLL-U parses into bracketed phrase/word units.
    Chunk {
        conllu: PathBuf,
        out: PathBuf,
    },
    /// Build a vocabulary file from a captions TSV.
    BuildVocab {
        captions: PathBuf,
        out: PathBuf,
        /// Minimum occurrence count for a word to be kept.
        #[arg(long, default_value_t = 5)]
        min_count: u64,
    },
    /// Train a model on a data directory.
    Train(TrainArgs),
    /// Generate captions for a feature file.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint against a test directory.
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit a deterministic synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long, value_enum, default_value_t = SynthProfile::Rich)]
        profile: SynthProfile,
    },
    /// Corpus statistics for one or more caption TSV files.
    Stats {
        files: Vec<PathBuf>,
        #[arg(long, default_value = "stats.json")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthProfile {
    /// Two noun phrases per caption.
    Rich,
    /// One noun phrase per caption.
    Simple,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with captions.tsv, parses.conllu and features.phif.
    #[arg(long)]
    data: PathBuf,
    /// Optional validation directory; defaults to the training data.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Embedding / hidden dimension K.
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 5)]
    min_count: u64,
    /// Uniform initialization half-width.
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    /// Zero wall-time fields for byte-reproducible reports.
    #[arg(long)]
    repro: bool,
    // per-field overrides of the config file
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    rms_decay: Option<f64>,
    #[arg(long)]
    rms_epsilon: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Distractor phrases per phrase step (config field "H").
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    selection_warmup: Option<usize>,
    #[arg(long)]
    selection_bootstrap: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    k_phrases: Option<usize>,
    /// Log2-perplexity threshold T.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    phrase_beam: Option<usize>,
    #[arg(long)]
    sent_beam: Option<usize>,
    #[arg(long)]
    max_units: Option<usize>,
    #[arg(long)]
    max_phrase_words: Option<usize>,
    /// Base profile before overrides.
    #[arg(long, value_enum, default_value_t = DecodeProfile::Small)]
    profile: DecodeProfile,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeProfile {
    /// T = 6.5, K = 6.
    Small,
    /// T = 5.2, K = 5.
    Large,
}

impl DecodeArgs {
    fn build(&self) -> DecodeConfig {
        let mut cfg = match self.profile {
            DecodeProfile::Small => DecodeConfig::small_data(),
            DecodeProfile::Large => DecodeConfig::large_data(),
        };
        if let Some(v) = self.k_phrases {
            cfg.k_phrases = v;
        }
        if let Some(v) = self.threshold {
            cfg.threshold_t = v;
        }
        if let Some(v) = self.phrase_beam {
            cfg.phrase_beam = v;
        }
        if let Some(v) = self.sent_beam {
            cfg.sent_beam = v;
        }
        if let Some(v) = self.max_units {
            cfg.max_units = v;
        }
        if let Some(v) = self.max_phrase_words {
            cfg.max_phrase_words = v;
        }
        cfg
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test directory (captions.tsv, parses.conllu, features.phif).
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 6)]
    embed_dim: usize,
    #[arg(long, default_value_t = 12)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    feat_dim: usize,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value = "gradcheck-report.json")]
    out: PathBuf,
}

enum CliError {
    /// Exit code 1: bad inputs, I/O, malformed files.
    Validation(String),
    /// Exit code 2: numerical failure.
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::Divergence { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn main() {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .ok();
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {}", msg);
            1
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {}", msg);
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed.unwrap_or(42);
    match cli.command {
        Command::Chunk { conllu, out } => cmd_chunk(&conllu, &out, seed),
        Command::BuildVocab { captions, out, min_count } => {
            cmd_build_vocab(&captions, &out, min_count, seed)
        }
        Command::Train(args) => cmd_train(args, cli.config.as_deref(), cli.seed),
        Command::Generate(args) => cmd_generate(args, seed),
        Command::Eval(args) => cmd_eval(args, seed),
        Command::Gradcheck(args) => cmd_gradcheck(args, seed),
        Command::Synth { out, pairs, profile } => cmd_synth(&out, pairs, profile, seed),
        Command::Stats { files, out } => cmd_stats(&files, &out, seed),
    }
}

fn start_manifest(command: &str, args: serde_json::Value, seed: u64) -> (RunManifest, Instant) {
    (RunManifest::new(command, args, seed), Instant::now())
}

fn finish_manifest(
    mut m: RunManifest,
    started: Instant,
    path: &Path,
    repro: bool,
) -> CliResult {
    m.wall_time_secs = if repro {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };
    m.write(path)?;
    Ok(())
}

fn cmd_chunk(conllu: &Path, out: &Path, seed: u64) -> CliResult {
    let (mut m, started) = start_manifest(
        "chunk",
        json!({"conllu": conllu, "out": out}),
        seed,
    );
    m.add_input(conllu)?;

    let text = std::fs::read_to_string(conllu).map_err(Error::from)?;
    let parses = parse_conllu(&text)?;
    let chunked: Vec<_> = parses.iter().map(chunk).collect();

    let mut bracketed = String::new();
    for c in &chunked {
        bracketed.push_str(&c.bracketed());
        bracketed.push('\n');
    }
    std::fs::write(out, bracketed).map_err(Error::from)?;

    let spans: Vec<serde_json::Value> = chunked
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let phrases: Vec<serde_json::Value> = c
                .units
                .iter()
                .filter_map(|u| match u {
                    Unit::Phrase { words, span } => Some(json!({
                        "start": span.0,
                        "end": span.1,
                        "text": words.join(" "),
                    })),
                    Unit::Word(_) => None,
                })
                .collect();
            json!({"sentence": i, "phrases": phrases})
        })
        .collect();
    let sidecar = sidecar_path(out, "spans.json");
    std::fs::write(
        &sidecar,
        serde_json::to_string_pretty(&spans).expect("spans serialize") + "\n",
    )
    .map_err(Error::from)?;

    m.add_output(out);
    m.add_output(&sidecar);
    finish_manifest(m, started, &sidecar_path(out, "manifest.json"), false)
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

fn cmd_build_vocab(captions: &Path, out: &Path, min_count: u64, seed: u64) -> CliResult {
    let (mut m, started) = start_manifest(
        "build-vocab",
        json!({"captions": captions, "out": out, "min_count": min_count}),
        seed,
    );
    m.add_input(captions)?;

    let text = std::fs::read_to_string(captions).map_err(Error::from)?;
    let rows = parse_captions_tsv(&text)?;
    let tokenized: Vec<Vec<String>> = rows.iter().map(|(_, c)| preprocess(c)).collect();
    let vocab = Vocab::build(&tokenized, min_count)?;
    vocab.save(out)?;

    m.add_output(out);
    finish_manifest(m, started, &sidecar_path(out, "manifest.json"), false)
}

fn resolve_train_config(
    args: &TrainArgs,
    config_path: Option<&Path>,
    cli_seed: Option<u64>,
) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config {}: {}", p.display(), e)))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.rms_decay {
        cfg.rms_decay = v;
    }
    if let Some(v) = args.rms_epsilon {
        cfg.rms_epsilon = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.dropout_rate {
        cfg.dropout_rate = v;
    }
    if let Some(v) = args.distractors {
        cfg.h_distractors = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.grad_clip {
        cfg.grad_clip = v;
    }
    if let Some(v) = args.selection_warmup {
        cfg.selection_warmup_epochs = v;
    }
    if let Some(v) = args.selection_bootstrap {
        cfg.selection_bootstrap_epochs = v;
    }
    if let Some(v) = cli_seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_items(dir: &Path, vocab: &Vocab) -> Result<Vec<BatchItem>, CliError> {
    let ds = load_dataset(dir)?;
    let items = ds
        .entries
        .iter()
        .map(|e| {
            let feature = ds
                .features
                .get(&e.image_id)
                .expect("validated by load_dataset")
                .data
                .clone();
            BatchItem::from_chunked(&e.chunked, vocab, feature)
        })
        .collect();
    Ok(items)
}

fn cmd_train(args: TrainArgs, config_path: Option<&Path>, cli_seed: Option<u64>) -> CliResult {
    let cfg = resolve_train_config(&args, config_path, cli_seed)?;
    let (mut m, started) = start_manifest(
        "train",
        json!({
            "data": args.data,
            "val": args.val,
            "out": args.out,
            "embed_dim": args.embed_dim,
            "min_count": args.min_count,
            "init_scale": args.init_scale,
            "config": serde_json::to_value(&cfg).expect("config serializes"),
        }),
        cfg.seed,
    );
    for name in ["captions.tsv", "parses.conllu", "features.phif"] {
        m.add_input(&args.data.join(name))?;
    }
    if let Some(val) = &args.val {
        for name in ["captions.tsv", "parses.conllu", "features.phif"] {
            m.add_input(&val.join(name))?;
        }
    }

    let train_ds = load_dataset(&args.data)?;
    let tokenized: Vec<Vec<String>> = train_ds
        .entries
        .iter()
        .map(|e| preprocess(&e.caption))
        .collect();
    let vocab = Vocab::build(&tokenized, args.min_count)?;

    let train_items = dataset_items(&args.data, &vocab)?;
    let val_items = match &args.val {
        Some(dir) => dataset_items(dir, &vocab)?,
        None => train_items.clone(),
    };

    let dims = ModelDims {
        k: args.embed_dim,
        d: train_ds.features.dim,
        v: vocab.len(),
    };
    let mut init_rng = Rng::new(cfg.seed);
    let model = PhiModel::new(&mut init_rng, dims, args.init_scale, vocab.hash());

    let outcome = train(model, &train_items, &val_items, &cfg)?;

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    let vocab_path = args.out.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let ckpt_path = args.out.join("best.ckpt");
    save_checkpoint(&outcome.model, &ckpt_path)?;

    let report_path = args.out.join("epochs.jsonl");
    let mut report = String::new();
    for mut rec in outcome.report {
        if args.repro {
            rec.seconds = 0.0;
        }
        report.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        report.push('\n');
    }
    std::fs::write(&report_path, report).map_err(Error::from)?;

    println!(
        "trained {} epochs; best validation at epoch {}",
        cfg.max_epochs, outcome.best_epoch
    );
    m.add_output(&vocab_path);
    m.add_output(&ckpt_path);
    m.add_output(&report_path);
    finish_manifest(m, started, &args.out.join("manifest.json"), args.repro)
}

fn load_model_with_vocab(
    checkpoint: &Path,
    vocab_path: &Path,
) -> Result<(PhiModel, Vocab), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let vocab = Vocab::load(vocab_path)?;
    if model.dims.v != vocab.len() {
        return Err(CliError::Validation(format!(
            "checkpoint vocabulary size {} != vocab file size {}",
            model.dims.v,
            vocab.len()
        )));
    }
    if model.vocab_hash != vocab.hash() {
        return Err(CliError::Validation(format!(
            "checkpoint vocab hash {} does not match vocab file hash {}",
            hex32(&model.vocab_hash),
            hex32(&vocab.hash())
        )));
    }
    Ok((model, vocab))
}

fn caption_json(vocab: &Vocab, image_id: &str, outcome: &DecodeOutcome) -> serde_json::Value {
    let caption = outcome
        .word_ids
        .iter()
        .map(|&id| vocab.word(id))
        .collect::<Vec<_>>()
        .join(" ");
    let phrases: Vec<serde_json::Value> = outcome
        .candidates
        .iter()
        .zip(&outcome.candidate_scores)
        .map(|(c, score)| {
            json!({
                "text": c.word_ids.iter().map(|&id| vocab.word(id)).collect::<Vec<_>>().join(" "),
                "log2_ppl": c.log2_ppl,
                "score": score,
            })
        })
        .collect();
    let flags: Vec<&str> = if outcome.degraded { vec!["degraded"] } else { vec![] };
    json!({
        "image_id": image_id,
        "caption": caption,
        "phrases": phrases,
        "flags": flags,
    })
}

fn cmd_generate(args: GenerateArgs, seed: u64) -> CliResult {
    let dcfg = args.decode.build();
    let (mut m, started) = start_manifest(
        "generate",
        json!({
            "checkpoint": args.checkpoint,
            "features": args.features,
            "vocab": args.vocab,
            "out": args.out,
            "decode": serde_json::to_value(dcfg).expect("decode config serializes"),
        }),
        seed,
    );
    m.add_input(&args.checkpoint)?;
    m.add_input(&args.features)?;
    m.add_input(&args.vocab)?;

    let (model, vocab) = load_model_with_vocab(&args.checkpoint, &args.vocab)?;
    let features = philstm_core::corpus::load_features(&args.features)?;
    if features.dim != model.dims.d {
        return Err(CliError::Validation(format!(
            "feature dimension {} != model dimension {}",
            features.dim, model.dims.d
        )));
    }

    let ordered: Vec<&philstm_core::Vector> = features
        .order
        .iter()
        .map(|id| &features.get(id).expect("ordered ids exist").data)
        .collect();
    let outcomes = generate_captions(&model, ordered.into_iter(), &dcfg);

    let mut out_lines = String::new();
    for (id, outcome) in features.order.iter().zip(&outcomes) {
        out_lines.push_str(
            &serde_json::to_string(&caption_json(&vocab, id, outcome)).expect("json serializes"),
        );
        out_lines.push('\n');
    }
    std::fs::write(&args.out, out_lines).map_err(Error::from)?;

    m.add_output(&args.out);
    finish_manifest(m, started, &sidecar_path(&args.out, "manifest.json"), false)
}

fn cmd_eval(args: EvalArgs, seed: u64) -> CliResult {
    let dcfg = args.decode.build();
    let (mut m, started) = start_manifest(
        "eval",
        json!({
            "checkpoint": args.checkpoint,
            "test": args.test,
            "vocab": args.vocab,
            "out": args.out,
            "decode": serde_json::to_value(dcfg).expect("decode config serializes"),
        }),
        seed,
    );
    m.add_input(&args.checkpoint)?;
    m.add_input(&args.vocab)?;
    for name in ["captions.tsv", "parses.conllu", "features.phif"] {
        m.add_input(&args.test.join(name))?;
    }

    let (model, vocab) = load_model_with_vocab(&args.checkpoint, &args.vocab)?;
    let ds = load_dataset(&args.test)?;
    if ds.features.dim != model.dims.d {
        return Err(CliError::Validation(format!(
            "feature dimension {} != model dimension {}",
            ds.features.dim, model.dims.d
        )));
    }

    // references grouped per image, in first-appearance order
    let mut image_order: Vec<String> = Vec::new();
    let mut refs_by_image: std::collections::HashMap<String, Vec<Vec<String>>> =
        std::collections::HashMap::new();
    for e in &ds.entries {
        if !refs_by_image.contains_key(&e.image_id) {
            image_order.push(e.image_id.clone());
        }
        refs_by_image
            .entry(e.image_id.clone())
            .or_default()
            .push(preprocess(&e.caption));
    }

    let feats: Vec<&philstm_core::Vector> = image_order
        .iter()
        .map(|id| &ds.features.get(id).expect("validated").data)
        .collect();
    let outcomes = generate_captions(&model, feats.into_iter(), &dcfg);
    let candidates: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| o.word_ids.iter().map(|&id| vocab.word(id).to_string()).collect())
        .collect();
    let references: Vec<Vec<Vec<String>>> = image_order
        .iter()
        .map(|id| refs_by_image[id].clone())
        .collect();

    let bleu_report = bleu(&candidates, &references, 4)?;

    let ref_items = dataset_items(&args.test, &vocab)?;
    let mean_log2ppl = eval_perplexity(&model, &ref_items)?;

    let stats = corpus_stats(&[
        (
            "references".to_string(),
            references.iter().flatten().cloned().collect(),
        ),
        ("candidates".to_string(), candidates.clone()),
    ]);

    let report = json!({
        "b1": bleu_report.b1,
        "b2": bleu_report.b2,
        "b3": bleu_report.b3,
        "b4": bleu_report.b4,
        "bp": bleu_report.brevity_penalty,
        "mean_log2ppl": mean_log2ppl,
        "stats": stats,
    });
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(Error::from)?;
    println!(
        "B-1 {:.3} B-2 {:.3} B-3 {:.3} B-4 {:.3} BP {:.3} mean log2 PPL {:.4}",
        bleu_report.b1, bleu_report.b2, bleu_report.b3, bleu_report.b4,
        bleu_report.brevity_penalty, mean_log2ppl
    );

    m.add_output(&args.out);
    finish_manifest(m, started, &sidecar_path(&args.out, "manifest.json"), false)
}

fn cmd_gradcheck(args: GradcheckArgs, seed: u64) -> CliResult {
    let spec = GradCheckSpec {
        seed,
        instances: args.instances,
        k: args.embed_dim,
        d: args.feat_dim,
        v: args.vocab_size,
        h: args.distractors,
        tolerance: args.tolerance,
        epsilon: args.epsilon,
    };
    let (mut m, started) = start_manifest(
        "gradcheck",
        json!({
            "instances": spec.instances,
            "k": spec.k, "d": spec.d, "v": spec.v, "h": spec.h,
            "tolerance": spec.tolerance, "epsilon": spec.epsilon,
            "out": args.out,
        }),
        seed,
    );

    let report = run_gradcheck(&spec);
    for r in &report.instances {
        println!(
            "instance {:>2}: {} sentences, {} parameters, max relative error {:.3e}",
            r.instance, r.sentences, r.params, r.max_rel_err
        );
    }
    println!(
        "gradcheck {}: max relative error {:.3e} (tolerance {:.1e})",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.tolerance
    );
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(Error::from)?;

    m.add_output(&args.out);
    finish_manifest(m, started, &sidecar_path(&args.out, "manifest.json"), false)?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn cmd_synth(out: &Path, pairs: usize, profile: SynthProfile, seed: u64) -> CliResult {
    let (mut m, started) = start_manifest(
        "synth",
        json!({"out": out, "pairs": pairs, "profile": match profile {
            SynthProfile::Rich => "rich",
            SynthProfile::Simple => "simple",
        }}),
        seed,
    );
    let world = synth::generate(
        seed,
        pairs,
        match profile {
            SynthProfile::Rich => synth::Profile::Rich,
            SynthProfile::Simple => synth::Profile::Simple,
        },
    );
    world.write_dir(out)?;
    for name in ["captions.tsv", "parses.conllu", "features.phif"] {
        m.add_output(&out.join(name));
    }
    finish_manifest(m, started, &out.join("manifest.json"), false)
}

fn cmd_stats(files: &[PathBuf], out: &Path, seed: u64) -> CliResult {
    if files.is_empty() {
        return Err(CliError::Validation("stats: no input files".into()));
    }
    let (mut m, started) = start_manifest("stats", json!({"files": files, "out": out}), seed);
    for f in files {
        m.add_input(f)?;
    }

    let mut corpora = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(f).map_err(Error::from)?;
        let rows = parse_captions_tsv(&text)?;
        let name = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| f.display().to_string());
        corpora.push((
            name,
            rows.iter().map(|(_, c)| preprocess(c)).collect::<Vec<_>>(),
        ));
    }
    let stats = corpus_stats(&corpora);
    for s in &stats {
        println!(
            "{}: {} sentences, vocab {}, words {}, avg length {:.2}",
            s.name, s.sentences, s.vocab_size, s.word_count, s.avg_caption_length
        );
    }
    std::fs::write(
        out,
        serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    )
    .map_err(Error::from)?;

    m.add_output(out);
    finish_manifest(m, started, &sidecar_path(out, "manifest.json"), false)
}
