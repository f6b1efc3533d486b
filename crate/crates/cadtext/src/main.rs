//! Command-line entry point: preprocess → make-pairs / train / sweep →
//! eval-zeroshot, plus synthetic-corpus generation. Every command writes
//! one manifest next to its outputs and is byte-deterministic for a given
//! seed (manifest wall-clock aside).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cadtext::checkpoint::Checkpoint;
use cadtext::corpus::{self, load_corpus, save_corpus, CleaningRules};
use cadtext::error::{Error, Result};
use cadtext::manifest::{manifest_path_for, RunManifest};
use cadtext::objectives::Objective;
use cadtext::sentence::{build_pair_dataset, load_pairs, save_pairs, SentenceCase, SentencePair};
use cadtext::synthlab::{generate, SynthSpec};
use cadtext::training::{
    run_sweep, train, write_sweep_csv, ModelBundle, SweepGrid, TrainConfig, TrainData,
};
use cadtext::zeroshot::{evaluate, export_similarity_csv, export_similarity_pgm};

#[derive(Parser)]
#[command(
    name = "cadtext",
    version,
    about = "Assembly/part-name text tasks: preprocessing, pair classification, contrastive training, zero-shot evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, deduplicate and report stats for a JSONL corpus.
    Preprocess(PreprocessArgs),
    /// Build a labelled sentence-pair dataset from a corpus.
    MakePairs(MakePairsArgs),
    /// Train one model (pair | contrastive | mlm).
    Train(TrainArgs),
    /// Train every cell of a hyperparameter grid and emit a CSV table.
    Sweep(SweepArgs),
    /// Zero-shot assembly-name prediction from a checkpoint.
    EvalZeroshot(EvalArgs),
    /// Generate a synthetic corpus with controllable signal strength.
    GenerateSynth(GenerateArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input corpus (JSONL).
    #[arg(long = "in")]
    input: PathBuf,
    /// Cleaned + deduplicated corpus (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Cleaning rules as JSON; defaults to the built-in rule set.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Funnel statistics JSON.
    #[arg(long)]
    stats_out: PathBuf,
    /// Per-line error report; defaults to <out>.report.txt.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MakePairsArgs {
    /// Cleaned corpus (JSONL).
    #[arg(long = "in")]
    input: PathBuf,
    /// Sentence scheme: base, case1, case2, case3, case4.
    #[arg(long)]
    case: SentenceCase,
    /// Negatives sampled per positive.
    #[arg(long, default_value_t = 1)]
    neg_ratio: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pair dataset (JSONL).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Base configuration as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training data: pair JSONL for the pair objective, corpus JSONL
    /// otherwise.
    #[arg(long)]
    data: PathBuf,
    /// Held-out data in the same format; when absent, --val-fraction of
    /// --data is split off deterministically.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Output directory (checkpoint.json, metrics.json, manifest.json).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    dropout: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    output_attention_heads: Option<usize>,
    #[arg(long)]
    frozen_layers: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    tau_learnable: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sentence case recorded for provenance (pair data built elsewhere).
    #[arg(long)]
    case: Option<SentenceCase>,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid axes as JSON; omitted axes fall back to single defaults.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Use the full pair-task grid (3 lrs × 3 dropouts × 2 lengths ×
    /// {base, 8, 32} heads).
    #[arg(long, default_value_t = false)]
    full_grid: bool,
    /// Base configuration as JSON (same schema as `train --config`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Output directory (sweep.csv, manifest.json).
    #[arg(long)]
    out: PathBuf,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test corpus (JSONL).
    #[arg(long)]
    test: PathBuf,
    /// Records per zero-shot batch.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation report (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Directory for per-batch similarity CSV/PGM exports.
    #[arg(long)]
    export_sim: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of assemblies.
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Probability that a part carries its assembly's head word.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_parts: usize,
    #[arg(long, default_value_t = 8)]
    max_parts: usize,
    #[arg(long, default_value_t = false)]
    with_descriptions: bool,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            // --help / --version
            print!("{e}");
            std::process::exit(0);
        }
    };
    let started = Instant::now();
    let outcome = match cli.command {
        Command::Preprocess(args) => cmd_preprocess(args, started),
        Command::MakePairs(args) => cmd_make_pairs(args, started),
        Command::Train(args) => cmd_train(args, started),
        Command::Sweep(args) => cmd_sweep(args, started),
        Command::EvalZeroshot(args) => cmd_eval_zeroshot(args, started),
        Command::GenerateSynth(args) => cmd_generate_synth(args, started),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Relative input paths resolve against CADTEXT_DATA_DIR when it is set.
fn resolve_input(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(base) = std::env::var("CADTEXT_DATA_DIR") {
            if !base.is_empty() {
                return Path::new(&base).join(path);
            }
        }
    }
    path.to_path_buf()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&content).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    use std::io::Write;
    writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs, started: Instant) -> Result<()> {
    let input = resolve_input(&args.input);
    let rules: CleaningRules = match &args.rules {
        Some(path) => read_json(&resolve_input(path))?,
        None => CleaningRules::default(),
    };
    // Read the input before creating any output so a bad invocation
    // leaves nothing half-written.
    let loaded = load_corpus(&input)?;
    let (cleaned, stats) = corpus::preprocess(&loaded.records, &rules)?;

    ensure_parent_dir(&args.out)?;
    save_corpus(&cleaned, &args.out)?;
    write_json(&stats, &args.stats_out)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.txt"));
    let report_lines: Vec<String> = loaded
        .errors
        .iter()
        .map(|(line, msg)| format!("line {line}: {msg}"))
        .collect();
    let mut report_text = report_lines.join("\n");
    report_text.push('\n');
    std::fs::write(&report_path, report_text).map_err(|e| Error::io(&report_path, e))?;

    println!(
        "preprocess: {} raw -> {} cleaned+deduped ({} unique names), {} malformed lines",
        stats.n_raw,
        stats.n_after_clean_dedup,
        stats.n_unique_assembly_names,
        loaded.errors.len()
    );

    let mut manifest = RunManifest::new(
        "preprocess",
        serde_json::json!({ "rules": rules, "stats": stats }),
    );
    manifest.inputs = vec![input];
    manifest.outputs = vec![args.out.clone(), args.stats_out.clone(), report_path];
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(&manifest_path_for(&args.out))
}

fn cmd_make_pairs(args: MakePairsArgs, started: Instant) -> Result<()> {
    let input = resolve_input(&args.input);
    if args.neg_ratio == 0 {
        return Err(Error::Config("--neg-ratio must be at least 1".into()));
    }
    let loaded = load_corpus(&input)?;
    if matches!(args.case, SentenceCase::Case4)
        && loaded.records.iter().all(|r| r.description.is_none())
    {
        return Err(Error::Data(
            "case4 needs records with a description field, but none carry one".into(),
        ));
    }
    let dataset = build_pair_dataset(&loaded.records, args.case, args.neg_ratio, args.seed)?;
    ensure_parent_dir(&args.out)?;
    save_pairs(&dataset.pairs, &args.out)?;
    println!(
        "make-pairs: {} pairs ({} positives), {} records skipped for {}",
        dataset.pairs.len(),
        dataset.pairs.iter().filter(|p| p.label == 1).count(),
        dataset.skipped_records,
        args.case.name()
    );
    let mut manifest = RunManifest::new(
        "make-pairs",
        serde_json::json!({
            "case": args.case.name(),
            "neg_ratio": args.neg_ratio,
            "skipped_records": dataset.skipped_records,
        }),
    );
    manifest.inputs = vec![input];
    manifest.outputs = vec![args.out.clone()];
    manifest.seed = Some(args.seed);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(&manifest_path_for(&args.out))
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(&resolve_input(p)),
        None => Ok(TrainConfig::default()),
    }
}

fn apply_train_overrides(config: &mut TrainConfig, args: &TrainArgs) {
    if let Some(v) = args.objective {
        config.objective = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = Some(v);
    }
    if let Some(v) = args.dropout {
        config.dropout_p = v;
    }
    if let Some(v) = args.max_len {
        config.max_len = v;
    }
    if let Some(v) = args.output_attention_heads {
        config.output_attention_heads = v;
    }
    if let Some(v) = args.frozen_layers {
        config.frozen_layers = v;
    }
    if let Some(v) = args.tau {
        config.temperature = v;
    }
    if let Some(v) = args.tau_learnable {
        config.temperature_learnable = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.case {
        config.sentence_case = Some(v);
    }
}

/// Deterministic split used when no explicit validation file is given:
/// shuffle by seed, keep `fraction` at the end for validation.
fn split_tail<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = ((items.len() as f64) * fraction).round() as usize;
    let split = items.len().saturating_sub(n_val);
    let pick = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    (pick(&order[..split]), pick(&order[split..]))
}

/// MLM pretraining runs over the part-names strings; two-token assembly
/// names give masking nothing to condition on and measurably degrade the
/// encoder as a zero-shot baseline.
fn mlm_texts(records: &[corpus::AssemblyRecord]) -> Vec<String> {
    records.iter().map(|r| r.parts_text()).collect()
}

fn load_train_data(
    objective: Objective,
    data_path: &Path,
    val_path: &Option<PathBuf>,
    val_fraction: f64,
    seed: u64,
) -> Result<TrainData> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "--val-fraction must be in [0,1), got {val_fraction}"
        )));
    }
    match objective {
        Objective::Pair => {
            let all = load_pairs(data_path)?;
            let (train, val): (Vec<SentencePair>, Vec<SentencePair>) = match val_path {
                Some(p) => (all, load_pairs(&resolve_input(p))?),
                None => split_tail(&all, val_fraction, seed),
            };
            Ok(TrainData::Pair { train, val })
        }
        Objective::Contrastive => {
            let all = load_corpus(data_path)?.records;
            let (train, val) = match val_path {
                Some(p) => (all, load_corpus(&resolve_input(p))?.records),
                None => split_tail(&all, val_fraction, seed),
            };
            Ok(TrainData::Contrastive { train, val })
        }
        Objective::Mlm => {
            let all = load_corpus(data_path)?.records;
            let (train, val) = match val_path {
                Some(p) => (
                    mlm_texts(&all),
                    mlm_texts(&load_corpus(&resolve_input(p))?.records),
                ),
                None => {
                    let (t, v) = split_tail(&all, val_fraction, seed);
                    (mlm_texts(&t), mlm_texts(&v))
                }
            };
            Ok(TrainData::Mlm { train, val })
        }
    }
}

fn cmd_train(args: TrainArgs, started: Instant) -> Result<()> {
    let mut config = load_train_config(&args.config)?;
    apply_train_overrides(&mut config, &args);
    config.validate()?;
    let data_path = resolve_input(&args.data);
    let data = load_train_data(
        config.objective,
        &data_path,
        &args.val,
        args.val_fraction,
        config.seed,
    )?;
    let (bundle, history) = train(&data, &config)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let ckpt_path = args.out.join("checkpoint.json");
    bundle.to_checkpoint().save(&ckpt_path)?;
    let metrics_path = args.out.join("metrics.json");
    write_json(&history, &metrics_path)?;

    let last_val = history.val_accuracy.iter().flatten().last().copied();
    println!(
        "train[{:?}]: {} epochs, final train loss {:.4}, train acc {:.4}, val acc {}",
        config.objective,
        history.epochs_completed(),
        history.train_loss.last().copied().unwrap_or(f64::NAN),
        history.train_accuracy.last().copied().unwrap_or(f64::NAN),
        last_val.map_or("n/a".to_string(), |v| format!("{v:.4}")),
    );

    let mut manifest = RunManifest::new("train", serde_json::to_value(&config)?);
    manifest.inputs = vec![data_path];
    if let Some(v) = &args.val {
        manifest.inputs.push(resolve_input(v));
    }
    manifest.outputs = vec![ckpt_path, metrics_path];
    manifest.seed = Some(config.seed);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(&args.out.join("manifest.json"))
}

fn cmd_sweep(args: SweepArgs, started: Instant) -> Result<()> {
    let mut config = load_train_config(&args.config)?;
    if let Some(v) = args.objective {
        config.objective = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let grid = if args.full_grid {
        SweepGrid::full()
    } else {
        match &args.grid {
            Some(p) => read_json(&resolve_input(p))?,
            None => SweepGrid::default(),
        }
    };
    if args.parallel == 0 {
        return Err(Error::Config("--parallel must be at least 1".into()));
    }
    let data_path = resolve_input(&args.data);
    let data = load_train_data(
        config.objective,
        &data_path,
        &args.val,
        args.val_fraction,
        config.seed,
    )?;
    let rows = run_sweep(&grid, &config, &data, args.parallel);

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let csv_path = args.out.join("sweep.csv");
    write_sweep_csv(&rows, &csv_path)?;
    let n_failed = rows.iter().filter(|r| r.status != "ok").count();
    println!(
        "sweep: {} cells ({} failed), table at {}",
        rows.len(),
        n_failed,
        csv_path.display()
    );
    for row in &rows {
        println!(
            "  {} lr={} dropout={} len={} heads={} train={} val={} [{}]",
            row.variant,
            row.learning_rate,
            row.dropout,
            row.max_len,
            row.heads,
            row.train_acc.map_or("-".into(), |v| format!("{v:.3}")),
            row.val_acc.map_or("-".into(), |v| format!("{v:.3}")),
            row.status
        );
    }

    let mut manifest = RunManifest::new(
        "sweep",
        serde_json::json!({ "base": config, "grid": grid, "parallel": args.parallel }),
    );
    manifest.inputs = vec![data_path];
    manifest.outputs = vec![csv_path];
    manifest.seed = Some(config.seed);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(&args.out.join("manifest.json"))
}

fn cmd_eval_zeroshot(args: EvalArgs, started: Instant) -> Result<()> {
    let ckpt_path = resolve_input(&args.checkpoint);
    let test_path = resolve_input(&args.test);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let bundle = ModelBundle::from_checkpoint(&ckpt)?;
    let records = load_corpus(&test_path)?.records;
    let (report, matrices) = evaluate(&bundle, &records, args.n, args.seed)?;

    ensure_parent_dir(&args.report)?;
    report.save(&args.report)?;
    let mut outputs = vec![args.report.clone()];
    if let Some(dir) = &args.export_sim {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, sim) in matrices.iter().enumerate() {
            let csv = dir.join(format!("batch_{i:03}.csv"));
            let pgm = dir.join(format!("batch_{i:03}.pgm"));
            export_similarity_csv(sim, &csv)?;
            export_similarity_pgm(sim, &pgm)?;
            outputs.push(csv);
            outputs.push(pgm);
        }
    }
    println!(
        "eval-zeroshot[{:?}]: {} batches of {}, top-1 {:.4}, top-5 {:.4}, top-10 {:.4}",
        bundle.objective(),
        report.n_batches,
        args.n,
        report.topk.top1,
        report.topk.top5,
        report.topk.top10
    );

    let mut manifest = RunManifest::new(
        "eval-zeroshot",
        serde_json::json!({ "n": args.n, "checkpoint_kind": bundle.objective() }),
    );
    manifest.inputs = vec![ckpt_path, test_path];
    manifest.outputs = outputs;
    manifest.seed = Some(args.seed);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(&manifest_path_for(&args.report))
}

fn cmd_generate_synth(args: GenerateArgs, started: Instant) -> Result<()> {
    if !(0.0..=1.0).contains(&args.overlap) {
        return Err(Error::Config(format!(
            "--overlap must be in [0,1], got {}",
            args.overlap
        )));
    }
    if args.min_parts == 0 || args.min_parts > args.max_parts {
        return Err(Error::Config(format!(
            "invalid part range {}..={}",
            args.min_parts, args.max_parts
        )));
    }
    let mut spec = SynthSpec::new(args.n, args.overlap, args.seed);
    spec.min_parts = args.min_parts;
    spec.max_parts = args.max_parts;
    spec.with_descriptions = args.with_descriptions;
    let records = generate(&spec);
    ensure_parent_dir(&args.out)?;
    save_corpus(&records, &args.out)?;
    println!(
        "generate-synth: {} assemblies (overlap {}, parts {}..={}) -> {}",
        records.len(),
        args.overlap,
        args.min_parts,
        args.max_parts,
        args.out.display()
    );
    let mut manifest = RunManifest::new(
        "generate-synth",
        serde_json::json!({
            "n": args.n,
            "overlap": args.overlap,
            "min_parts": args.min_parts,
            "max_parts": args.max_parts,
            "with_descriptions": args.with_descriptions,
        }),
    );
    manifest.inputs = vec![];
    manifest.outputs = vec![args.out.clone()];
    manifest.seed = Some(args.seed);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.save(&manifest_path_for(&args.out))
}
