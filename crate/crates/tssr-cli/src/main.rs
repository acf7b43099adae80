//! Command-line entry point: synth | train | evaluate | gradcheck |
//! export-embeddings. Every command writes a run manifest with input hashes
//! so identical inputs and seeds give byte-identical outputs.

mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;
use tssr_core::data::{
    eval_examples, filter_min_count, leave_one_out_split, load_content_table, load_interactions,
    ContentTable, DatasetSplit, Vocab,
};
use tssr_core::evaluation::evaluate;
use tssr_core::gradcheck::{check_model_gradients, ModelCheckConfig};
use tssr_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelMode};
use tssr_core::synthgen::{
    generate, oracle_ndcg_bound, write_files, SynthConfig, CLUSTERS_FILE, CONTENT_FILE,
    INTERACTIONS_FILE,
};
use tssr_core::tensor::{matmul, Real};
use tssr_core::training::{history_to_jsonl, subsample_seed, train, Precision, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tssr",
    about = "Two-stream sequential recommender: data synthesis, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction/content dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history, and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the all-ranking protocol.
    Evaluate(EvalArgs),
    /// Finite-difference check of the full multi-task loss gradients.
    Gradcheck(GradcheckArgs),
    /// Export per-item embeddings of both modalities as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON generator config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction log (CSV/TSV with user_id,item_id,timestamp rows).
    #[arg(long)]
    interactions: PathBuf,
    /// Content vectors (TSV or CVEC); required by content-using modes.
    #[arg(long)]
    content: Option<PathBuf>,
    /// The interaction file starts with a header row.
    #[arg(long)]
    has_header: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config mode: tssr|id|content|hybrid.
    #[arg(long)]
    mode: Option<String>,
    /// Override the fraction of train sequences used.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Interaction log; must reproduce the training vocabulary.
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    has_header: bool,
    /// Which split part to evaluate: test|validation.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also report alignment/uniformity diagnostics.
    #[arg(long)]
    diagnostics: bool,
    /// Drop the user's historical items from the candidate set.
    #[arg(long)]
    exclude_history: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// JSON check config; defaults are the reference tiny setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportEmbeddings(args) => cmd_export(args),
    }
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg: SynthConfig = load_json_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = generate(&cfg)?;
    write_files(&data, &args.out)?;

    let mut manifest = RunManifest::new("synth", cfg.seed, args.config.as_deref());
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    for f in [INTERACTIONS_FILE, CONTENT_FILE, CLUSTERS_FILE] {
        manifest.add_output(&args.out.join(f));
    }
    manifest
        .details
        .insert("config".into(), serde_json::to_value(&cfg)?);
    manifest.details.insert(
        "oracle_ndcg10_bound".into(),
        serde_json::json!(oracle_ndcg_bound(&cfg, 10)),
    );
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.write(&args.out)?;

    println!(
        "synth: {} users, {} items, {} clusters -> {}",
        cfg.n_users,
        cfg.n_items,
        cfg.n_clusters,
        args.out.display()
    );
    println!(
        "oracle NDCG@10 bound for this generator: {:.4}",
        oracle_ndcg_bound(&cfg, 10)
    );
    Ok(())
}

struct LoadedData {
    split: DatasetSplit,
    vocab: Vocab,
    content: Option<ContentTable>,
}

fn load_dataset(
    interactions: &Path,
    content: Option<&Path>,
    has_header: bool,
    min_user: usize,
    min_item: usize,
) -> Result<LoadedData> {
    let (seqs, vocab) = load_interactions(interactions, None, has_header)?;
    let (seqs, vocab) = filter_min_count(&seqs, &vocab, min_user, min_item)?;
    let split = leave_one_out_split(&seqs);
    if split.too_short > 0 {
        eprintln!(
            "note: {} sequences shorter than 3 interactions are train-only",
            split.too_short
        );
    }
    let content = match content {
        Some(p) => Some(load_content_table(p, &vocab)?),
        None => None,
    };
    Ok(LoadedData {
        split,
        vocab,
        content,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg: TrainConfig = load_json_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = ModelMode::parse(mode)?;
    }
    if let Some(f) = args.train_fraction {
        cfg.train_fraction = f;
    }
    cfg.validate()?;
    if cfg.mode.uses_content() && args.content.is_none() {
        bail!(
            "mode '{}' models content sequences; pass --content",
            cfg.mode.as_str()
        );
    }

    let data = load_dataset(
        &args.interactions,
        args.content.as_deref(),
        args.has_header,
        cfg.min_user_count,
        cfg.min_item_count,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let (ckpt_path, history_path, diverged, best_epoch, epochs) = match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &data, &args)?,
        Precision::F64 => run_train::<f64>(&cfg, &data, &args)?,
    };

    let mut manifest = RunManifest::new("train", cfg.seed, args.config.as_deref());
    if let Some(p) = &args.config {
        manifest.add_input(p)?;
    }
    manifest.add_input(&args.interactions)?;
    if let Some(p) = &args.content {
        manifest.add_input(p)?;
    }
    manifest.add_output(&ckpt_path);
    manifest.add_output(&history_path);
    manifest
        .details
        .insert("config".into(), serde_json::to_value(&cfg)?);
    manifest.details.insert(
        "train_fraction".into(),
        serde_json::json!(cfg.train_fraction),
    );
    manifest.details.insert(
        "subsample_seed".into(),
        serde_json::json!(subsample_seed(cfg.seed)),
    );
    manifest
        .details
        .insert("best_epoch".into(), serde_json::json!(best_epoch));
    manifest
        .details
        .insert("epochs_run".into(), serde_json::json!(epochs));
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.write(&args.out)?;

    if diverged {
        bail!(
            "training diverged (non-finite loss); last good checkpoint written to {}",
            ckpt_path.display()
        );
    }
    println!(
        "train: best epoch {best_epoch}, checkpoint {}",
        ckpt_path.display()
    );
    Ok(())
}

fn run_train<T: Real>(
    cfg: &TrainConfig,
    data: &LoadedData,
    args: &TrainArgs,
) -> Result<(PathBuf, PathBuf, bool, usize, usize)> {
    let outcome = train::<T>(cfg, &data.split, data.content.as_ref(), &data.vocab)?;
    let meta = CheckpointMeta {
        mode: outcome.params.mode,
        dims: outcome.params.dims.clone(),
        vocab_fingerprint: data.vocab.fingerprint(),
        vocab_ids: data.vocab.ids.clone(),
        train: serde_json::to_value(cfg)?,
    };
    let ckpt_path = args.out.join("checkpoint.tssr");
    save_checkpoint(&ckpt_path, &outcome.params, &meta)?;
    let history_path = args.out.join("history.jsonl");
    std::fs::write(&history_path, history_to_jsonl(&outcome.history))?;
    Ok((
        ckpt_path,
        history_path,
        outcome.diverged,
        outcome.best_epoch,
        outcome.history.len(),
    ))
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let (params, meta) = load_checkpoint::<f64>(&args.checkpoint)?;
    let train_cfg: TrainConfig =
        serde_json::from_value(meta.train.clone()).context("checkpoint config echo")?;

    let data = load_dataset(
        &args.interactions,
        None,
        args.has_header,
        train_cfg.min_user_count,
        train_cfg.min_item_count,
    )?;
    if data.vocab.fingerprint() != meta.vocab_fingerprint {
        return Err(anyhow!(
            "vocabulary mismatch: data yields {} items (fingerprint {:x}), checkpoint was trained on {} items (fingerprint {:x})",
            data.vocab.len(),
            data.vocab.fingerprint(),
            meta.dims.vocab,
            meta.vocab_fingerprint
        ));
    }

    let part = match args.split.as_str() {
        "test" => &data.split.test,
        "validation" => &data.split.validation,
        other => bail!("unknown split '{other}' (expected test|validation)"),
    };
    let examples = eval_examples(part);
    let config_echo = serde_json::json!({
        "mode": params.mode.as_str(),
        "dims": meta.dims,
        "train": meta.train,
        "split": args.split,
        "exclude_history": args.exclude_history,
    });
    let report = evaluate(
        &params,
        &examples,
        args.diagnostics,
        args.exclude_history,
        train_cfg.batch_size,
        config_echo,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;

    let mut manifest = RunManifest::new("evaluate", train_cfg.seed, None);
    manifest.add_input(&args.checkpoint)?;
    manifest.add_input(&args.interactions)?;
    manifest.add_output(&report_path);
    manifest.wall_ms = t0.elapsed().as_millis() as u64;
    manifest.write(&args.out)?;

    println!(
        "evaluate[{}]: recall@10 {:.4}, ndcg@10 {:.4}, n_users {}",
        args.split, report.recall["10"], report.ndcg["10"], report.n_users
    );
    if let (Some(a), Some(u)) = (report.alignment, report.uniformity) {
        println!("diagnostics: alignment {a:.4}, uniformity {u:.4}");
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let t0 = Instant::now();
    let cfg: ModelCheckConfig = load_json_config(args.config.as_deref())?;
    // Test hook: corrupt one tensor's analytic gradient to drive the
    // failure path end to end.
    let break_tensor = std::env::var("TSSR_GRADCHECK_BREAK").ok();
    let report = check_model_gradients(&cfg, break_tensor.as_deref())?;

    for t in &report.per_tensor {
        println!(
            "{:<22} coords {:>4}  max rel err {:.3e}",
            t.name, t.checked_coords, t.max_rel_err
        );
    }
    let pass = report.passes(cfg.tolerance);
    println!(
        "gradcheck: max rel err {:.3e} (tolerance {:.1e}) -> {} [{} ms]",
        report.max_rel_err,
        cfg.tolerance,
        if pass { "PASS" } else { "FAIL" },
        t0.elapsed().as_millis()
    );

    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let json = serde_json::json!({
            "max_rel_err": report.max_rel_err,
            "tolerance": cfg.tolerance,
            "pass": pass,
            "per_tensor": report.per_tensor.iter().map(|t| {
                serde_json::json!({
                    "name": t.name,
                    "checked_coords": t.checked_coords,
                    "max_rel_err": t.max_rel_err,
                })
            }).collect::<Vec<_>>(),
        });
        let report_path = out.join("gradcheck.json");
        std::fs::write(&report_path, serde_json::to_vec_pretty(&json)?)?;
        let mut manifest = RunManifest::new("gradcheck", cfg.seed, args.config.as_deref());
        if let Some(p) = &args.config {
            manifest.add_input(p)?;
        }
        manifest.add_output(&report_path);
        manifest.wall_ms = t0.elapsed().as_millis() as u64;
        manifest.write(out)?;
    }
    if !pass {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let (params, meta) = load_checkpoint::<f64>(&args.checkpoint)?;
    let d = params.dims.d;
    let vocab = params.dims.vocab;
    if meta.vocab_ids.len() != vocab {
        bail!(
            "checkpoint lists {} item ids for {} items",
            meta.vocab_ids.len(),
            vocab
        );
    }
    let mut out = String::new();
    let fmt_row = |out: &mut String, id: &str, tag: &str, row: &[f64]| {
        out.push_str(id);
        out.push('\t');
        out.push_str(tag);
        for v in row {
            out.push('\t');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    };
    for (i, id) in meta.vocab_ids.iter().enumerate() {
        fmt_row(&mut out, id, "id", params.m_id.row(i));
    }
    if let (Some(rows), Some(w)) = (&params.content_rows, &params.w_proj) {
        let dim_raw = params.dims.dim_raw;
        for (i, id) in meta.vocab_ids.iter().enumerate() {
            let projected = matmul(rows.row(i), w.data(), 1, dim_raw, d);
            fmt_row(&mut out, id, "con", &projected);
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, out)?;
    println!("export-embeddings: wrote {}", args.out.display());
    Ok(())
}
