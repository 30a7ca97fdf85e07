use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use taskadapt::adapter::affinity_columns;
use taskadapt::affinity::{AffinityMatrix, SignConvention};
use taskadapt::checkpoint::Checkpoint;
use taskadapt::data::{write_dataset, Domain, Split};
use taskadapt::error::Error;
use taskadapt::metrics::CSV_HEADER;
use taskadapt::model::ParameterCounts;
use taskadapt::train::{config_hash, evaluate, sha256_hex, PreparedSplit, Rung, TrainConfig, Trainer};
use taskadapt::verify::{gradcheck, GradModule, DEFAULT_SEED, DEFAULT_STEP};
use taskadapt::viz::{write_affinity_heatmap, write_heatmap};
use tracing::info;

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "taskadapt", version, about = "Multi-task vision adapters on a frozen backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters and decoders, then evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of one domain.
    Eval(EvalArgs),
    /// Dump the task affinity matrix as CSV and PNG.
    Affinity(AffinityArgs),
    /// Dump adapter attention maps of one sample as PNG heatmaps.
    Attention(AttentionArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write a ShapeWorld dataset to disk.
    GenerateData(GenerateArgs),
}

#[derive(Parser)]
struct TrainArgs {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "TASKADAPT_OUT", default_value = "runs/train")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Component ladder rung to train instead of the configured flags.
    #[arg(long, value_parser = parse_rung)]
    ablate: Option<Rung>,
    #[arg(long, value_enum)]
    troa_sign: Option<SignArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Paper,
    Positive,
}

#[derive(Parser)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value = "A", value_parser = parse_domain)]
    domain: Domain,
    /// Samples to evaluate; defaults to the split size in the checkpoint config.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, env = "TASKADAPT_OUT", default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Parser)]
struct AffinityArgs {
    /// Without a checkpoint the affinity of a freshly initialized model is dumped.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "TASKADAPT_OUT", default_value = "runs/affinity")]
    out: PathBuf,
}

#[derive(Parser)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapter block index, in placement order.
    #[arg(long, default_value_t = 0)]
    block: usize,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value = "A", value_parser = parse_domain)]
    domain: Domain,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, env = "TASKADAPT_OUT", default_value = "runs/attention")]
    out: PathBuf,
}

#[derive(Parser)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_module)]
    module: GradModule,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Perturbs the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Parser)]
struct GenerateArgs {
    #[arg(long, env = "TASKADAPT_OUT", default_value = "runs/data")]
    out: PathBuf,
    #[arg(long, default_value = "A", value_parser = parse_domain)]
    domain: Domain,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    size: Option<usize>,
}

fn parse_rung(s: &str) -> std::result::Result<Rung, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_domain(s: &str) -> std::result::Result<Domain, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_module(s: &str) -> std::result::Result<GradModule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Reads a TOML config and returns it with the hash of the file bytes.
fn load_config(path: Option<&Path>) -> Result<(TrainConfig, Option<String>)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), None));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((config, Some(sha256_hex(text.as_bytes()))))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).map_err(|e| Error::Config(format!("cannot load checkpoint {}: {e}", path.display())).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_affinity(out: &Path, affinity: &AffinityMatrix) -> Result<()> {
    fs::write(out.join("affinity.csv"), affinity.to_csv())?;
    write_affinity_heatmap(&out.join("affinity.png"), &affinity.to_array())?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    config_hash: &'a str,
    config_file_hash: Option<&'a str>,
    parameters: ParameterCounts,
    trainable_ratio: f64,
    epochs: usize,
    steps: u64,
    first_epoch_loss: f64,
    final_epoch_loss: f64,
    seconds: f64,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut config, file_hash) = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config = config.with_epochs(epochs);
    }
    if let Some(rung) = args.ablate {
        rung.apply(&mut config.model.adapter);
    }
    if let Some(sign) = args.troa_sign {
        config.troa.sign = match sign {
            SignArg::Paper => SignConvention::PaperNegative,
            SignArg::Positive => SignConvention::Positive,
        };
    }
    config.validate()?;
    let out = &args.out;
    fs::create_dir_all(out)?;
    for stale in ["val_metrics.csv", "test_metrics.csv"] {
        let _ = fs::remove_file(out.join(stale));
    }
    let hash = config_hash(&config);
    fs::write(out.join("config.toml"), toml::to_string_pretty(&config)?)?;
    fs::write(out.join("config.json"), serde_json::to_string(&config)? + "\n")?;
    info!(config_hash = %hash, out = %out.display(), "training");

    let started = Instant::now();
    let mut trainer = Trainer::new(config)?;
    let data = trainer.prepare_data()?;
    trainer.fit(&data, Some(out))?;
    Checkpoint::from_trainer(&mut trainer, file_hash.clone()).write(&out.join("checkpoint.bin"))?;
    write_affinity(out, &trainer.affinity())?;

    let cfg = &trainer.config.data;
    let test = PreparedSplit::new(&trainer.model, Split::Test, cfg.domain, cfg.test_count)?;
    let report = evaluate(&trainer.model, &trainer.affinity(), &test, "final")?;
    report.write_json(&out.join("test_metrics.json"))?;
    report.append_csv(&out.join("test_metrics.csv"))?;

    let parameters = trainer.count_parameters();
    let losses: Vec<f64> = trainer.epochs.iter().map(|e| e.mean_loss).collect();
    let summary = RunSummary {
        config_hash: &hash,
        config_file_hash: file_hash.as_deref(),
        trainable_ratio: parameters.trainable_ratio(),
        parameters,
        epochs: trainer.epoch,
        steps: trainer.step,
        first_epoch_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_epoch_loss: losses.last().copied().unwrap_or(f64::NAN),
        seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("run.json"), &summary)?;
    info!(
        miou_pct = report.miou_pct,
        depth_rmse = report.depth_rmse,
        normal_merr_deg = report.normal_merr_deg,
        edge_f1_pct = report.edge_f1_pct,
        seconds = summary.seconds,
        "finished"
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let count = args.count.unwrap_or_else(|| ck.header.config.data.count(args.split));
    let model = ck.model()?;
    let affinity = ck.affinity()?;
    let split = PreparedSplit::new(&model, args.split, args.domain, count)?;
    let report = evaluate(&model, &affinity, &split, "eval")?;
    fs::create_dir_all(&args.out)?;
    let stem = format!("eval_{}_{}", args.split.name(), args.domain.tag());
    report.write_json(&args.out.join(format!("{stem}.json")))?;
    fs::write(args.out.join(format!("{stem}.csv")), format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
    info!(split = args.split.name(), domain = args.domain.tag(), samples = count, miou_pct = report.miou_pct, "evaluated");
    Ok(())
}

fn cmd_affinity(args: AffinityArgs) -> Result<()> {
    let affinity = match &args.checkpoint {
        Some(path) => read_checkpoint(path)?.affinity()?,
        None => {
            let (config, _) = load_config(args.config.as_deref())?;
            config.validate()?;
            AffinityMatrix::uniform(config.model.tasks.len())
        }
    };
    fs::create_dir_all(&args.out)?;
    write_affinity(&args.out, &affinity)?;
    info!(tasks = affinity.num_tasks(), version = affinity.step_count, "affinity written");
    Ok(())
}

fn cmd_attention(args: AttentionArgs) -> Result<()> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let model = ck.model()?;
    let affinity = ck.affinity()?;
    let Some(block) = model.adapters.blocks.get(args.block) else {
        return Err(Error::Config(format!("block {} out of range (model has {})", args.block, model.adapters.blocks.len())).into());
    };
    let heads = block.attn.heads;
    let split = PreparedSplit::new(&model, args.split, args.domain, args.index + 1)?;
    let (_, cache) = model.forward(&split.features[args.index], &affinity_columns::<f32>(&affinity))?;
    fs::create_dir_all(&args.out)?;
    let kind = if block.attn.modulator.is_some() { "taa" } else { "sa" };
    for (t, spec) in model.tasks.iter().enumerate() {
        let maps = cache.attention_maps(args.block, t, heads).expect("forward ran every block");
        for (h, map) in maps.iter().enumerate() {
            let m = map.mapv(f64::from);
            let top = m.iter().copied().fold(0.0, f64::max);
            let name = format!("{kind}_block{}_{}_head{h}.png", args.block, spec.kind.name());
            write_heatmap(&args.out.join(name), m.view(), 0.0, top)?;
        }
    }
    info!(block = args.block, heads, kind, "attention maps written");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let report = gradcheck(args.module, args.seed, args.step, args.corrupt)?;
    println!("{}", serde_json::to_string(&report)?);
    let ok = report.max_rel_error < GRADCHECK_TOL;
    info!(module = %args.module, max_rel_error = report.max_rel_error, ok, "gradcheck");
    Ok(ok)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let size = args.size.unwrap_or(TrainConfig::default().model.backbone.image_size);
    let manifest = write_dataset(&args.out, args.domain, args.count, args.seed, size)?;
    info!(count = manifest.count, domain = args.domain.tag(), out = %args.out.display(), "dataset written");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFiniteLoss { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Affinity(a) => cmd_affinity(a),
        Command::Attention(a) => cmd_attention(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::GenerateData(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(Error::NonFiniteLoss { step, task_losses, batch_seeds }) = err.downcast_ref::<Error>() {
                tracing::error!(step, ?task_losses, ?batch_seeds, "non-finite loss");
            }
            tracing::error!("{err:#}");
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
