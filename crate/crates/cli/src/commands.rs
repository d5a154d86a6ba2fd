use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use memefusion_core::config::RunConfig;
use memefusion_core::convert::{convert_clip_hf, convert_phi};
use memefusion_core::data::{
    generate_synthetic_confounders, load_image_file, partition_synthetic, write_hmc_dataset, ImageRef, MemeRecord,
};
use memefusion_core::eval::{emit_report, evaluate, run_ablation, run_baselines, ReportFormat, ResultTable, Scorer, TrainedScorer};
use memefusion_core::training::pipeline::{load_named_split, test_split_name};
use memefusion_core::training::{
    extract_features, load_splits, run_training, Checkpoint, FrozenStack, JsonlRunLog, NullLog, PreparedData,
    StageSelect,
};
use memefusion_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "memefusion", version, about = "Hateful-meme classification on frozen vision-language features")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Config file, seed and `key=value` overrides shared by the run commands.
#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// JSON run config; built-in mock defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key overrides applied after the config is loaded, e.g. `train.stage2.lr=3e-5`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightKind {
    /// Hugging Face CLIPModel safetensors.
    ClipHf,
    /// Inversion network safetensors.
    Phi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic XOR meme dataset in the line-delimited JSON layout.
    Synth {
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        dev_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Trains stage 1, stage 2 or both and writes checkpoints under --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Scores a labeled split with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "json")]
        format: String,
        /// Report file; a `.roc.csv` curve is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides applied to the checkpoint's data config, e.g. `data.root=/data/hmc`.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Scores one image-text pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        text: String,
    },
    /// Trains and scores the four ablation rows.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains and scores the unimodal and simple-fusion baselines.
    Baselines {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Converts a safetensors checkpoint into a weight archive.
    ConvertWeights {
        #[arg(long, value_enum)]
        kind: WeightKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// BPE merges file to bundle (clip-hf only).
        #[arg(long)]
        merges: Option<PathBuf>,
    },
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            n,
            seed,
            out,
            dev_fraction,
            test_fraction,
        } => synth(n, seed, &out, dev_fraction, test_fraction),
        Command::Train { run, stage, out, init } => train(&run, &stage, &out, init.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            format,
            out,
            overrides,
        } => eval(&checkpoint, split.as_deref(), &format, out.as_deref(), &overrides),
        Command::Predict { checkpoint, image, text } => predict(&checkpoint, &image, &text),
        Command::Ablate { run, out } => table_command(&run, &out, Table::Ablation),
        Command::Baselines { run, out } => table_command(&run, &out, Table::Baselines),
        Command::ConvertWeights {
            kind,
            input,
            out,
            merges,
        } => convert(kind, &input, &out, merges.as_deref()),
    }
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    cfg.validate()?;
    Ok(cfg.effective())
}

/// Prints the effective config and writes it to `<out>/config.json`.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.canonical_json())?;
    println!("config={}", cfg.canonical_json());
    println!("config_hash={}", cfg.hash());
    println!("seed={}", cfg.resolved_seed());
    Ok(())
}

fn synth(n: usize, seed: u64, out: &Path, dev_fraction: f64, test_fraction: f64) -> Result<()> {
    let all = generate_synthetic_confounders(n, seed)?;
    let (train, dev, test) = partition_synthetic(&all, dev_fraction, test_fraction)?;
    write_hmc_dataset(out, &[&train, &dev, &test])?;
    println!("seed={seed}");
    println!("n={n}");
    for split in [&train, &dev, &test] {
        println!("{}={}", split.name, split.len());
    }
    println!("out={}", out.display());
    Ok(())
}

fn train(args: &RunArgs, stage: &str, out: &Path, init: Option<&Path>) -> Result<()> {
    let select: StageSelect = stage.parse()?;
    let cfg = resolve_config(args)?;
    if select == StageSelect::Two && init.is_none() && cfg.ablation.use_two_stage {
        return Err(Error::Argument("--stage 2 needs --init <stage-1 checkpoint>".into()));
    }
    echo_config(&cfg, out)?;
    let init = init.map(Checkpoint::load).transpose()?;
    let stack = FrozenStack::from_config(&cfg)?;
    let splits = load_splits(&cfg)?;
    let data = PreparedData::extract(&stack, &splits)?;
    let mut log = JsonlRunLog::create(&out.join("train_log.jsonl"))?;
    let run = run_training(&cfg, &stack, &data, select, init, Some(out), &mut log)?;
    for (name, ck) in [("stage1", &run.stage1), ("final", &run.final_model)] {
        if let Some(ck) = ck {
            if let Some(best) = ck.manifest.metric_history.iter().rev().find(|r| r.stage == ck.manifest.stage) {
                println!(
                    "{name}_last_epoch_loss={} {name}_selection_auroc={}",
                    best.train_loss,
                    best.selection_auroc.map(|a| a.to_string()).unwrap_or_else(|| "undefined".into())
                );
            }
        }
    }
    if run.stage1.is_some() && select != StageSelect::Two {
        println!("checkpoint={}", out.join("stage1").display());
    }
    if run.final_model.is_some() {
        println!("checkpoint={}", out.join("final").display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, split: Option<&str>, format: &str, out: Option<&Path>, overrides: &[String]) -> Result<()> {
    let format: ReportFormat = format.parse()?;
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.manifest.run_config()?.with_overrides(overrides)?;
    let split_name = match split {
        Some(s) => s.parse()?,
        None => test_split_name(cfg.data.source),
    };
    let scorer = TrainedScorer::from_checkpoint(&ck)?;
    let data = load_named_split(&cfg, split_name)?;
    let report = evaluate(&scorer, &data)?;
    if let Some(path) = out {
        emit_report(&report, format, path)?;
        fs::write(path.with_extension("roc.csv"), report.roc_csv())?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, text: &str) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    // decode up front so a bad image fails before the encoder is loaded
    load_image_file(image)?;
    let scorer = TrainedScorer::from_checkpoint(&ck)?;
    let record = MemeRecord {
        id: "input".into(),
        image_ref: ImageRef::File(image.to_path_buf()),
        text: text.to_string(),
        label: None,
    };
    let score = scorer.score(&[record])?[0];
    let verdict = if score >= 0.5 { "hateful" } else { "not-hateful" };
    println!("score={score} verdict={verdict}");
    println!("config_hash={}", scorer.config_hash());
    Ok(())
}

enum Table {
    Ablation,
    Baselines,
}

fn table_command(args: &RunArgs, out: &Path, which: Table) -> Result<()> {
    let cfg = resolve_config(args)?;
    echo_config(&cfg, out)?;
    let stack = FrozenStack::from_config(&cfg)?;
    let splits = load_splits(&cfg)?;
    let data = PreparedData::extract(&stack, &splits)?;
    let test_name = test_split_name(cfg.data.source);
    let test_split = match splits.test {
        Some(t) => t,
        None => load_named_split(&cfg, test_name)?,
    };
    let test = extract_features(&stack, &test_split, true)?;
    let table: ResultTable = match which {
        Table::Ablation => run_ablation(&cfg, &stack, &data, &test, test_name.as_str(), Some(out), &mut NullLog)?,
        Table::Baselines => run_baselines(&cfg, &stack, &data, &test, test_name.as_str(), &mut NullLog)?,
    };
    table.write(out)?;
    for (k, row) in table.rows.iter().enumerate() {
        println!(
            "row={} name={:?} n={} accuracy={} auroc={} config_hash={}",
            k + 1,
            row.name,
            row.n,
            row.accuracy,
            row.auroc.map(|a| a.to_string()).unwrap_or_else(|| "undefined".into()),
            row.config_hash
        );
    }
    println!("table={}", out.join("table.csv").display());
    Ok(())
}

fn convert(kind: WeightKind, input: &Path, out: &Path, merges: Option<&Path>) -> Result<()> {
    let manifest = match kind {
        WeightKind::ClipHf => convert_clip_hf(input, out, merges)?,
        WeightKind::Phi => {
            if merges.is_some() {
                return Err(Error::Argument("--merges only applies to --kind clip-hf".into()));
            }
            convert_phi(input, out)?
        }
    };
    println!("tensors={}", manifest.tensors.len());
    println!("blob_sha256={}", manifest.blob_sha256);
    println!("out={}", out.display());
    Ok(())
}
