//! `ctm` — train, evaluate, ablate, sweep, gradient-check, and generate
//! synthetic corpora for the context-guided triple matching model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ctm_core::checkpoint::{load_checkpoint, load_embeddings, save_checkpoint};
use ctm_core::data::{load_dataset, split_dataset, synth_dataset, to_race_json, windowize,
    DataFormat, McqaExample, SynthSpec};
use ctm_core::metrics::comparison_csv;
use ctm_core::model::{CtmConfig, CtmModel, EncoderChoice};
use ctm_core::train::{
    ablate, build_vocab, check_config_compatible, evaluate, gradcheck_objective, sweep_lambda,
    train, AblationSet,
};

#[derive(Parser)]
#[command(name = "ctm", about = "Context-guided triple matching for multiple-choice QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file or directory.
    #[arg(long)]
    data: PathBuf,
    /// Dataset format.
    #[arg(long, default_value = "synth")]
    format: String,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint (metrics CSV lands next to it).
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional held-out set evaluated after training.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Precomputed-embedding file (freezes the encoder).
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints metrics and optionally writes CSV.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Split name recorded in the metrics.
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional config to cross-check against the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train/evaluate branch subsets and baselines under one seed.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated arms: subsets of `aqp` or dcmn|co|cnn.
        #[arg(long, default_value = "a,q,p,aqp,dcmn")]
        sets: String,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Held-out set; defaults to an 80/20 split of --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Sweep the contrastive weight.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated lambda values.
        #[arg(long, default_value = "0,0.5,1,1.5")]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Finite-difference check of the full objective; nonzero exit on fail.
    Gradcheck {
        /// Instance seed.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Generate a synthetic keyword corpus (RACE-shaped JSON).
    Synth {
        #[arg(long, default_value_t = 1000)]
        questions: usize,
        #[arg(long, default_value_t = 4)]
        options: usize,
        /// Distinct word types in the generated vocabulary.
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<CtmConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            CtmConfig::from_json(&text)?
        }
        None => CtmConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_data(args: &DataArgs) -> anyhow::Result<Vec<McqaExample>> {
    let format: DataFormat = args.format.parse()?;
    let examples = load_dataset(&args.data, format)?;
    if examples.is_empty() {
        bail!("no examples found under {}", args.data.display());
    }
    Ok(examples)
}

fn load_eval_split(
    train_set: &mut Vec<McqaExample>,
    eval_data: &Option<PathBuf>,
    format: &str,
    seed: u64,
) -> anyhow::Result<Vec<McqaExample>> {
    match eval_data {
        Some(path) => {
            let format: DataFormat = format.parse()?;
            Ok(load_dataset(path, format)?)
        }
        None => {
            let all = std::mem::take(train_set);
            let (tr, ev) = split_dataset(&all, 0.8, seed);
            *train_set = tr;
            Ok(ev)
        }
    }
}

fn write_or_print(rows: &[(String, f64)], out: &Option<PathBuf>) -> anyhow::Result<()> {
    let csv = comparison_csv(rows);
    match out {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            data,
            config,
            out,
            eval_data,
            embeddings,
        } => {
            let config = load_config(&config)?;
            let train_set = load_data(&data)?;
            let vocab = build_vocab(&train_set, config.vocab_cap);
            let mut model = CtmModel::<f32>::new(config.clone(), vocab)?;
            if let Some(path) = embeddings {
                let store = load_embeddings(&path)?;
                if store.hidden_dim() != config.hidden_dim {
                    bail!(
                        "embedding file hidden_dim {} does not match config hidden_dim {}",
                        store.hidden_dim(),
                        config.hidden_dim
                    );
                }
                model.encoder = EncoderChoice::Precomputed(store);
            }
            let windows = windowize(&train_set, config.max_len, config.stride)?;
            println!(
                "training on {} questions ({} windows), {} epochs",
                train_set.len(),
                windows.len(),
                config.epochs
            );
            let outcome = train(&mut model, &windows)?;
            for row in &outcome.metrics.rows {
                println!(
                    "epoch {} {}: loss_tm {:.4} loss_cr {:.4} accuracy {:.4} ({:.1}s)",
                    row.epoch, row.split, row.loss_tm, row.loss_cr, row.accuracy, row.seconds
                );
            }
            let mut metrics = outcome.metrics;
            if let Some(path) = eval_data {
                let format: DataFormat = data.format.parse()?;
                let eval_set = load_dataset(&path, format)?;
                let eval_windows = windowize(&eval_set, config.max_len, config.stride)?;
                let eval_metrics = evaluate(&model, &eval_windows, "eval")?;
                println!(
                    "eval: loss_tm {:.4} accuracy {:.4}",
                    eval_metrics.rows[0].loss_tm, eval_metrics.rows[0].accuracy
                );
                metrics.extend(eval_metrics);
            }
            save_checkpoint(&out, &model)?;
            let metrics_path = metrics_path_for(&out);
            metrics.write_csv(&metrics_path)?;
            println!("wrote {} and {}", out.display(), metrics_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            split,
            config,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            if let Some(path) = config {
                let text = fs::read_to_string(&path)?;
                let requested = CtmConfig::from_json(&text)?;
                check_config_compatible(&model.config, &requested)?;
            }
            let examples = load_data(&data)?;
            let windows = windowize(&examples, model.config.max_len, model.config.stride)?;
            let metrics = evaluate(&model, &windows, &split)?;
            println!(
                "{}: {} questions, loss_tm {:.4}, accuracy {:.4}",
                split,
                examples.len(),
                metrics.rows[0].loss_tm,
                metrics.rows[0].accuracy
            );
            if let Some(path) = out {
                metrics.write_csv(&path)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            data,
            config,
            sets,
            out,
            eval_data,
        } => {
            let base = load_config(&config)?;
            let mut train_set = load_data(&data)?;
            let eval_set = load_eval_split(&mut train_set, &eval_data, &data.format, base.seed)?;
            let sets: Vec<AblationSet> = sets
                .split(',')
                .map(|s| AblationSet::parse(s.trim()))
                .collect::<ctm_core::Result<_>>()?;
            let rows = ablate(&base, &train_set, &eval_set, &sets)?;
            write_or_print(&rows, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            data,
            config,
            values,
            out,
            eval_data,
        } => {
            let base = load_config(&config)?;
            let mut train_set = load_data(&data)?;
            let eval_set = load_eval_split(&mut train_set, &eval_data, &data.format, base.seed)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .context("parsing --values")?;
            let rows = sweep_lambda(&base, &train_set, &eval_set, &values)?;
            write_or_print(&rows, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            let report = gradcheck_objective(seed)?;
            for (name, err) in &report.per_param {
                println!("{name}: worst relative error {err:.3e}");
            }
            if report.passes(1e-5) {
                println!("PASS: worst relative error {:.3e} <= 1e-5", report.worst);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL: worst relative error {:.3e} > 1e-5", report.worst);
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Synth {
            questions,
            options,
            vocab,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                questions,
                options,
                vocab_words: vocab,
                seed,
            };
            let examples = synth_dataset(&spec)?;
            let json = to_race_json(&examples);
            fs::write(&out, serde_json::to_string_pretty(&json)?)?;
            println!("wrote {} questions to {}", examples.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn metrics_path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.csv");
    checkpoint.with_file_name(name)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
