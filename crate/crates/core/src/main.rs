use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vlp_core::downstream::{
    evaluate_caption, evaluate_classifier, evaluate_retrieval, export_embeddings, finetune_caption, finetune_classifier,
    finetune_retrieval, write_embeddings, ClassifyTask, RetrievalMode,
};
use vlp_core::pipeline::{generate_synthetic, run_pretraining, Checkpoint, Dataset, Pretrainer, SyntheticSpec, TrainConfig};
use vlp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vlp", version, about = "Contrastive video-language pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DownstreamTask {
    /// Title-to-video retrieval.
    RetrievalText,
    /// Cover-image-to-video retrieval.
    RetrievalImage,
    /// Plot category classification.
    Plot,
    /// Top and leaf product category classification.
    ProductDual,
    /// Abstract generation from title and frames.
    Caption,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic record file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train on the configured data, writing metrics.tsv and checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a downstream task and report its metrics.
    Finetune {
        #[arg(value_enum)]
        task: DownstreamTask,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Fine-tuned checkpoint path (default: next to `--ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a downstream task.
    Eval {
        #[arg(value_enum)]
        task: DownstreamTask,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation records (default: `finetune.eval_data`, else `data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics TSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// For captioning: write the generated token ids here.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Write the [CLS] embedding of every record as TSV.
    ExportEmb {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl DownstreamTask {
    fn name(self) -> &'static str {
        match self {
            DownstreamTask::RetrievalText => "retrieval-text",
            DownstreamTask::RetrievalImage => "retrieval-image",
            DownstreamTask::Plot => "plot",
            DownstreamTask::ProductDual => "product-dual",
            DownstreamTask::Caption => "caption",
        }
    }
}

fn training_data(config: &TrainConfig) -> Result<Dataset> {
    let path = config
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("`data` must name a record file".into()))?;
    Dataset::load(path)
}

fn eval_data(config: &TrainConfig, explicit: Option<&Path>) -> Result<Dataset> {
    match explicit.or(config.finetune.eval_data.as_deref()) {
        Some(p) => Dataset::load(p),
        None => training_data(config),
    }
}

/// `metric\tvalue` rows under a header.
fn metrics_tsv(task: DownstreamTask, config: &TrainConfig, ckpt: &Checkpoint, data: &Dataset, hyps: Option<&Path>) -> Result<String> {
    let cfg = &ckpt.model;
    let ft = &config.finetune;
    let mut rows: Vec<(String, f64)> = Vec::new();
    match task {
        DownstreamTask::RetrievalText | DownstreamTask::RetrievalImage => {
            let mode = if matches!(task, DownstreamTask::RetrievalText) { RetrievalMode::Text } else { RetrievalMode::Image };
            let r = evaluate_retrieval(cfg, &ckpt.params, data, mode, ft.negatives, config.seed)?;
            rows.push(("candidates".into(), r.candidates as f64));
            rows.extend(r.recall.iter().map(|(k, v)| (format!("recall@{k}"), *v)));
        }
        DownstreamTask::Plot | DownstreamTask::ProductDual => {
            let t = if matches!(task, DownstreamTask::Plot) { ClassifyTask::Plot } else { ClassifyTask::ProductDual };
            let acc = evaluate_classifier(cfg, &ckpt.params, data, t, ft)?;
            rows.extend(acc.into_iter().map(|(head, a)| (format!("accuracy_{}", head.trim_start_matches("ft.")), a)));
        }
        DownstreamTask::Caption => {
            let r = evaluate_caption(cfg, &ckpt.params, data, ft.beam, ft.max_caption_len)?;
            rows.push(("bleu1".into(), r.metrics.bleu1));
            rows.push(("bleu4".into(), r.metrics.bleu4));
            rows.push(("rouge_l".into(), r.metrics.rouge_l));
            if let Some(path) = hyps {
                let mut text = String::from("id\ttokens\n");
                for (id, toks) in &r.hypotheses {
                    let toks: Vec<String> = toks.iter().map(|t| t.to_string()).collect();
                    let _ = writeln!(text, "{id}\t{}", toks.join(" "));
                }
                std::fs::write(path, text).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
            }
        }
    }
    let mut out = String::from("metric\tvalue\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k}\t{v}");
    }
    Ok(out)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let data = generate_synthetic(&SyntheticSpec::load(&spec)?)?;
            data.save(&out)?;
            eprintln!("wrote {} records to {}", data.len(), out.display());
        }
        Command::Pretrain { config, out, resume } => {
            let config = TrainConfig::load(&config)?;
            let summary = match resume {
                Some(ckpt) => {
                    let data = training_data(&config)?;
                    let ckpt = Checkpoint::load_for(&ckpt, &config.model)?;
                    Pretrainer::resume(config, &data, ckpt)?.run(&out)?
                }
                None => run_pretraining(&config, &out)?,
            };
            if let Some(last) = summary.reports.last() {
                eprintln!("step {}: total loss {}", last.step + 1, last.total);
            }
            eprintln!("wrote {} and {}", summary.metrics.display(), summary.checkpoint.display());
        }
        Command::Finetune { task, config, ckpt, out } => {
            let config = TrainConfig::load(&config)?;
            let mut model = Checkpoint::load(&ckpt)?;
            let data = training_data(&config)?;
            let (cfg, ft, seed) = (model.model.clone(), &config.finetune, config.seed);
            let losses = match task {
                DownstreamTask::RetrievalText => finetune_retrieval(&cfg, &mut model.params, &data, RetrievalMode::Text, ft, seed)?,
                DownstreamTask::RetrievalImage => finetune_retrieval(&cfg, &mut model.params, &data, RetrievalMode::Image, ft, seed)?,
                DownstreamTask::Plot => finetune_classifier(&cfg, &mut model.params, &data, ClassifyTask::Plot, ft, seed)?,
                DownstreamTask::ProductDual => finetune_classifier(&cfg, &mut model.params, &data, ClassifyTask::ProductDual, ft, seed)?,
                DownstreamTask::Caption => finetune_caption(&cfg, &mut model.params, &data, ft, seed)?,
            };
            // Pre-training state (optimizer, key network, queues) is carried
            // over untouched.
            for (_, t) in model.params.iter_mut() {
                t.clear_grad();
            }
            let out = out.unwrap_or_else(|| ckpt.with_extension(format!("{}.ckpt", task.name())));
            model.save(&out)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                eprintln!("{}: loss {first} -> {last} over {} steps", task.name(), losses.len());
            }
            eprintln!("wrote {}", out.display());
            let eval = eval_data(&config, None)?;
            print!("{}", metrics_tsv(task, &config, &model, &eval, None)?);
        }
        Command::Eval {
            task,
            config,
            ckpt,
            data,
            out,
            hyps,
        } => {
            let config = TrainConfig::load(&config)?;
            let model = Checkpoint::load(&ckpt)?;
            let eval = eval_data(&config, data.as_deref())?;
            let text = metrics_tsv(task, &config, &model, &eval, hyps.as_deref())?;
            write_or_print(out.as_deref(), &text)?;
        }
        Command::ExportEmb { ckpt, data, out } => {
            let model = Checkpoint::load(&ckpt)?;
            let data = Dataset::load(&data)?;
            let rows = export_embeddings(&model.model, &model.params, &data)?;
            write_embeddings(&out, &rows)?;
            eprintln!("wrote {} embeddings to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
