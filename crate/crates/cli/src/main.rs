mod config;
mod error;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use marginmt::analysis::{
    bleu, evaluate_bleu, filter_corpus, margin_records, run_sweep, sample_pairs, stats_from_records,
    translate, write_histogram, write_sweep, SweepEval,
};
use marginmt::corpus::{generate_splits, Corpus, CorpusSplits};
use marginmt::margin::{write_records, MarginVariant};
use marginmt::model::Checkpoint;
use marginmt::trainer::{self, Objective, RunOptions, TrainOutcome};
use serde_json::json;

use config::LabConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "marginmt", version, about = "Train and analyse margin-regularised toy translation models")]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long = "margin-fn", global = true, value_enum)]
    margin_fn: Option<MarginFnArg>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long = "lambda-margin", global = true)]
    lambda_margin: Option<f64>,
    #[arg(long = "lambda-lm", global = true)]
    lambda_lm: Option<f64>,
    #[arg(long = "threshold-k", global = true)]
    threshold_k: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ObjectiveArg {
    Ce,
    Mto,
    Mso,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MarginFnArg {
    Linear,
    Cube,
    Quintic,
    Log,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Directory written by generate-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/valid/test splits.
    GenerateData,
    /// Jointly pretrain the translation model and the language model.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
        /// Continue an interrupted pretraining run from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Finetune the translation model against the frozen language model.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Margin statistics, histogram and per-sentence records.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Flag pairs whose negative margin ratio reaches the threshold.
    Filter {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// BLEU of hypothesis/reference files, or of a model's translations.
    Evaluate {
        #[arg(long, requires = "reference", conflicts_with_all = ["data", "checkpoint"])]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Finetune one model per cell of the configured grid.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}

fn load_config(cli: &Cli) -> Result<LabConfig, CliError> {
    let mut c = match &cli.config {
        Some(p) => LabConfig::load(p)?,
        None => LabConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.train.seed = c.seed;
    let o = &mut c.train.objective;
    if let Some(x) = cli.objective {
        o.objective = match x {
            ObjectiveArg::Ce => Objective::Ce,
            ObjectiveArg::Mto => Objective::Mto,
            ObjectiveArg::Mso => Objective::Mso,
        };
    }
    if let Some(v) = cli.margin_fn {
        o.margin_function.variant = match v {
            MarginFnArg::Linear => MarginVariant::Linear,
            MarginFnArg::Cube => MarginVariant::Cube,
            MarginFnArg::Quintic => MarginVariant::Quintic,
            MarginFnArg::Log => MarginVariant::Log,
        };
    }
    if let Some(a) = cli.alpha {
        o.margin_function.alpha = a;
    }
    if let Some(l) = cli.lambda_margin {
        o.lambda_margin = l;
    }
    if let Some(l) = cli.lambda_lm {
        o.lambda_lm = l;
    }
    if let Some(k) = cli.threshold_k {
        o.threshold_k = k;
    }
    c.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(c)
}

fn out_dir(cli: &Cli) -> Result<&Path, CliError> {
    let dir = cli.out.as_deref().ok_or_else(|| CliError::Usage("this command needs --out DIR".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir)
}

fn load_data(dir: &Path) -> Result<CorpusSplits, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{}: data directory not found", dir.display())));
    }
    CorpusSplits::load(dir).map_err(|e| CliError::Io(format!("{}: {}", dir.display(), e)))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: checkpoint not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn split(data: &CorpusSplits, s: SplitArg) -> &Corpus {
    match s {
        SplitArg::Train => &data.train,
        SplitArg::Valid => &data.valid,
        SplitArg::Test => &data.test,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Run(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn report_training(out: &TrainOutcome, dir: &Path) {
    for w in &out.warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
    let last = out.metrics.last();
    println!(
        "{}",
        json!({
            "stage": out.checkpoint.stage,
            "step": out.checkpoint.step,
            "checkpoint": dir.join(trainer::checkpoint_file(out.checkpoint.stage.parse().unwrap_or(trainer::Stage::Pretrain))),
            "nmt_ce": last.map(|r| r.nmt_ce),
            "lm_ce": last.map(|r| r.lm_ce),
        })
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenerateData => {
            let dir = out_dir(&cli)?;
            let splits = generate_splits(&cfg.data.spec(cfg.seed), cfg.data.n_valid, cfg.data.n_test)?;
            splits.save(dir)?;
            write_json(&dir.join("corpus.json"), &cfg.data.spec(cfg.seed))?;
            println!(
                "{}",
                json!({
                    "train": splits.train.pairs.len(),
                    "valid": splits.valid.pairs.len(),
                    "test": splits.test.pairs.len(),
                    "hallucinated": splits.train.hallucinated_count(),
                })
            );
        }
        Command::Pretrain { data, resume } => {
            let dir = out_dir(&cli)?;
            let splits = load_data(&data.data)?;
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let opts = RunOptions { out_dir: Some(dir.to_path_buf()), ..Default::default() };
            let out = trainer::pretrain(&cfg.train, &splits, resume.as_ref(), opts)?;
            report_training(&out, dir);
        }
        Command::Finetune { model } => {
            let dir = out_dir(&cli)?;
            let splits = load_data(&model.data.data)?;
            let ck = load_checkpoint(&model.checkpoint)?;
            let opts = RunOptions { out_dir: Some(dir.to_path_buf()), ..Default::default() };
            let out = trainer::finetune(&cfg.train, &splits, &ck, opts)?;
            report_training(&out, dir);
        }
        Command::Analyze { model, split: which } => {
            let splits = load_data(&model.data.data)?;
            let bundle = load_checkpoint(&model.checkpoint)?.bundle()?;
            let corpus = split(&splits, *which);
            let sample = sample_pairs(&corpus.pairs, cfg.analysis.sample_size, cfg.seed);
            let records = margin_records(&bundle, &sample)?;
            let stats = stats_from_records(&records)?;
            if let Some(dir) = &cli.out {
                let dir = out_dir(&cli).map(|_| dir.as_path())?;
                write_json(&dir.join("stats.json"), &stats)?;
                let hist = dir.join("histogram.csv");
                write_histogram(File::create(&hist).map_err(|e| CliError::io(&hist, e))?, &stats.histogram)?;
                let rec = dir.join("margins.jsonl");
                write_records(BufWriter::new(File::create(&rec).map_err(|e| CliError::io(&rec, e))?), &records)?;
            }
            println!(
                "{}",
                json!({
                    "sentences": stats.sentences,
                    "tokens": stats.tokens,
                    "percent_negative": stats.percent_negative,
                    "average_delta": stats.average_delta,
                })
            );
        }
        Command::Filter { model } => {
            let dir = out_dir(&cli)?;
            let splits = load_data(&model.data.data)?;
            let bundle = load_checkpoint(&model.checkpoint)?.bundle()?;
            let (report, kept) = filter_corpus(&bundle, &splits.train, cfg.train.objective.threshold_k)?;
            write_json(&dir.join("filter_report.json"), &report)?;
            let filtered = CorpusSplits { train: kept, valid: splits.valid.clone(), test: splits.test.clone() };
            filtered.save(&dir.join("filtered"))?;
            println!(
                "{}",
                json!({
                    "kept": report.kept.len(),
                    "flagged": report.flagged.len(),
                    "precision": report.precision,
                    "recall": report.recall,
                    "filtered_data": dir.join("filtered"),
                })
            );
        }
        Command::Evaluate { hyp, reference, data, checkpoint, split: which } => {
            let score = match (hyp, reference, data, checkpoint) {
                (Some(h), Some(r), _, _) => {
                    let hyps = read_token_lines(h)?;
                    let refs = read_token_lines(r)?;
                    bleu(&hyps, &refs, 4, true)?
                }
                (_, _, Some(d), Some(c)) => {
                    let splits = load_data(d)?;
                    let bundle = load_checkpoint(c)?.bundle()?;
                    let corpus = split(&splits, *which);
                    if let Some(dir) = &cli.out {
                        let dir = out_dir(&cli).map(|_| dir.as_path())?;
                        let hyps = translate(&bundle, &corpus.pairs, cfg.analysis.decode)?;
                        let path = dir.join("translations.txt");
                        let mut w = BufWriter::new(File::create(&path).map_err(|e| CliError::io(&path, e))?);
                        for (p, h) in corpus.pairs.iter().zip(&hyps) {
                            writeln!(w, "{}\t{}", p.id, corpus.tgt_vocab.decode_all(h).join(" "))?;
                        }
                        w.flush()?;
                        let refs: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| p.tgt.clone()).collect();
                        bleu(&hyps, &refs, 4, true)?
                    } else {
                        evaluate_bleu(&bundle, &corpus.pairs, cfg.analysis.decode)?
                    }
                }
                _ => return Err(CliError::Usage("evaluate needs --hyp and --ref, or --data and --checkpoint".into())),
            };
            if let Some(dir) = &cli.out {
                let dir = out_dir(&cli).map(|_| dir.as_path())?;
                write_json(&dir.join("bleu.json"), &json!({ "bleu": score }))?;
            }
            println!("{:.2}", score);
        }
        Command::Sweep { model } => {
            let dir = out_dir(&cli)?;
            let splits = load_data(&model.data.data)?;
            let ck = load_checkpoint(&model.checkpoint)?;
            let stats_pairs = sample_pairs(&splits.train.pairs, cfg.analysis.sample_size, cfg.seed);
            let eval = SweepEval { bleu_pairs: &splits.test.pairs, stats_pairs: &stats_pairs, decode: cfg.analysis.decode };
            let rows = run_sweep(&cfg.train, &splits, &ck, &cfg.sweep, &eval)?;
            let path = dir.join("sweep.csv");
            write_sweep(File::create(&path).map_err(|e| CliError::io(&path, e))?, &rows)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{}", json!({ "cells": rows.len(), "failed": failed, "results": path }));
        }
    }
    Ok(())
}

/// One whitespace-tokenised sentence per line.
fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{}: file not found", path.display())));
    }
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(l.map_err(|e| CliError::io(path, e))?.split_whitespace().map(str::to_string).collect()))
        .collect()
}
