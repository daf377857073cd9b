use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ookd::evalkit::{default_thresholds, plot_histograms, similarity_histogram, video_map};
use ookd::pipeline::{
    dataset_stats, distill, evaluate, generate_splits, load_splits, prepare_run_dir, run_ablation, save_splits,
    train_baseline, train_teacher, RunConfig, Stage,
};
use ookd::tracker::{load_predictions, save_predictions};
use ookd::vis_model::VisModel;
use ookd::{OokdError, Result};

/// Offline-to-online knowledge distillation for video instance segmentation.
#[derive(Parser)]
#[command(name = "ookd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set optimizer.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, validation and long-gap validation splits.
    GenData(Common),
    /// Print per-class frequencies and paste probabilities of the training split.
    Stats(Common),
    /// Train the per-frame model without distillation.
    TrainBaseline(Common),
    /// Train the clip-level aggregator on a frozen frame model.
    TrainTeacher(Common),
    /// Train a student against a frozen teacher.
    Distill(Common),
    /// Track a validation split with a checkpoint and save the predictions.
    Track(Common),
    /// Score a checkpoint or saved predictions on a validation split.
    Eval(Common),
    /// Train and compare the ablation variants.
    Ablate(Common),
    /// Histogram of same-instance embedding similarity for one or more checkpoints.
    PlotSimilarity(Common),
}

fn resolve(common: &Common, stage: Stage) -> Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&common.overrides)?;
    config.stage = stage;
    config.validate()?;
    Ok(config)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| OokdError::io(path, e))
}

fn checkpoint(config: &RunConfig) -> Result<VisModel> {
    let path = config
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| OokdError::validation("eval.checkpoint", "required"))?;
    VisModel::load(path)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let config = resolve(&c, Stage::GenData)?;
            let dir = prepare_run_dir(&config)?;
            let root = config.data.root.clone().unwrap_or_else(|| dir.join("data"));
            let splits = generate_splits(&config.data)?;
            save_splits(&splits, &config.data, &root)?;
            println!(
                "wrote {} train, {} val and {} long-gap val clips to {}",
                splits.train.len(),
                splits.val.len(),
                splits.val_long.len(),
                root.display()
            );
        }
        Command::Stats(c) => {
            let config = resolve(&c, Stage::Stats)?;
            let dir = prepare_run_dir(&config)?;
            let splits = load_splits(&config.data)?;
            let stats = dataset_stats(&config, &splits.train)?;
            let names: Vec<String> = config.data.spec.class_palette.iter().map(|c| c.name.clone()).collect();
            print!("{}", stats.render_table(Some(&names)));
            write_json(&dir.join("stats.json"), &stats)?;
        }
        Command::TrainBaseline(c) => print_json(&train_baseline(&resolve(&c, Stage::TrainBaseline)?)?)?,
        Command::TrainTeacher(c) => print_json(&train_teacher(&resolve(&c, Stage::TrainTeacher)?)?)?,
        Command::Distill(c) => print_json(&distill(&resolve(&c, Stage::Distill)?)?)?,
        Command::Track(c) => {
            let config = resolve(&c, Stage::Track)?;
            let model = checkpoint(&config)?;
            let dir = prepare_run_dir(&config)?;
            let splits = load_splits(&config.data)?;
            let (preds, result) = evaluate(&model, splits.val_split(config.eval.split), &config.tracker)?;
            save_predictions(&preds, &dir.join("predictions"))?;
            write_json(&dir.join("metrics.json"), &result)?;
            println!("tracked {} clips into {}", preds.len(), dir.join("predictions").display());
        }
        Command::Eval(c) => {
            let config = resolve(&c, Stage::Eval)?;
            let dir = prepare_run_dir(&config)?;
            let splits = load_splits(&config.data)?;
            let clips = splits.val_split(config.eval.split);
            let result = match &config.eval.predictions {
                Some(p) => video_map(&load_predictions(p)?, clips, &default_thresholds())?,
                None => evaluate(&checkpoint(&config)?, clips, &config.tracker)?.1,
            };
            write_json(&dir.join("metrics.json"), &result)?;
            print_json(&result)?;
        }
        Command::Ablate(c) => {
            let config = resolve(&c, Stage::Ablate)?;
            let dir = prepare_run_dir(&config)?;
            let splits = load_splits(&config.data)?;
            let report = run_ablation(&config, &splits, &dir)?;
            print!("{}", report.to_markdown());
        }
        Command::PlotSimilarity(c) => {
            let config = resolve(&c, Stage::PlotSimilarity)?;
            if config.eval.checkpoints.is_empty() {
                return Err(OokdError::validation("eval.checkpoints", "list at least one checkpoint"));
            }
            let dir = prepare_run_dir(&config)?;
            let splits = load_splits(&config.data)?;
            let clips = splits.val_split(config.eval.split);
            let mut hists = Vec::new();
            for path in &config.eval.checkpoints {
                let model = VisModel::load(path)?;
                let h = similarity_histogram(&model, clips, &config.histogram, &config.qfa)?;
                println!("{}: mean {:.4} over {} pairs", path.display(), h.mean, h.num_pairs);
                hists.push(h);
            }
            plot_histograms(&hists, &dir.join("similarity.png"))?;
            write_json(&dir.join("similarity.json"), &hists)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                OokdError::Validation { .. } | OokdError::Schema { .. } => ExitCode::from(2),
                OokdError::Divergence(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
