use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use idp_cli::{Pipeline, RunConfig, Stage};

/// ID-centric pre-training for recommendation: pre-train ID embeddings
/// on merged multi-domain logs, tune the cross-domain ID matcher, and
/// synthesize, deploy, and evaluate embeddings for new domains.
#[derive(Parser)]
#[command(name = "idp", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key: section.key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,

    /// Override run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cross-domain corpus.
    Synth,
    /// Pre-train the sequential model on the merged pre-training data.
    Pretrain,
    /// Mine per-item behavior positives from the pre-trained embeddings.
    #[command(name = "mine_positives")]
    MinePositives,
    /// Tune the cross-domain ID matcher adapter.
    #[command(name = "tune_cdim")]
    TuneCdim,
    /// Build the approximate (HNSW) index over adapted source vectors.
    #[command(name = "build_index")]
    BuildIndex,
    /// Generate downstream ID embeddings by top-m retrieval + aggregation.
    #[command(name = "gen_embeddings")]
    GenEmbeddings,
    /// Deploy downstream: zero-shot, finetune-all, or retrain-encoder.
    Deploy,
    /// Rank downstream test targets and emit the metrics report.
    Eval,
    /// Run the full stage DAG: pretrain .. eval.
    Pipeline,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config PATH is required"))?;
    let cfg = RunConfig::load(&config_path, &cli.sets, cli.seed)?;
    let pipeline = Pipeline::new(cfg);
    match cli.command {
        Command::Synth => {
            pipeline.run_stage(Stage::Synth)?;
        }
        Command::Pretrain => {
            pipeline.run_stage(Stage::Pretrain)?;
        }
        Command::MinePositives => {
            pipeline.run_stage(Stage::MinePositives)?;
        }
        Command::TuneCdim => {
            pipeline.run_stage(Stage::TuneCdim)?;
        }
        Command::BuildIndex => {
            pipeline.run_stage(Stage::BuildIndex)?;
        }
        Command::GenEmbeddings => {
            pipeline.run_stage(Stage::GenEmbeddings)?;
        }
        Command::Deploy => {
            pipeline.run_stage(Stage::Deploy)?;
        }
        Command::Eval => {
            let record = pipeline.run_stage(Stage::Eval)?;
            let text = std::fs::read_to_string(pipeline.eval_report())?;
            print!("{text}");
            let _ = record;
        }
        Command::Pipeline => {
            for record in pipeline.run_all()? {
                log::info!(
                    "stage {} finished in {:.2}s",
                    record.stage,
                    record.wall_clock_secs
                );
            }
            let text = std::fs::read_to_string(pipeline.eval_report())?;
            print!("{text}");
        }
    }
    Ok(())
}
