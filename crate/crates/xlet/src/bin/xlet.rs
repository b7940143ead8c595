use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xlet::config::RunConfig;
use xlet::pipeline::{
    cmd_baseline, cmd_build_dataset, cmd_build_ontology, cmd_evaluate, cmd_gradcheck, cmd_holdout,
    cmd_predict, cmd_train, BaselineKind, PipelineError, StageOutcome, GRADCHECK_TOLERANCE,
};

#[derive(Parser)]
#[command(name = "xlet", version, about = "cross-lingual entity typing pipeline")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every stage seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the ranked type ontology from knowledge-base categories.
    BuildOntology,
    /// Extract, label and balance the train and test datasets.
    BuildDataset,
    /// Hold out unseen test entities and filter them from training.
    Holdout,
    /// Learn the subword vocabulary and train the typing model.
    Train {
        /// Dataset to train on (defaults to OUT/train.tsv).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a dataset with a trained model checkpoint.
    Predict {
        /// Model checkpoint (defaults to OUT/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to score (defaults to OUT/test.tsv).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "predictions.tsv")]
        out_name: String,
    },
    /// Run a comparison method over an evaluation dataset.
    Baseline {
        /// Which method: string-match or similarity.
        #[arg(long, value_parser = ["string-match", "similarity"])]
        method: String,
        /// Dataset supplying the alias table or index (defaults to OUT/train.tsv).
        #[arg(long)]
        train_dataset: Option<PathBuf>,
        /// Dataset to score (defaults to OUT/test.tsv).
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
        /// Output file name inside the output directory.
        #[arg(long)]
        out_name: Option<String>,
    },
    /// Aggregate prediction files into text and JSON reports.
    Evaluate {
        /// Predictions on the seen-entity test set (defaults to OUT/predictions.tsv).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Predictions on the unseen-entity split.
        #[arg(long)]
        unseen_predictions: Option<PathBuf>,
        /// Human adjudications of predicted-but-not-gold types.
        #[arg(long)]
        adjudications: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.sample_seed = seed;
        cfg.holdout_seed = seed;
        cfg.model_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }

    let report = |outcome: StageOutcome| {
        println!("stage {} done", outcome.stage);
        for note in &outcome.notes {
            println!("  {note}");
        }
        for path in &outcome.outputs {
            println!("  wrote {}", path.display());
        }
    };

    match cli.command {
        Command::BuildOntology => report(cmd_build_ontology(&cfg)?),
        Command::BuildDataset => report(cmd_build_dataset(&cfg)?),
        Command::Holdout => report(cmd_holdout(&cfg)?),
        Command::Train { dataset } => report(cmd_train(&cfg, dataset.as_deref())?),
        Command::Predict {
            checkpoint,
            dataset,
            out_name,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join("model.ckpt"));
            let data = dataset.unwrap_or_else(|| cfg.out.join("test.tsv"));
            report(cmd_predict(&cfg, &ckpt, &data, &out_name)?);
        }
        Command::Baseline {
            method,
            train_dataset,
            eval_dataset,
            out_name,
        } => {
            let kind = if method == "string-match" {
                BaselineKind::StringMatch
            } else {
                BaselineKind::Similarity
            };
            let train = train_dataset.unwrap_or_else(|| cfg.out.join("train.tsv"));
            let eval = eval_dataset.unwrap_or_else(|| cfg.out.join("test.tsv"));
            let name = out_name.unwrap_or_else(|| match kind {
                BaselineKind::StringMatch => "baseline_string_match.tsv".to_string(),
                BaselineKind::Similarity => "baseline_similarity.tsv".to_string(),
            });
            report(cmd_baseline(&cfg, kind, &train, &eval, &name)?);
        }
        Command::Evaluate {
            predictions,
            unseen_predictions,
            adjudications,
        } => {
            let seen = predictions.unwrap_or_else(|| cfg.out.join("predictions.tsv"));
            report(cmd_evaluate(
                &cfg,
                &seen,
                unseen_predictions.as_deref(),
                adjudications.as_deref(),
            )?);
        }
        Command::Gradcheck => {
            let outcome = cmd_gradcheck(&cfg)?;
            println!(
                "gradcheck: max relative error {:.3e} over {} coordinates (tolerance {GRADCHECK_TOLERANCE:.0e})",
                outcome.max_rel_error, outcome.coords_checked
            );
            if !outcome.pass {
                println!("gradcheck: FAIL");
                std::process::exit(3);
            }
            println!("gradcheck: PASS");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
