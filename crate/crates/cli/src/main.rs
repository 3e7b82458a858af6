//! `rdt`: command-line pipeline from poster manifests to genre predictions and reports.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use error::{format_error, CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "rdt", version, about = "Movie genre classification from posters")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable; wins over the file).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Top3,
    Refined,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest and write seeded train / val / test manifests.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Genre co-occurrence statistics and, optionally, conditional-probability tables.
    Cooccur {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to the poster paths listed in this file.
        #[arg(long)]
        subset_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        tables_dir: Option<PathBuf>,
    },
    /// Train one classifier and write its checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// R, RT or RDT (shorthand for `--set arch=...`).
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a manifest with one checkpoint, or fuse three.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        /// One checkpoint, or three (R, RT, RDT order) fused with `--weights`.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "top3")]
        mode: Mode,
        /// Conditional tables directory (refined mode).
        #[arg(long, value_name = "DIR")]
        tables: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Per-sample ground truth and scores as CSV.
        #[arg(long, value_name = "FILE")]
        emit_heatmap: Option<PathBuf>,
    },
    /// Grid-search ensemble weights on validation score CSVs.
    EnsembleSearch {
        /// Three score CSVs in R, RT, RDT order.
        #[arg(long, num_args = 3, required = true)]
        scores: Vec<PathBuf>,
        /// Ground truth for the scored posters.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Three score CSVs to fuse with the found weights.
        #[arg(long, num_args = 3, requires = "fused_out")]
        apply: Vec<PathBuf>,
        #[arg(long, requires = "apply")]
        fused_out: Option<PathBuf>,
    },
    /// Refine a score CSV into one to three genres per poster.
    Refine {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_name = "DIR")]
        tables: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth, to report the hit ratio.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Macro metrics of a predictions file against a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the aligned text report here.
        #[arg(long)]
        text: Option<PathBuf>,
        /// Add reports for posters with 1, 2 and 3 ground-truth genres.
        #[arg(long)]
        partition_by_label_count: bool,
        /// Evaluate only the poster paths listed in this file.
        #[arg(long)]
        subset_file: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    for kv in &common.set {
        cfg.set(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set(&format!("seed={s}"))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Ingest { manifest, out_dir } => commands::ingest(&cfg, &manifest, &out_dir),
        Command::Cooccur { manifest, subset_file, out, tables_dir } => {
            commands::cooccur(&cfg, &manifest, subset_file.as_deref(), &out, tables_dir.as_deref())
        }
        Command::Train { train, val, arch, out, history } => {
            if let Some(a) = arch {
                cfg.set(&format!("arch={a}"))?;
            }
            commands::train(&cfg, &train, &val, &out, history.as_deref())
        }
        Command::Predict { manifest, checkpoint, weights, mode, tables, out, scores_out, emit_heatmap } => {
            commands::predict(
                &cfg,
                commands::PredictArgs {
                    manifest: &manifest,
                    checkpoints: &checkpoint,
                    weights: weights.as_deref(),
                    mode,
                    tables: tables.as_deref(),
                    out: &out,
                    scores_out: scores_out.as_deref(),
                    heatmap: emit_heatmap.as_deref(),
                },
            )
        }
        Command::EnsembleSearch { scores, manifest, out, apply, fused_out } => {
            commands::ensemble_search(&cfg, &scores, &manifest, &out, &apply, fused_out.as_deref())
        }
        Command::Refine { scores, tables, out, manifest } => {
            commands::refine(&cfg, &scores, &tables, &out, manifest.as_deref())
        }
        Command::Evaluate { manifest, predictions, out, text, partition_by_label_count, subset_file } => {
            commands::evaluate(
                &cfg,
                &manifest,
                &predictions,
                &out,
                text.as_deref(),
                partition_by_label_count,
                subset_file.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let body: Vec<&str> = text.lines().take_while(|l| !l.starts_with("Usage:")).collect();
            eprintln!("{}", format_error("usage", body.join(" ").trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
