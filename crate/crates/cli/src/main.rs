//! `medrek`: generate data, pre-train the toy LM, train the editor, build
//! knowledge bases, evaluate and diagnose.

mod commands;
mod config;
mod exit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medrek_core::evaluation::RetrievalMode;

use crate::config::SplitSel;

#[derive(Debug, Parser)]
#[command(name = "medrek", version, about = "Retrieval-gated prompt editing pipeline")]
pub struct Cli {
    /// TOML (or JSON) run configuration.
    #[arg(long, global = true, env = "MEDREK_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "MEDREK_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "MEDREK_OUT")]
    pub out: Option<PathBuf>,
    /// Reference manifest; the run fails if any input or output hash differs.
    #[arg(long, global = true, env = "MEDREK_VERIFY")]
    pub verify: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and its pre-training corpus.
    GenData(GenDataArgs),
    /// Remove records whose efficacy question is also a locality question.
    CleanData(DataArgs),
    /// Per-subject record counts.
    Stats(DataArgs),
    /// Pre-train the toy language model.
    PretrainLm(PretrainArgs),
    /// Train the editor against a frozen LM.
    Train(TrainArgs),
    /// Encode a split's edits into a knowledge-base snapshot.
    Edit(EditArgs),
    /// Run the editing protocol and write metric reports.
    Eval(EvalArgs),
    /// Overlap statistics and retrieval-outcome tables.
    Diagnose(DiagnoseArgs),
    /// Print a knowledge-base snapshot as JSON lines.
    KbInspect(KbInspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, env = "MEDREK_N_RECORDS")]
    pub n_records: Option<usize>,
    #[arg(long, env = "MEDREK_N_VALID")]
    pub n_valid: Option<usize>,
    #[arg(long, env = "MEDREK_N_TEST")]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset in JSON lines.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Question/answer corpus, tab separated.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, env = "MEDREK_LM_MAX_EPOCHS")]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pre-trained LM checkpoint.
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long, env = "MEDREK_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "MEDREK_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "MEDREK_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Share the query and key MLPs (`false` trains the ablation).
    #[arg(long, env = "MEDREK_SHARED_QK")]
    pub shared_qk: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub editor: PathBuf,
    #[arg(long, value_enum, env = "MEDREK_SPLIT")]
    pub split: Option<SplitSel>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub editor: PathBuf,
    #[arg(long, value_enum, env = "MEDREK_SPLIT")]
    pub split: Option<SplitSel>,
    /// Batch sizes, repeated or comma separated.
    #[arg(long = "batch-size", value_delimiter = ',', env = "MEDREK_BATCH_SIZES")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, value_parser = parse_mode, env = "MEDREK_MODE")]
    pub mode: Option<RetrievalMode>,
    #[arg(long)]
    pub skip_fluency: bool,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub editor: PathBuf,
    #[arg(long, value_enum, env = "MEDREK_SPLIT")]
    pub split: Option<SplitSel>,
    #[arg(long, env = "MEDREK_THRESHOLD")]
    pub threshold: Option<f64>,
    #[arg(long = "batch-sizes", value_delimiter = ',', env = "MEDREK_BATCH_SIZES")]
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct KbInspectArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Include key vectors and prompt matrices.
    #[arg(long)]
    pub vectors: bool,
}

fn parse_mode(s: &str) -> Result<RetrievalMode, String> {
    match s {
        "gated" => Ok(RetrievalMode::Gated),
        "never" => Ok(RetrievalMode::Never),
        "oracle" => Ok(RetrievalMode::Oracle),
        other => Err(format!("unknown mode {other:?} (gated, never, oracle)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::Failure::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
