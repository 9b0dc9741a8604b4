//! `cardiocap`: the captioning pipeline as a sequence of stages sharing one
//! config file.

mod config;
mod run;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use cardiocap::corpus::Split;
use cardiocap::pretrain::Task;
use clap::{Args, Parser, Subcommand};

use crate::config::{Init, Loaded};
use crate::run::{Lock, StageLog};
pub use crate::run::CliError;

#[derive(Debug, Parser)]
#[command(name = "cardiocap", version, about = "Multilingual report generation for 12-lead cardiac signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Relative paths inside it are resolved
    /// against its directory.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct Selection {
    /// `multi` or `mono:<lang>`; defaults to every mode in `finetune.modes`.
    #[arg(long)]
    mode: Option<String>,
    /// Decoder initialisation; defaults to `finetune.init`.
    #[arg(long, value_enum)]
    init: Option<Init>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus and its translation dictionary.
    Synth(Common),
    /// Validate a converted external dataset and copy it into the data directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        reports: PathBuf,
    },
    /// Patient-level train/val/test split and signal standardisation.
    Split(Common),
    /// One vocabulary per language from the training reports.
    BuildVocab(Common),
    /// Translate the source reports into every configured language.
    TranslateCorpus(Common),
    /// Supervised pre-training of the signal encoder.
    PretrainEncoder(Common),
    /// Decoder pre-training with a corruption objective.
    PretrainDecoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Task,
    },
    /// Caption fine-tuning with the encoder frozen.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
    },
    /// Greedy captions for one split.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Per-language BLEU-1, METEOR and ROUGE-L of generated reports.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        split: Option<Split>,
        /// Score this JSON-lines file instead of a generated run.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Summary tables over every generated run.
    Report(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Synth(c) => ("synth", c),
            Command::Ingest { common, .. } => ("ingest", common),
            Command::Split(c) => ("split", c),
            Command::BuildVocab(c) => ("build-vocab", c),
            Command::TranslateCorpus(c) => ("translate-corpus", c),
            Command::PretrainEncoder(c) => ("pretrain-encoder", c),
            Command::PretrainDecoder { common, .. } => ("pretrain-decoder", common),
            Command::Finetune { common, .. } => ("finetune", common),
            Command::Generate { common, .. } => ("generate", common),
            Command::Score { common, .. } => ("score", common),
            Command::Report(c) => ("report", c),
        }
    }
}

fn execute(command: &Command) -> Result<(), CliError> {
    let (name, common) = command.parts();
    let l = Loaded::read(&common.config)?;
    let _lock = Lock::acquire(&l.lock_file())?;
    let mut log = StageLog::start(name, l.cfg.seed);
    match command {
        Command::Synth(_) => stages::synth(&l, &mut log)?,
        Command::Ingest { signals, reports, .. } => stages::ingest(&l, &mut log, signals, reports)?,
        Command::Split(_) => stages::split(&l, &mut log)?,
        Command::BuildVocab(_) => stages::build_vocab(&l, &mut log)?,
        Command::TranslateCorpus(_) => stages::translate(&l, &mut log)?,
        Command::PretrainEncoder(_) => stages::pretrain_encoder_stage(&l, &mut log)?,
        Command::PretrainDecoder { task, .. } => {
            log.stage = format!("pretrain-decoder --task {task}");
            stages::pretrain_decoder_stage(&l, &mut log, *task)?
        }
        Command::Finetune { sel, .. } => stages::finetune(&l, &mut log, sel.mode.as_deref(), sel.init)?,
        Command::Generate { sel, split, .. } => stages::generate(&l, &mut log, sel.mode.as_deref(), sel.init, *split)?,
        Command::Score { sel, split, input, .. } => stages::score(&l, &mut log, sel.mode.as_deref(), sel.init, *split, input.as_deref())?,
        Command::Report(_) => stages::report(&l, &mut log)?,
    }
    log.finish(&l.output_dir().join("run-log.jsonl"), &l.cfg.hash(), &l.root)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
