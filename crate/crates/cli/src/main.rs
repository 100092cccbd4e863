mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msq_core::Preset;

/// Multi-source sequence-to-sequence speech synthesis and conversion on a
/// toy spectrogram corpus.
#[derive(Parser, Debug)]
#[command(name = "msq", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// `key = value` config file layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact of the command.
    #[arg(long, global = true, default_value = "msq_out")]
    pub out: PathBuf,
    /// Config override, repeatable; wins over the file and preset.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Tts,
    Vc,
    Joint,
    Adapt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Tts,
    Vc,
    Hybrid,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a toy parallel corpus with its manifest.
    Gendata {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Train one stage and write its checkpoint and loss CSV.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Corpus directory written by `gendata`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init_tts: Option<PathBuf>,
        #[arg(long)]
        init_vc: Option<PathBuf>,
        /// Also start the joint decoder from the stand-alone decoders where
        /// shapes allow.
        #[arg(long)]
        transfer_decoder: bool,
        /// Checkpoint to fine-tune (adapt stage).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Use only the first N utterances.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate from one input with a chosen mask.
    Run {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Symbol ids, comma or space separated.
        #[arg(long)]
        tokens: Option<String>,
        /// Source spectrogram as a MEL1 file.
        #[arg(long)]
        source_mel: Option<PathBuf>,
        /// Take inputs from this corpus utterance instead (needs --data).
        #[arg(long)]
        utt: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Disable pre-net dropout during generation.
        #[arg(long)]
        no_dropout: bool,
        #[arg(long)]
        dump_align: bool,
    },
    /// Finite-difference check of every hand-written backward pass.
    Gradcheck,
    /// Score checkpoints in every mode and write the comparison report.
    Eval {
        /// Joint checkpoint, evaluated as tts, vc and hybrid.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        standalone_tts: Option<PathBuf>,
        #[arg(long)]
        standalone_vc: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msq: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
