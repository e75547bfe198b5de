use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use segrobust::model::ContextMode;

#[derive(Debug, Parser)]
#[command(
    name = "segrobust",
    version,
    about = "Segmentation-robust speech translation on a synthetic toy corpus",
    after_help = "Exit status: 0 success, 1 runtime failure, 2 usage error."
)]
pub struct Cli {
    /// Seed for every random choice; defaults to 1.
    #[arg(long, global = true, env = "SRST_SEED")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a toy corpus: WAVs, sentence manifests and a tokenizer.
    Toygen {
        /// ToySpec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// BPE merge budget for the target tokenizer.
        #[arg(long, default_value_t = 1000)]
        merges: i64,
    },
    /// Cache log-Mel features for a WAV file or every WAV in a directory.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voice-activity segmentation into a segment manifest.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        frame_ms: u32,
        #[arg(long, default_value_t = 3)]
        aggressiveness: u8,
        #[arg(long, default_value_t = 300)]
        hangover_ms: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random re-segmentation of a sentence manifest.
    Resegment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint, its normalization statistics and a JSONL log.
    Train {
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with the manifest, audio and tokenizer files.
        #[arg(long)]
        data: PathBuf,
        /// Manifest inside the data directory.
        #[arg(long, default_value = "train.jsonl")]
        manifest: String,
        /// Checkpoint whose matching parameters initialise the model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode a manifest (or a segment manifest over its audio) and score it.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest supplying audio, document order and references.
        #[arg(long)]
        manifest: PathBuf,
        /// Segment manifest to decode instead of the manifest's own spans.
        #[arg(long)]
        segments: Option<PathBuf>,
        /// Directory with the tokenizer files; defaults to the manifest's directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        /// Context fed to the model; defaults to the model's own kind.
        #[arg(long, value_enum)]
        context: Option<ContextArg>,
        /// Use reference translations as text context (diagnostics only).
        #[arg(long)]
        oracle_context: bool,
        /// Report JSON; hypotheses go to `<report stem>.hyps.jsonl`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every cell of a plan; resumable.
    Experiment {
        #[arg(long, default_value = "paper-grid")]
        plan: String,
        /// Preset size: toy (2,000 documents) or smoke (seconds).
        #[arg(long, default_value = "toy")]
        scale: String,
        /// ExperimentConfig JSON, used instead of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `results/<plan>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the results table of an experiment directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Plan name; defaults to the one recorded in the directory.
        #[arg(long)]
        plan: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ContextArg {
    None,
    Text,
    Audio,
}

impl From<ContextArg> for ContextMode {
    fn from(c: ContextArg) -> Self {
        match c {
            ContextArg::None => ContextMode::None,
            ContextArg::Text => ContextMode::Text,
            ContextArg::Audio => ContextMode::Audio,
        }
    }
}
