//! Command-line pipeline: align question pairs, train a generator, decode
//! unanswerable questions, score them and export augmentation data.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use unansq::model::{Mode, ModelDims};

pub use commands::miniature_vocab;
pub use commands::{
    cmd_align, cmd_augment, cmd_evaluate, cmd_generate, cmd_gradcheck, cmd_train, AlignStats, AugmentStats,
    GenerateStats, GradcheckResult, TrainStats, DEV_PAIRS_FILE, HOLDOUT_PAIRS_FILE, STATS_FILE, TRAIN_PAIRS_FILE,
    VOCAB_FILE,
};
pub use config::{expand_config, parse_config};
pub use output::Staged;

pub const DEFAULT_SEED: u64 = 13;

#[derive(Debug, Parser)]
#[command(name = "unansq", version, about = "Unanswerable question generation pipeline")]
pub struct Cli {
    /// File of `key=value` lines supplying flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pair answerable and unanswerable questions and build the vocabulary.
    Align(AlignArgs),
    /// Train a generator on aligned pairs.
    Train(TrainArgs),
    /// Decode unanswerable questions with beam search.
    Generate(GenerateArgs),
    /// Score generations against the reference unanswerable questions.
    Evaluate(EvaluateArgs),
    /// Turn generations into SQuAD 2.0 unanswerable records.
    Augment(AugmentArgs),
    /// Compare autodiff gradients with finite differences on a miniature model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AlignArgs {
    /// SQuAD 2.0 training file; the holdout is split from its pairs.
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// SQuAD 2.0 development file.
    #[arg(long, value_name = "FILE")]
    pub dev: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub holdout_fraction: f64,
    /// Minimum token frequency for the vocabulary.
    #[arg(long, default_value_t = 9)]
    pub min_freq: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub train_pairs: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub holdout_pairs: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Checkpoint path; `<out>.config` and `<out>.log` are written beside it.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = Mode::Pair2Seq)]
    pub mode: Mode,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Embedding and hidden sizes as `EMBED/HIDDEN` (testing only).
    #[arg(long, value_name = "E/H")]
    pub dims_override: Option<ModelDims>,
    /// Word vectors as `token v1 .. vN` lines.
    #[arg(long, value_name = "FILE")]
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["pairs", "squad"])))]
pub struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Pair file; output ids are line indices.
    #[arg(long, value_name = "FILE")]
    pub pairs: Option<PathBuf>,
    /// SQuAD 2.0 file; every answerable question is a source, output ids are
    /// question ids.
    #[arg(long, value_name = "FILE")]
    pub squad: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Generations kept per input.
    #[arg(long, default_value_t = 1)]
    pub nbest: usize,
    /// Longest output, end marker included.
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// Only the first N inputs.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub generations: PathBuf,
    /// Pair file holding the sources and references the generations were
    /// decoded from.
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    /// Also write the report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[arg(long, value_name = "FILE")]
    pub generations: PathBuf,
    /// SQuAD 2.0 file the generations were decoded from.
    #[arg(long, value_name = "FILE")]
    pub squad: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = Mode::Pair2Seq)]
    pub mode: Mode,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, value_name = "E/H", default_value = "8/4")]
    pub dims_override: ModelDims,
    /// Parameters are drawn from uniform(-r, r). Wider than the training
    /// initialization so that few gradients sit at the finite-difference
    /// rounding floor.
    #[arg(long, default_value_t = 0.5)]
    pub init_range: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Runs one command, printing its summary to stdout.
pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Align(a) => cmd_align(&a).map(|s| print!("{}", s.to_text())),
        Command::Train(a) => cmd_train(&a, |line| println!("{line}")).map(|s| print!("{}", s.to_text())),
        Command::Generate(a) => cmd_generate(&a).map(|s| print!("{}", s.to_text())),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|r| print!("{}", r.to_text())),
        Command::Augment(a) => cmd_augment(&a).map(|s| print!("{}", s.to_text())),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|r| print!("{}", r.to_text())),
    }
}

/// Parses `args` (program name first), applies any config file and runs
/// the command. Returns the process exit code; failures print one line to
/// stderr.
pub fn run(args: Vec<String>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn fail(e: &anyhow::Error) -> i32 {
    let msg = format!("{e:#}").replace(['\n', '\r'], " ");
    eprintln!("error: {msg}");
    1
}

/// Independent stream seed for a named pipeline stage.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a SplitMix64 finalizer over both.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_name_and_seed() {
        assert_ne!(sub_seed(13, "holdout"), sub_seed(13, "init"));
        assert_ne!(sub_seed(13, "init"), sub_seed(14, "init"));
        assert_eq!(sub_seed(13, "init"), sub_seed(13, "init"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
