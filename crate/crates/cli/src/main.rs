mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "av2vec", version, about = "Audio-visual self-distillation pretraining on synthetic data")]
pub struct Cli {
    /// Run configuration (TOML). Omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the top-level `run_dir`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub force: bool,
    /// Continue pretraining from this checkpoint.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic training and evaluation corpora.
    GenData,
    /// Pretrain the student/teacher pair.
    Pretrain,
    /// Cluster hidden features of a checkpoint into discrete MLM targets.
    Cluster,
    /// Train a frame-classification probe on top of a pretrained encoder.
    Finetune {
        /// Pretrained checkpoint; defaults to `<run_dir>/checkpoints/last.av2c`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start from a freshly initialised encoder (baseline).
        #[arg(long)]
        random_init: bool,
    },
    /// Evaluate a probe across modality conditions and SNR levels.
    Eval {
        /// Probe checkpoint; defaults to `<run_dir>/checkpoints/probe.av2c`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn keys_help(sections: &[&str]) -> String {
    let mut s = String::from("Config keys read (with defaults):\n");
    for k in av2vec::config::documented_keys(sections) {
        s.push_str("  ");
        s.push_str(&k);
        s.push('\n');
    }
    s
}

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, sections) in commands::SECTIONS {
        cmd = cmd.mut_subcommand(*name, |c| c.after_help(keys_help(sections)));
    }
    cmd
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<av2vec::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
