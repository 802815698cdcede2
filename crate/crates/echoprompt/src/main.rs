//! Thin CLI over [`echoprompt::runner`]: parse flags, dispatch, map errors
//! to the documented exit codes (1 config, 2 data, 3 training).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use echoprompt::runner::{run, RunOptions};

#[derive(Parser)]
#[command(
    name = "echoprompt",
    about = "Prompt-conditioned multi-task ultrasound pipeline",
    long_about = "Config-driven runner for dataset synthesis, preparation, training, \
evaluation, zero-shot inference, adapter fine-tuning, embedding export, and \
report rendering. Artifacts land in a run directory named by config digest + seed."
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// One of: train, eval, zeroshot, finetune-adapter, scratch, synth,
    /// prepare, export-embeddings, report. Overrides the config file.
    #[arg(long, value_name = "NAME")]
    mode: Option<String>,

    /// Random seed; overrides the config file.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,

    /// Config override as a dotted KEY=VALUE path (repeatable),
    /// e.g. --set train.epochs=50 --set model.prompt_enabled=false
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run directory; defaults to runs/<config digest>-seed<seed>.
    #[arg(long, value_name = "PATH")]
    run_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let opts = RunOptions {
        config_path: cli.config,
        mode: cli.mode,
        seed: cli.seed,
        overrides: cli.set,
        run_dir: cli.run_dir,
    };
    match run(&opts) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
