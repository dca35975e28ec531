use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use crld::harness::{run_command, Command, RunConfig, Runner};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Pretrain,
    Distill,
    Eval,
    Ablate,
    SweepTau,
    SweepStrength,
    ViewMode,
    AugmentPreview,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Distill => Command::Distill,
            Cmd::Eval => Command::Eval,
            Cmd::Ablate => Command::Ablate,
            Cmd::SweepTau => Command::SweepTau,
            Cmd::SweepStrength => Command::SweepStrength,
            Cmd::ViewMode => Command::ViewMode,
            Cmd::AugmentPreview => Command::AugmentPreview,
        }
    }
}

/// Consistency-regularised logit distillation experiments.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// Run configuration (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides pretrain.seed and distill.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run grid points as separate processes.
    #[arg(long)]
    parallel: bool,
    /// Concurrent processes for --parallel; defaults to the core count.
    #[arg(long)]
    jobs: Option<usize>,
    /// Continue an interrupted distill run from its last epoch.
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = || -> crld::Result<String> {
        let mut cfg = RunConfig::load(&cli.config)?;
        if let Some(s) = cli.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &cli.out {
            cfg.out_dir = o.clone();
        }
        let runner = if cli.parallel {
            let exe = std::env::current_exe().map_err(|e| crld::CrldError::io("current_exe", e))?;
            let jobs = cli
                .jobs
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            Runner::Processes { exe, jobs }
        } else {
            Runner::Sequential
        };
        run_command(cli.command.into(), &cfg, &runner, cli.resume)
    };
    match run() {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
