use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rmadapter::{run, CliError, Command, Overrides, RunConfig};

/// Unknown flags and malformed arguments, kept apart from config errors (2).
const USAGE_EXIT: u8 = 64;

#[derive(Parser)]
#[command(
    name = "rmadapter",
    version,
    about = "Reconstruction-based adapters on a small dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for pretraining, adapter training and gradcheck sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted override such as train.lr=0.001. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Contrastively pretrain and freeze a backbone.
    Pretrain,
    /// Train adapters on the few-shot base classes of a frozen backbone.
    Adapt,
    /// Base/novel accuracy of a backbone, with or without adapters.
    Eval,
    /// Train and evaluate the ablation matrix.
    Ablate,
    /// Finite-difference check of the training objective.
    Gradcheck,
    /// Adapter parameter counts.
    Params,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Adapt => Command::Adapt,
            Cmd::Eval => Command::Eval,
            Cmd::Ablate => Command::Ablate,
            Cmd::Gradcheck => Command::Gradcheck,
            Cmd::Params => Command::Params,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0.
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let overrides = Overrides {
        sets: cli.sets,
        seed: cli.seed,
        out: cli.out,
    };
    let result = RunConfig::resolve(cli.config.as_deref(), &overrides).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.to_toml());
            return Ok(Vec::new());
        }
        run(cli.command.into(), &cfg)
    });
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
