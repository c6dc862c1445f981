use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind as ClapKind;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::Settings;
use error::CliError;

const AFTER_HELP: &str = "\
Settings resolve as flags > environment (IMCOT_EMBED_ENDPOINT, IMCOT_SEED) > --config file > defaults.
Every run with --out writes <out>.manifest.json; pass it back with --config to replay the run.
Exit codes: 0 success, 1 input or usage error, 2 unreachable service.";

#[derive(Parser)]
#[command(name = "imcot", version, about = "Grounded tool-use trajectories: parse, score, roll out, generate data, evaluate", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse trajectory records and report their structure or parse errors.
    Parse,
    /// Compute reward reports for trajectory records.
    Score,
    /// Run scripted-policy rollout groups over a question file.
    Rollout,
    /// Group-normalized advantages from rewards.
    Advantages,
    /// Turn open-ended Q&A into filtered verifiable items.
    Datagen,
    /// SURDS per-task accuracy and overall score.
    EvalSurds,
    /// DriveLMM reasoning scorecards and MCQ accuracy.
    EvalDrivelmm,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Parse => "parse",
            Command::Score => "score",
            Command::Rollout => "rollout",
            Command::Advantages => "advantages",
            Command::Datagen => "datagen",
            Command::EvalSurds => "eval-surds",
            Command::EvalDrivelmm => "eval-drivelmm",
        }
    }
}

fn run(args: impl IntoIterator<Item = OsString>) -> Result<(), CliError> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.render())),
    };
    let name = cli.command.name();
    let cfg = config::resolve(&cli.settings, name, &|k| std::env::var(k).ok())?;
    let out = match cli.command {
        Command::Parse => commands::parse(&cfg),
        Command::Score => commands::score_cmd(&cfg),
        Command::Rollout => commands::rollout(&cfg),
        Command::Advantages => commands::advantages(&cfg),
        Command::Datagen => commands::datagen(&cfg),
        Command::EvalSurds => commands::eval_surds(&cfg),
        Command::EvalDrivelmm => commands::eval_drivelmm(&cfg),
    }?;
    commands::emit(name, &cfg, out)
}

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
