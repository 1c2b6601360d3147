mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{split_overrides, Cli, Command};
use commands::UsageError;

const USAGE: u8 = 1;
const FAILURE: u8 = 2;

fn run(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<bool> {
    let takes_overrides = matches!(cli.command, Command::Train(_) | Command::Ablate(_));
    if !overrides.is_empty() && !takes_overrides {
        let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
        return Err(UsageError(format!("config overrides ({}) only apply to train and ablate", keys.join(", "))).into());
    }
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a)?,
        Command::Train(a) => commands::train_cmd(a, overrides)?,
        Command::Eval(a) => commands::eval_cmd(a)?,
        Command::Ablate(a) => commands::ablate_cmd(a, overrides)?,
        Command::Gradcheck(a) => return commands::gradcheck_cmd(a),
        Command::Infer(a) => commands::infer_cmd(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    match run(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(FAILURE)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::from(FAILURE)
            }
        }
    }
}
