mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use hopqg::error::QgError;

use args::{Cli, Command};

/// 2 for configuration errors, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(q) = cause.downcast_ref::<QgError>() {
            return if q.is_config() || matches!(q, QgError::Ensemble(_)) { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits 2 on usage errors and 0 on --help.
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Filter(a) => commands::filter(a),
        Command::Split(a) => commands::split(a),
        Command::Stats(a) => commands::stats(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Generate(a) => commands::generate(a),
        Command::EnsembleGenerate(a) => commands::ensemble_generate(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::GraphDump(a) => commands::graph_dump(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
