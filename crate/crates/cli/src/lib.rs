//! The `hlstcm` command-line tool.
//!
//! Subcommands `gen`, `train`, `eval`, `predict-curve` and `gradcheck`. Every
//! setting is a `key=value` pair; see [`config`] for how defaults, a config
//! file and flags combine. Exit codes: 0 success, 2 usage or configuration
//! error, 3 numerical failure, 4 gradient check failure.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;

use config::{RunConfig, ALIASES};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_GRADCHECK: u8 = 4;

pub const COMMANDS: [(&str, &str); 5] = [
    ("gen", "Generate synthetic train and test tracklet files"),
    ("train", "Train a model and write a checkpoint, metrics CSV and summary"),
    ("eval", "Report accuracy, per-class accuracy and the confusion matrix"),
    ("predict-curve", "Accuracy at observation ratios 0.1, 0.2, .., 1.0"),
    ("gradcheck", "Compare analytic gradients with finite differences"),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Clap(#[from] clap::Error),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] hlstcm_core::Error),

    #[error("gradient check failed; worst tensors:\n{0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Clap(e) => e.exit_code() as u8,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(hlstcm_core::Error::NonFinite(_)) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_USAGE,
            CliError::GradCheck(_) => EXIT_GRADCHECK,
        }
    }
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config").long("config").value_name("PATH").value_parser(clap::value_parser!(PathBuf)).help("key=value file"),
    );
    for (key, default) in config::defaults(name) {
        let mut arg = Arg::new(key).long(key.replace('_', "-")).value_name("VALUE").help(config::help(key));
        if key.contains('_') {
            arg = arg.alias(key);
        }
        for (alias, target) in ALIASES {
            if *target == key {
                arg = arg.alias(*alias);
            }
        }
        if !default.is_empty() {
            arg = arg.long_help(format!("{} [default: {default}]", config::help(key)));
        }
        cmd = cmd.arg(arg.action(ArgAction::Set));
    }
    cmd
}

pub fn cli() -> Command {
    let mut cmd = Command::new("hlstcm")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Hierarchical concurrent-memory LSTM: data, training, evaluation and gradient checks")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(subcommand(name, about));
    }
    cmd
}

fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig, CliError> {
    let flags: Vec<(&str, String)> = config::defaults(name)
        .into_iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k, v.clone())))
        .collect();
    let file = m.get_one::<PathBuf>("config").map(PathBuf::as_path);
    let rc = RunConfig::resolve(name, file, &flags)?;
    match rc.path("resume") {
        // A resumed run starts from the settings stored in its checkpoint.
        Some(ckpt) if name == "train" => RunConfig::resolve_over(name, commands::resume_defaults(&rc, &ckpt)?, file, &flags),
        _ => Ok(rc),
    }
}

/// Runs one invocation. Primary output goes to `out`, progress to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let rc = resolve(name, sub)?;
    match name {
        "gen" => commands::gen(rc, out),
        "train" => commands::train(rc, out),
        "eval" => commands::eval(rc, out),
        "predict-curve" => commands::predict_curve(rc, out),
        "gradcheck" => commands::gradcheck(rc, out),
        other => unreachable!("unhandled subcommand {other}"),
    }
}
