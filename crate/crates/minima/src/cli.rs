//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 2 for usage errors, 1 for stage failures. Failures print a JSON
//! error document on stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::commands::{cmd_analyze, cmd_compress, cmd_eval, cmd_heal, cmd_plan, cmd_specdec, cmd_synth};
use crate::config::RunConfig;
use crate::error::{Error, ErrorDocument, Result};
use crate::VERSION_LINE;

#[derive(Debug, Parser)]
#[command(name = "minima", version = VERSION_LINE, about = "Tensor-network compression pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `target_ratio`.
    #[arg(long, value_name = "RATIO")]
    pub target_ratio: Option<f64>,
    /// Overrides the seed of this stage.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the primary output path of this stage.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic layered model.
    Synth(Common),
    /// Measure and predict per-patch compression sensitivity.
    Analyze(Common),
    /// Allocate the parameter budget across patches.
    Plan(Common),
    /// Apply a plan to the model.
    Compress(Common),
    /// Refine compressed factors against calibration activations.
    Heal(Common),
    /// Report output deviation and FLOPs of the compressed model.
    Eval(Common),
    /// Run speculative decoding over Markov language models.
    Specdec(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Analyze(_) => "analyze",
            Command::Plan(_) => "plan",
            Command::Compress(_) => "compress",
            Command::Heal(_) => "heal",
            Command::Eval(_) => "eval",
            Command::Specdec(_) => "specdec",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Analyze(c)
            | Command::Plan(c)
            | Command::Compress(c)
            | Command::Heal(c)
            | Command::Eval(c)
            | Command::Specdec(c) => c,
        }
    }
}

/// Loads the config and applies the command-line overrides.
pub fn resolve_config(command: &Command) -> Result<RunConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(r) = common.target_ratio {
        cfg.target_ratio = r;
    }
    if let Some(seed) = common.seed {
        let s = &mut cfg.seeds;
        match command {
            Command::Synth(_) => s.synth = seed,
            Command::Analyze(_) => s.analyze = seed,
            Command::Heal(_) => s.calibration = seed,
            Command::Eval(_) => s.eval = seed,
            Command::Specdec(_) => s.specdec = seed,
            Command::Plan(_) | Command::Compress(_) => {
                return Err(Error::Usage(format!("'{}' is deterministic and takes no --seed", command.name())));
            }
        }
    }
    if let Some(out) = &common.out {
        let p = &mut cfg.paths;
        let slot = match command {
            Command::Synth(_) => &mut p.model,
            Command::Analyze(_) => &mut p.sensitivity,
            Command::Plan(_) => &mut p.plan,
            Command::Compress(_) => &mut p.compressed,
            Command::Heal(_) => &mut p.healed,
            Command::Eval(_) => &mut p.report,
            Command::Specdec(_) => &mut p.specdec,
        };
        *slot = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command and returns the path of its primary output.
pub fn execute(command: &Command) -> Result<PathBuf> {
    let cfg = resolve_config(command)?;
    let p = &cfg.paths;
    Ok(match command {
        Command::Synth(_) => cmd_synth(&cfg).map(|_| p.model.clone())?,
        Command::Analyze(_) => cmd_analyze(&cfg).map(|_| p.sensitivity.clone())?,
        Command::Plan(_) => cmd_plan(&cfg).map(|_| p.plan.clone())?,
        Command::Compress(_) => cmd_compress(&cfg).map(|_| p.compressed.clone())?,
        Command::Heal(_) => cmd_heal(&cfg).map(|_| p.healed.clone())?,
        Command::Eval(_) => cmd_eval(&cfg).map(|_| p.report.clone())?,
        Command::Specdec(_) => cmd_specdec(&cfg).map(|_| p.specdec.clone())?,
    })
}

fn print_error(doc: &ErrorDocument) {
    eprintln!("{}", serde_json::to_string(doc).expect("error document serializes"));
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let err = Error::Usage(e.render().to_string().trim().to_string());
            print_error(&err.document());
            return err.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(out) => {
            println!("{}", json!({ "command": cli.command.name(), "output": out }));
            0
        }
        Err(e) => {
            print_error(&e.document());
            e.exit_code()
        }
    }
}
