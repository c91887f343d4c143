mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use crate::commands::Experiment;
use crate::config::{Method, Preset, RunConfig};
use crate::rundir::{RunDir, CONFIG_FILE};

const OVERRIDE_HELP: &str = "Any config key can be overridden with a flag of the same dotted name, \
for example `--projector.d=200` or `--selection.method re`.";

#[derive(Parser, Debug)]
#[command(name = "gradex", version, about = "Estimate fine-tuning losses of task subsets from one meta-trained model", after_help = OVERRIDE_HELP)]
struct Cli {
    /// Config file (TOML). Defaults to the run directory's config.toml, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Sets every named seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, env = "GRADEX_OUT")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Gen {
        /// Built-in defaults to start from when no config exists yet.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Train the shared model on every task.
    MetaTrain,
    /// Cache projected per-sample gradients at the meta-trained weights.
    Cache,
    /// Estimate fine-tuning losses for given subsets.
    Estimate {
        /// Task ids separated by commas or semicolons; repeatable.
        #[arg(long = "subset", value_name = "IDS")]
        subsets: Vec<String>,
        /// Also estimate this many random subsets drawn with `selection.seed`.
        #[arg(long)]
        random: Option<usize>,
    },
    /// Select a task subset.
    Select {
        #[arg(value_enum)]
        method: Option<Method>,
    },
    /// Run a benchmark experiment.
    Bench {
        #[arg(value_enum)]
        experiment: Experiment,
    },
    /// Summarize the run directory.
    Report,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Gen { .. } => "gen",
            Command::MetaTrain => "meta-train",
            Command::Cache => "cache",
            Command::Estimate { .. } => "estimate",
            Command::Select { .. } => "select",
            Command::Bench { .. } => "bench",
            Command::Report => "report",
        }
    }
}

/// Pulls `--a.b=v` and `--a.b v` out of the argument list; clap sees the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            plain.push(arg);
            continue;
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            plain.push(arg);
            continue;
        }
        let value = match value.or_else(|| iter.next()) {
            Some(v) => v,
            None => bail!("missing value for --{name}"),
        };
        overrides.push((name, value));
    }
    Ok((plain, overrides))
}

fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<(RunConfig, RunDir)> {
    let from_file = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let preset = match &cli.command {
        Command::Gen { preset } => *preset,
        _ => None,
    };
    let out = cli
        .out
        .clone()
        .or_else(|| from_file.as_ref().map(|c| PathBuf::from(&c.output_dir)))
        .unwrap_or_else(|| PathBuf::from("gradex-run"));
    let run = RunDir::new(out);
    let mut cfg = match (from_file, preset) {
        (Some(c), _) => c,
        (None, Some(p)) => RunConfig::preset(p)?,
        (None, None) if run.exists(CONFIG_FILE) => RunConfig::load(&run.path(CONFIG_FILE))?,
        (None, None) => RunConfig::preset(Preset::Planted)?,
    };
    if let Some(seed) = cli.seed {
        cfg.set_all_seeds(seed);
    }
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok((cfg, run))
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    if let Command::Report = cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("gradex-run"));
        let run = RunDir::new(out);
        // Checked before locking so an empty directory is left untouched.
        if !commands::has_artifacts(&run) {
            bail!("nothing to report in {}: run `gradex gen` first", run.root().display());
        }
        let _lock = run.lock()?;
        return commands::report(&run);
    }
    let (cfg, run) = resolve_config(&cli, &overrides)?;
    if !matches!(cli.command, Command::Gen { .. }) && !run.root().is_dir() {
        bail!("run directory {} does not exist: run `gradex gen` first", run.root().display());
    }
    let _lock = run.lock()?;
    match cli.command {
        Command::Gen { .. } => commands::gen(&run, &cfg),
        Command::MetaTrain => commands::meta_train_stage(&run, &cfg),
        Command::Cache => commands::cache(&run, &cfg),
        Command::Estimate { subsets, random } => commands::estimate(&run, &cfg, &subsets, random),
        Command::Select { method } => commands::select(&run, &cfg, method.unwrap_or(cfg.selection.method)),
        Command::Bench { experiment } => commands::bench(&run, &cfg, experiment),
        Command::Report => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("gradex: error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let stage = cli.command.stage();
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gradex {stage}: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
