//! `andnet`: train, evaluate, attack and inspect AND-favouring networks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "andnet", version, about = "Train, attack and inspect AND-favouring MLPs on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Train a network and write a checkpoint plus per-epoch metrics.
    Train,
    /// Clean test accuracy of a checkpoint.
    Eval,
    /// Accuracy under FGSM or PGD over a sweep of epsilons.
    Attack,
    /// Render the incoming weights of a hidden layer as images.
    ExportFeatures,
    /// NCF histograms under the normal and the scrambled data.
    Diagnose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn text(self) -> &'static str {
        match self {
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Sectioned key = value file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated list; 0 is always added as the clean reference.
    #[arg(long, global = true, value_name = "LIST")]
    epsilons: Option<String>,
    #[arg(long, global = true, value_parser = ["fgsm", "pgd"])]
    attack: Option<String>,
    #[arg(long, global = true, value_enum)]
    defense: Option<Switch>,
    #[arg(long, global = true, value_name = "X")]
    lambda_mix: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, global = true, value_name = "X")]
    lr: Option<f64>,
    /// uniform, glorot, sparse:<n> or auto.
    #[arg(long, global = true, value_name = "SCHEME")]
    init: Option<String>,
    #[arg(long, global = true, value_name = "X", allow_negative_numbers = true)]
    filter_center: Option<f64>,
    /// Use only the first N training examples.
    #[arg(long, global = true, value_name = "N")]
    train_examples: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long, global = true, value_name = "N")]
    test_examples: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    checkpoint_every: Option<usize>,
    /// Hidden layer for export-features, numbered from 1.
    #[arg(long, global = true, value_name = "K")]
    layer: Option<usize>,
    /// Allow export of layers whose inputs are not a 28×28 image.
    #[arg(long, global = true)]
    allow_strips: bool,
    #[arg(long, global = true, value_name = "N")]
    bins: Option<usize>,
    /// Flipped examples dumped as PGM per epsilon.
    #[arg(long, global = true, value_name = "N")]
    max_flips: Option<usize>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &'static str, String)> {
        let mut v = Vec::new();
        let mut push = |s, k, val: Option<String>| {
            if let Some(val) = val {
                v.push((s, k, val));
            }
        };
        let show = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("train", "seed", self.seed.map(|x| x.to_string()));
        push("data", "dir", show(&self.data_dir));
        push("output", "dir", show(&self.out));
        push("output", "checkpoint", show(&self.checkpoint));
        push("attack", "epsilons", self.epsilons.clone());
        push("attack", "kind", self.attack.clone());
        push("train", "defense", self.defense.map(|d| d.text().to_string()));
        push("train", "lambda_mix", self.lambda_mix.map(|x| x.to_string()));
        push("train", "epochs", self.epochs.map(|x| x.to_string()));
        push("train", "batch_size", self.batch_size.map(|x| x.to_string()));
        push("train", "lr", self.lr.map(|x| x.to_string()));
        push("train", "init", self.init.clone());
        push("train", "filter_center", self.filter_center.map(|x| x.to_string()));
        push("data", "train_examples", self.train_examples.map(|x| x.to_string()));
        push("data", "test_examples", self.test_examples.map(|x| x.to_string()));
        push("output", "checkpoint_every", self.checkpoint_every.map(|x| x.to_string()));
        push("export", "layer", self.layer.map(|x| x.to_string()));
        push("export", "allow_strips", self.allow_strips.then(|| "on".to_string()));
        push("diagnose", "bins", self.bins.map(|x| x.to_string()));
        push("attack", "max_flips", self.max_flips.map(|x| x.to_string()));
        v
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for (section, key, value) in self.pairs() {
            cfg.set(section, key, &value)
                .map_err(|e| CliError::Usage(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.opts.resolve()?;
    commands::echo_config(&cfg)?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Attack => commands::attack(&cfg),
        Command::ExportFeatures => commands::export_features(&cfg),
        Command::Diagnose => commands::diagnose(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
