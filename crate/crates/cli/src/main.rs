mod commands;
mod config;
mod failure;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{read_flat, RunConfig};
use failure::Failure;

#[derive(Parser)]
#[command(
    name = "bridging",
    version,
    about = "Train, run and verify the multi-task bridging resolver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train on a corpus; writes checkpoints and a loss log into --output.
    Train,
    /// Write one JSON record per query for a trained checkpoint.
    Predict,
    /// Score a checkpoint on a corpus: full bridging, anaphor recognition, antecedent selection.
    Evaluate,
    /// k-fold training and prediction, scored once over the pooled predictions.
    Crossval,
    /// Compare analytic and finite-difference gradients of a compact model.
    Gradcheck,
    /// Parse and check a corpus file (and vector files, if given).
    ValidateCorpus,
}

#[derive(clap::Args)]
struct Flags {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set any configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true, value_name = "FILE")]
    corpus: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    static_vectors: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    contextual_vectors: Option<String>,
    #[arg(long, global = true, value_name = "FILE")]
    checkpoint: Option<String>,
    /// Output file (directory for train); stdout when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    /// ENCODER_ONLY, SHARE_FFNN_1 or SHARE_FFNN_2.
    #[arg(long, global = true)]
    sharing: Option<String>,
    /// keep or remove.
    #[arg(long, global = true)]
    setting: Option<String>,
    /// bridging or coreference.
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    folds: Option<String>,
    #[arg(long, global = true)]
    checkpoint_every: Option<String>,
    #[arg(long, global = true)]
    include_epsilon: bool,
    /// Run crossval folds concurrently.
    #[arg(long, global = true)]
    parallel_folds: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl Flags {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply(&read_flat(path)?)?;
        }
        let mut pairs = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("corpus", &self.corpus),
            ("static_vectors", &self.static_vectors),
            ("contextual_vectors", &self.contextual_vectors),
            ("checkpoint", &self.checkpoint),
            ("output", &self.output),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("sharing", &self.sharing),
            ("setting", &self.setting),
            ("task", &self.task),
            ("folds", &self.folds),
            ("checkpoint_every", &self.checkpoint_every),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        }
        for (key, on) in [
            ("include_epsilon", self.include_epsilon),
            ("parallel_folds", self.parallel_folds),
        ] {
            if on {
                pairs.push((key.to_string(), "true".to_string()));
            }
        }
        config.apply(&pairs)?;
        Ok(config)
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = cli.flags.resolve()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Train => commands::train_command(&config, &mut out),
        Command::Predict => commands::predict_command(&config, &mut out),
        Command::Evaluate => commands::evaluate_command(&config, &mut out),
        Command::Crossval => commands::crossval_command(&config, &mut out),
        Command::Gradcheck => commands::gradcheck_command(&config, &mut out),
        Command::ValidateCorpus => commands::validate_corpus_command(&config, &mut out),
    };
    out.flush().ok();
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let line = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            return fail(&Failure::usage(line.trim_start_matches("error: ")));
        }
    };
    let level = match cli.flags.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    eprintln!("{}", f.record());
    ExitCode::from(f.kind.exit_code() as u8)
}
