//! `kgeu`: batch driver for training, meta-training, unlearning and evaluation.

mod config;
mod errors;
mod rundir;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use kgeu::synth::SynthConfig;
use kgeu::Ablation;

use config::RunConfig;
use errors::tagged;
use rundir::{RunDir, CONFIG};

#[derive(Parser, Debug)]
#[command(name = "kgeu", version, about = "Knowledge graph embedding unlearning pipeline")]
struct Cli {
    /// TOML run configuration; defaults to the copy inside --run-dir.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<config hash>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Component switch: disable-raeeg, disable-neem or drop-learner-<k>.
    #[arg(long, global = true)]
    ablate: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the dataset into train, test and forget sets.
    Ingest,
    /// Train the RAW model on the training split.
    TrainRaw,
    /// Meta-train the generator ensemble on tasks from the training split.
    MetaTrain,
    /// Remove the forget set from RAW with the meta-trained ensemble.
    Unlearn,
    /// Train from scratch on the retained triples.
    Retrain,
    /// Evaluate every checkpoint in the run directory.
    Eval,
    /// Join the evaluations into one comparison table.
    Report,
    /// Meta-train (if needed) and unlearn under an ablation switch.
    Ablate {
        #[arg(long)]
        disable_raeeg: bool,
        #[arg(long)]
        disable_neem: bool,
        /// One-based index of the learner to leave out.
        #[arg(long, value_name = "K")]
        drop_learner: Option<usize>,
    },
    /// Write a synthetic triple file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        entities: usize,
        #[arg(long, default_value_t = 10)]
        relations: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", errors::render(&e));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut ablation: Ablation = match &cli.ablate {
        Some(s) => s.parse()?,
        None => Ablation::none(),
    };
    if let Command::Ablate { disable_raeeg, disable_neem, drop_learner } = &cli.command {
        ablation.disable_raeeg |= disable_raeeg;
        ablation.disable_neem |= disable_neem;
        if let Some(k) = drop_learner {
            if *k == 0 {
                return Err(tagged("usage", "--drop-learner counts from 1"));
            }
            ablation.drop_learner = Some(k - 1);
        }
    }
    if let Command::Synth { out, entities, relations } = &cli.command {
        let config = SynthConfig {
            entities: *entities,
            relations: *relations,
            seed: cli.seed.unwrap_or(0),
            ..Default::default()
        };
        return stages::synth(out, &config);
    }
    let uses_switch = matches!(cli.command, Command::MetaTrain | Command::Unlearn | Command::Ablate { .. });
    if !ablation.is_none() && !uses_switch {
        return Err(tagged("usage", "--ablate applies to meta-train, unlearn and ablate"));
    }

    let config_path = match (&cli.config, &cli.run_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) if d.join(CONFIG).exists() => d.join(CONFIG),
        _ => return Err(tagged("usage", "--config is required unless --run-dir already holds a config")),
    };
    let mut config = RunConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let root = cli
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(rundir::short(&config.hash())));
    let mut dir = RunDir::open(&root, &config)?;
    match cli.command {
        Command::Ingest => stages::ingest(&config, &mut dir),
        Command::TrainRaw => stages::train_raw(&config, &mut dir),
        Command::MetaTrain => stages::meta_train(&config, &mut dir, ablation),
        Command::Unlearn => stages::unlearn(&config, &mut dir, ablation),
        Command::Retrain => stages::retrain(&config, &mut dir),
        Command::Eval => stages::eval(&config, &mut dir),
        Command::Report => stages::report(&config, &mut dir),
        Command::Ablate { .. } => stages::ablate(&config, &mut dir, ablation),
        Command::Synth { .. } => unreachable!("handled above"),
    }
}
