//! `bnrf`: data generation, training, rendering, evaluation and oracle suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bnrf_cli::commands;
use bnrf_cli::config::Settings;

#[derive(Debug, Parser)]
#[command(name = "bnrf", version, about = "Uncertainty-aware volume rendering experiments")]
struct Cli {
    /// TOML file whose keys are the flag names; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Default, Args)]
struct Flags {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// One of the seven loss modes, or `all` for the oracle.
    #[arg(long, visible_alias = "mode", global = true)]
    loss_mode: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    batch_rays: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    warmup: Option<usize>,
    #[arg(long, global = true)]
    n_samples: Option<usize>,
    /// orbit_unobserved, forward_observed or orbit_depth.
    #[arg(long, global = true)]
    rig: Option<String>,
    #[arg(long, global = true)]
    train_count: Option<usize>,
    #[arg(long, global = true)]
    scene: Option<String>,
    #[arg(long, global = true)]
    suite: Option<String>,
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    #[arg(long, global = true)]
    normalized_depth: bool,
    #[arg(long, global = true)]
    gradient_through_t: bool,
}

impl Flags {
    fn settings(&self) -> Settings {
        Settings {
            seed: self.seed,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            loss_mode: self.loss_mode.clone(),
            iterations: self.iterations,
            batch_rays: self.batch_rays,
            lr: self.lr,
            warmup: self.warmup,
            n_samples: self.n_samples,
            rig: self.rig.clone(),
            train_count: self.train_count,
            scene: self.scene.clone(),
            suite: self.suite.clone(),
            tolerance: self.tolerance,
            normalized_depth: self.normalized_depth.then_some(true),
            gradient_through_t: self.gradient_through_t.then_some(true),
            ..Settings::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a procedural scene from a camera rig into a dataset directory.
    GenData,
    /// Train a field on a dataset.
    Train,
    /// Render the test views (and variance maps) of a trained run.
    Render {
        /// Run directory written by `train`.
        run: PathBuf,
    },
    /// Score rendered test views against a dataset and append a CSV row.
    Eval {
        /// Directory of rendered views, named like the dataset's test images.
        renders: PathBuf,
    },
    /// Run an oracle suite: moments, gradients, lognormal or breakdown.
    Oracle {
        /// Suite name; `--suite` works too.
        #[arg(id = "suite_name", value_name = "SUITE")]
        name: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let settings = match &cli.config {
        Some(path) => match Settings::load(path) {
            Ok(file) => file.overridden_by(&cli.flags.settings()),
            Err(e) => return commands::report(commands::Failure::Usage(e)),
        },
        None => cli.flags.settings(),
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&settings),
        Command::Train => commands::train(&settings),
        Command::Render { run } => commands::render(&settings, &run),
        Command::Eval { renders } => commands::eval(&settings, &renders),
        Command::Oracle { name } => commands::oracle(&settings, name.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(f) => commands::report(f),
    }
}
