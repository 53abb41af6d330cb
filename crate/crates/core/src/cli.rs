//! Command-line front end: `corrseg <generate|train|eval|gradcheck>`.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_report};
use crate::gradcheck_suite::{run_suite, DEFAULT_SEEDS};
use crate::network::SegNetwork;
use crate::synthetic::{make_dataset, Dataset};
use crate::training::{train_with, TrainOptions};

pub const THREADS_ENV: &str = "CORRSEG_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Write the synthetic dataset.
    Generate,
    /// Train on the generated dataset and checkpoint the best epoch.
    Train,
    /// Evaluate the checkpoint on every modality subset.
    Eval,
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "corrseg", version, about = "Missing-modality robust 3D segmentation on synthetic phantoms")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration; required except for `gradcheck`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Correlation block on or off.
    #[arg(long, value_enum)]
    pub cr: Option<Switch>,
    /// Output directory, overriding `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Cli {
    /// Loads the config file and applies command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None if self.command == Command::Gradcheck => RunConfig::default(),
            None => return Err(Error::InvalidConfig(format!("--config is required for {:?}", self.command).to_lowercase())),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(cr) = self.cr {
            config.network.cr_enabled = cr == Switch::On;
        }
        if let Some(out) = &self.out {
            config.paths.out = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

/// Sizes the global thread pool from `CORRSEG_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Runs `cli`, writing progress to `out`.
pub fn run(cli: &Cli, out: &mut impl Write) -> Result<()> {
    let config = cli.resolve()?;
    writeln!(out, "# resolved configuration\n{}", config.to_toml()).map_err(stdout_error)?;
    match cli.command {
        Command::Generate => generate(&config, out),
        Command::Train => train(&config, out),
        Command::Eval => eval(&config, out),
        Command::Gradcheck => {
            let seeds = match cli.seed {
                Some(s) => vec![s, s + 1, s + 2],
                None => DEFAULT_SEEDS.to_vec(),
            };
            let report = run_suite(&seeds)?;
            writeln!(out, "{report}").map_err(stdout_error)?;
            if report.passed() {
                Ok(())
            } else {
                let worst = report.worst().expect("non-empty suite");
                Err(Error::arg("gradcheck", format!("{} exceeds tolerance: {:.3e}", worst.name, worst.max_error)))
            }
        }
    }
}

fn generate(config: &RunConfig, out: &mut impl Write) -> Result<()> {
    let dir = config.paths.data_dir();
    let manifest = make_dataset(&config.phantom_spec(), config.data.n_train, config.data.n_test, &dir)?;
    writeln!(
        out,
        "wrote {} train and {} test samples to {}",
        manifest.train.len(),
        manifest.test.len(),
        dir.display()
    )
    .map_err(stdout_error)
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load(&config.paths.data_dir())?;
    if data.manifest.spec != config.phantom_spec() {
        return Err(Error::InvalidConfig(format!(
            "dataset in {} was generated with different settings; rerun generate",
            config.paths.data_dir().display()
        )));
    }
    Ok(data)
}

fn train(config: &RunConfig, out: &mut impl Write) -> Result<()> {
    let data = load_dataset(config)?;
    let mut net = SegNetwork::new(config.network.clone(), config.seed)?;
    let options = TrainOptions {
        seed: config.seed,
        checkpoint_dir: Some(config.paths.checkpoint_dir()),
    };
    let mut io = Ok(());
    let log = train_with(&mut net, &data.train, &config.training, &options, |r| {
        if io.is_ok() {
            io = writeln!(
                out,
                "epoch {:>3}  loss {:.5}  dice {:.5}  l1 {:.5}  lr {:.2e}",
                r.epoch, r.total, r.dice, r.l1, r.lr
            );
        }
    })?;
    io.map_err(stdout_error)?;
    log.write_csv(&config.paths.log_path())?;
    writeln!(
        out,
        "best epoch {}; checkpoint in {}",
        log.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string()),
        config.paths.checkpoint_dir().display()
    )
    .map_err(stdout_error)
}

fn eval(config: &RunConfig, out: &mut impl Write) -> Result<()> {
    let (net, epoch) = SegNetwork::load(&config.paths.checkpoint_dir())?;
    let data = load_dataset(config)?;
    let report = evaluate(&net, &data.test, config.eval.threshold)?;
    let path = config.paths.report_path();
    write_report(&report, &path)?;
    write!(out, "{}", report.to_csv()).map_err(stdout_error)?;
    writeln!(
        out,
        "checkpoint epoch {epoch}; mean dice over subsets {:.4}; report in {}",
        report.mean_dice(),
        path.display()
    )
    .map_err(stdout_error)
}
