//! `gradmine`: toy data, preprocessing, backward-forward training, heatmaps,
//! metric sweeps and derivative conformance checks.

mod commands;
mod config;
mod tensorfile;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Failures that carry their own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Conformance(String),
}

#[derive(Parser)]
#[command(name = "gradmine", version, about = "Backward-forward training and heatmaps for small ConvNets")]
struct Cli {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenToy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Preprocess a dataset directory or image files into network inputs.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train with the backward-forward method.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Plain backpropagation without the forward-second pass.
        #[arg(long)]
        two_pass: bool,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Emit heatmaps for images under one or more checkpoints.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_parser = ["sensitivity", "hue"], default_value = "hue")]
        criterion: String,
        /// Channel norm of the sensitivity criterion (`inf` or an integer).
        #[arg(long, default_value = "inf")]
        q: String,
        /// Comma-separated checkpoint weights; emits one blended map per image.
        #[arg(long)]
        blend: Option<String>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Evaluate checkpoints on a dataset and write a metrics CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        checkpoints: Vec<PathBuf>,
    },
    /// Run the finite-difference conformance suite.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated operator groups.
        #[arg(long)]
        ops: Option<String>,
        /// Check a deliberately broken operator instead.
        #[arg(long, value_parser = ["inverted-slope"])]
        mutant: Option<String>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("reading config {}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&cli.set)?;
    let mut flag = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.cmd {
        Command::GenToy { common, count, .. } => {
            flag("seed", common.seed.map(|v| v.to_string()))?;
            flag("out", path(&common.out))?;
            flag("scene.count", count.map(|v| v.to_string()))?;
        }
        Command::Train { common, data, val, nu, iterations, .. } => {
            flag("seed", common.seed.map(|v| v.to_string()))?;
            flag("out", path(&common.out))?;
            flag("data", path(data))?;
            flag("val_data", path(val))?;
            flag("nu", nu.map(|v| v.to_string()))?;
            flag("iterations", iterations.map(|v| v.to_string()))?;
        }
        Command::Eval { common, data, .. } => {
            flag("seed", common.seed.map(|v| v.to_string()))?;
            flag("out", path(&common.out))?;
            flag("data", path(data))?;
        }
        Command::Preprocess { common, .. } | Command::Heatmap { common, .. } => {
            flag("seed", common.seed.map(|v| v.to_string()))?;
            flag("out", path(&common.out))?;
        }
        Command::Gradcheck { seed, .. } => flag("seed", seed.map(|v| v.to_string()))?,
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GRADMINE_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("GRADMINE_THREADS: bad value {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = resolve(&cli)?;
    eprint!("# resolved config\n{}", cfg.render(true));
    match cli.cmd {
        Command::GenToy { force, .. } => commands::gen_toy(&cfg, force),
        Command::Preprocess { inputs, .. } => commands::preprocess(&cfg, &inputs),
        Command::Train { two_pass, resume, .. } => commands::train(&cfg, two_pass, resume),
        Command::Heatmap { checkpoints, criterion, q, blend, inputs, .. } => {
            commands::heatmap(&cfg, &checkpoints, &criterion, &q, blend.as_deref(), &inputs)
        }
        Command::Eval { checkpoints, .. } => commands::eval(&cfg, &checkpoints),
        Command::Gradcheck { ops, mutant, .. } => commands::gradcheck(&cfg, ops.as_deref(), mutant.is_some()),
    }
}

/// 1 usage or config, 2 conformance failure, 3 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => 1,
                CliError::Conformance(_) => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<gradmine::Error>() {
            return match e {
                gradmine::Error::Io(_) | gradmine::Error::Format(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
