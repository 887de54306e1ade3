use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kolmo::harness::convert::{metabric_standin, read_survival_csv, write_survival_csv};
use kolmo::harness::formats::{random_split, write_dataset, write_splits};
use kolmo::harness::pipeline::{evaluate_command, fit_command, latent_command, predict_command, simulate_command};
use kolmo::harness::RunConfig;
use kolmo::simulate::preset;
use kolmo::{Error, Result};

/// Neural multi-state survival models: simulate, fit, predict, evaluate.
#[derive(Debug, Parser)]
#[command(name = "kolmo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; without it, defaults plus KOLMO_* overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` and `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Upper bound on worker threads. Work currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a dataset with known ground truth.
    Simulate,
    /// Train a point model.
    Fit,
    /// Train a latent-variable model.
    FitVariational,
    /// Emit occupation curves (and bands or hazards) for a split.
    Predict,
    /// Score a predictions file.
    Evaluate,
    /// Export latent means and cluster labels.
    Latent,
    /// Turn a flat `duration,event` survival table into dataset files.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Flat CSV to convert.
    #[arg(long, required_unless_present = "standin", conflicts_with = "standin")]
    input: Option<PathBuf>,
    /// Write the synthetic METABRIC-shaped stand-in as a flat CSV to this path.
    #[arg(long)]
    standin: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let cfg = RunConfig::from_env()?;
            cfg.check_inputs()?;
            cfg
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.threads > 1 {
        log::info!("--threads {} accepted; computation is sequential", common.threads);
    }
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io {
        path: cfg.out.clone(),
        source: e,
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Simulate => {
            let s = simulate_command(&cfg)?;
            println!(
                "simulated {} subjects, censored fraction {:.4}, splits {}/{}/{}",
                s.n_subjects, s.censored_fraction, s.split_sizes[0], s.split_sizes[1], s.split_sizes[2]
            );
        }
        Command::Fit | Command::FitVariational => {
            let r = fit_command(&cfg, matches!(cli.command, Command::FitVariational))?;
            println!(
                "trained {} epochs, best epoch {} with validation nll {:.6}",
                r.history.len(),
                r.best_epoch,
                r.best_valid_nll
            );
        }
        Command::Predict => {
            let t = predict_command(&cfg)?;
            println!("wrote curves for {} subjects at {} times", t.ids.len(), t.grid.len());
        }
        Command::Evaluate => {
            let m = evaluate_command(&cfg)?;
            for (k, v) in &m.scalars {
                println!("{k} = {v}");
            }
        }
        Command::Latent => {
            let e = latent_command(&cfg)?;
            println!("exported {} latent means", e.ids.len());
        }
        Command::Convert(args) => {
            if let Some(path) = args.standin {
                let ds = metabric_standin(&preset("metabric-standin")?)?;
                write_survival_csv(&path, &ds)?;
                println!("wrote {} rows to {}", ds.len(), path.display());
            } else if let Some(input) = args.input {
                let ds = read_survival_csv(&input)?;
                write_dataset(&cfg.out, &ds)?;
                write_splits(&cfg.out.join("splits.csv"), &ds, &random_split(ds.len(), cfg.seed))?;
                println!("converted {} subjects into {}", ds.len(), cfg.out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
