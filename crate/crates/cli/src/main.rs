use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentts::pipeline::{cmd_evaluate, cmd_generate, cmd_prepare, cmd_report, cmd_train, seed_offset, Prepared, RunConfig};
use latentts::{Error, Result};

/// Latent-space GAN for regular and irregular multivariate time series.
#[derive(Parser)]
#[command(name = "latentts", version)]
struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue training from the latest checkpoint.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw data, fit the schema and write encoded train/test splits.
    Prepare,
    /// Train the autoencoder, calibrate thresholds and train the latent GAN.
    Train,
    /// Sample synthetic instances from a trained bundle.
    Generate {
        /// Defaults to `<out>/train/model.bundle`.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Defaults to the config's synthetic_count, else the training-set size.
        #[arg(long)]
        count: Option<usize>,
        /// Defaults to `<out>/synthetic/synthetic.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score synthetic data against the prepared real splits.
    Evaluate {
        /// Defaults to `<out>/synthetic/synthetic.csv`.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Collect statistics, training traces and evaluation tables.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare => {
            let cfg = load_config(cli)?;
            for s in cmd_prepare(&cfg)? {
                println!(
                    "{}: {} instances, avg length {:.2}, missing rate {:.2}%",
                    s.split,
                    s.instances,
                    s.average_length,
                    100.0 * s.missing_rate
                );
            }
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let bundle = cmd_train(&cfg, cli.resume)?;
            println!("trained; latent width {}", bundle.latent_dim());
        }
        Command::Generate { bundle, count, output } => {
            let (bundle, count, output, seed) = match (bundle, count, &cli.config) {
                (Some(b), Some(n), None) => {
                    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
                    let output = output.clone().unwrap_or_else(|| out.join("synthetic.csv"));
                    (b.clone(), *n, output, cli.seed.unwrap_or(0))
                }
                (b, n, _) => {
                    let cfg = load_config(cli)?;
                    let n = match n.or(cfg.eval.synthetic_count) {
                        Some(n) => n,
                        None => Prepared::load(&cfg.out_dir)?.train.len(),
                    };
                    (
                        b.clone().unwrap_or_else(|| cfg.out_dir.join("train/model.bundle")),
                        n,
                        output.clone().unwrap_or_else(|| cfg.out_dir.join("synthetic/synthetic.csv")),
                        cfg.seed.wrapping_add(seed_offset::GENERATE),
                    )
                }
            };
            let m = cmd_generate(&bundle, count, seed, &output)?;
            println!("wrote {} instances to {} (seed {})", m.count, output.display(), m.seed);
        }
        Command::Evaluate { synthetic } => {
            let cfg = load_config(cli)?;
            let path = synthetic.clone().unwrap_or_else(|| cfg.out_dir.join("synthetic/synthetic.csv"));
            let report = cmd_evaluate(&cfg, &path)?;
            print!("{}", report.to_table());
        }
        Command::Report => {
            let cfg = load_config(cli)?;
            print!("{}", cmd_report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
