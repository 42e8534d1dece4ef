use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use synthaug_cli::commands::{
    cmd_craft_gen, cmd_oversample_compare, cmd_quality, cmd_scaling_fourier, cmd_scaling_gauss, cmd_tf_kl, Written,
};
use synthaug_cli::{load_config, CliError};

#[derive(Parser)]
#[command(name = "synthaug", version, about = "Synthetic oversampling and augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the Craft simulated dataset.
    CraftGen,
    /// Compare oversampling methods across imbalance ratios and seeds.
    OversampleCompare,
    /// Risk curve and slope for the Gaussian sequence model.
    ScalingGauss,
    /// Risk curve and slope for the Fourier white-noise model.
    ScalingFourier,
    /// KL decay of the explicit transformer generator.
    TfKl,
    /// Quality terms of a linear-regression world.
    Quality,
}

fn run(cli: &Cli) -> Result<Written, CliError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let (path, seed, out) = (cli.config.as_deref(), cli.seed, cli.out.as_path());
    match cli.command {
        Command::CraftGen => cmd_craft_gen(&load_config(path, seed)?, out),
        Command::OversampleCompare => cmd_oversample_compare(&load_config(path, seed)?, out),
        Command::ScalingGauss => {
            let (w, s) = cmd_scaling_gauss(&load_config(path, seed)?, out)?;
            println!("slope {:.4} (beta {:.4}, r2 {:.4})", s.fit.slope, s.beta, s.fit.r2);
            Ok(w)
        }
        Command::ScalingFourier => {
            let (w, s) = cmd_scaling_fourier(&load_config(path, seed)?, out)?;
            println!("slope {:.4} (beta {:.4}, r2 {:.4})", s.fit.slope, s.beta, s.fit.r2);
            Ok(w)
        }
        Command::TfKl => {
            let (w, s) = cmd_tf_kl(&load_config(path, seed)?, out)?;
            for p in &s {
                println!("n {:>5}  mean KL {:.3e}  recovery {:.3}", p.n, p.mean_kl, p.recovery_rate);
            }
            Ok(w)
        }
        Command::Quality => cmd_quality(&load_config(path, seed)?, out).map(|(w, _)| w),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(w) => {
            println!("config {}", w.config_hash);
            for f in &w.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("synthaug: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
