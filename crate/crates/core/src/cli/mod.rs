//! Experiment driver: TOML configuration, subcommands and output writers.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_attack, cmd_diagnose, cmd_partition_stats, cmd_run};
pub use config::ExperimentConfig;

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write rounds.csv and summary.json.
    Run(CommonArgs),
    /// Run the gradient inversion attack and write psnr.csv and PGM images.
    Attack(CommonArgs),
    /// Report client sizes and class counts of the configured partition.
    PartitionStats(CommonArgs),
    /// Train with forgetting and Fisher diagnostics enabled.
    Diagnose(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `workers`.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides `out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one parsed command line.
pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let summary = cmd_run(&cfg, &cfg.out_dir)?;
            println!(
                "{}: final accuracy {:.4} after {} rounds ({})",
                summary.algorithm,
                summary.final_accuracy,
                summary.rounds,
                cfg.out_dir.display()
            );
        }
        Command::Attack(args) => {
            let cfg = args.resolve()?;
            let rows = cmd_attack(&cfg, &cfg.out_dir)?;
            for (defense, psnr) in commands::mean_psnr_by_defense(&rows) {
                println!("{defense}: mean PSNR {psnr:.2} dB");
            }
        }
        Command::PartitionStats(args) => {
            let cfg = args.resolve()?;
            let stats = cmd_partition_stats(&cfg, &cfg.out_dir)?;
            print!("{}", commands::render_partition_stats(&stats));
        }
        Command::Diagnose(args) => {
            let cfg = args.resolve()?;
            let records = cmd_diagnose(&cfg, &cfg.out_dir)?;
            let incs: Vec<f64> = records.iter().filter_map(|r| r.mean_increment).collect();
            if !incs.is_empty() {
                println!("mean forgetting increment {:.6}", incs.iter().sum::<f64>() / incs.len() as f64);
            }
            let rhos: Vec<f64> = records.iter().filter_map(|r| r.fisher_rho).collect();
            if !rhos.is_empty() {
                println!("mean Fisher correlation {:.6}", rhos.iter().sum::<f64>() / rhos.len() as f64);
            }
        }
    }
    Ok(())
}
