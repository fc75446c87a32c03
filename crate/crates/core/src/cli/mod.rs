//! Command-line front end for the `icb` binary.

pub mod commands;
pub mod config;
pub mod proxy;
pub mod tensor_file;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

pub use commands::{
    cmd_ablate, cmd_gen_inputs, cmd_insert, cmd_verify, load_inputs, run_insert, sha256_hex,
    synthetic_inputs, InsertReport, InsertRun, SweepParam,
};
pub use config::{parse_config, parse_config_str, LogitScale, RunConfig};
pub use proxy::identity_proxy_score;
pub use tensor_file::{read_tensor, write_tensor, TensorFile};

#[derive(Debug, Parser)]
#[command(
    name = "icb",
    version,
    about = "Training-free subject insertion on a toy MM-DiT"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one insertion and write generated latents plus traces.
    Insert {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check the attention identities against the brute-force reference.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one alpha so the decomposition check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Sweep one shift strength and print a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        values: String,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded synthetic inputs.
    GenInputs {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Take sizes from this config instead of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Insert { config } => {
            let cfg = parse_config(&config)?;
            print!("{}", cmd_insert(&cfg)?.summary());
            Ok(0)
        }
        Command::Verify {
            trials,
            seed,
            inject_fault,
        } => {
            let report = cmd_verify(trials, seed, inject_fault)?;
            print!("{report}");
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Ablate {
            config,
            sweep,
            values,
            out,
        } => {
            let cfg = parse_config(&config)?;
            let param: SweepParam = sweep.parse()?;
            let table = cmd_ablate(&cfg, param, &commands::parse_values(&values)?)?;
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            }
            print!("{table}");
            Ok(0)
        }
        Command::GenInputs { seed, out, config } => {
            let cfg = match config {
                Some(p) => parse_config(&p)?,
                None => RunConfig::default(),
            };
            for p in cmd_gen_inputs(&cfg, seed, &out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}
