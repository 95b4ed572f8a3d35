// SPDX-License-Identifier: Apache-2.0

//! `secscale` command-line front end.
//!
//! Exit codes: 0 benign completion, 2 security event, 1 usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Status;
use secscale::adversary::AttackKind;
use secscale::sim::ModelKind;

#[derive(Parser)]
#[command(name = "secscale", version, about = "Enclave memory protection simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one model on one workload; writes report.json and summary.csv.
    Run {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<ModelKind>,
    },
    /// Run several models on one workload; writes compare.csv and compare.json.
    Compare {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeat to list models; overrides `models` and the preset.
        #[arg(long = "model")]
        models: Vec<ModelKind>,
        /// five-model, fault-penalty-sweep, merkle-only, fault-only or ablation.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Print metadata storage for a machine size.
    Storage {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "512GiB")]
        total: String,
        /// Bytes the EPC counter tree protects.
        #[arg(long, default_value = "128MiB")]
        epc_protected: String,
        /// Also print a counter tree over all memory at 64 to 512 GiB.
        #[arg(long)]
        curve: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run attack trials; exits 2 when any attack was detected.
    Attack {
        /// Repeat to select kinds; all kinds by default.
        #[arg(long = "kind")]
        kinds: Vec<AttackKind>,
        /// First trial seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trials per kind.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Benign accesses before each attack.
        #[arg(long, default_value_t = 150)]
        background: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic trace file (gzip when the name ends in .gz).
    GenTrace {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// sequential, uniform, pointer-chase, zipf:<s> or strided:<bytes>.
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long)]
        footprint: Option<String>,
        #[arg(long)]
        accesses: Option<u64>,
        #[arg(long)]
        read_fraction: Option<f64>,
        #[arg(long)]
        accesses_per_instruction: Option<f64>,
        #[arg(long)]
        enclave: Option<u32>,
    },
}

fn dispatch(cmd: Cmd) -> anyhow::Result<Status> {
    match cmd {
        Cmd::Run { config, seed, out, model } => commands::run(commands::RunArgs { config, seed, out, model }),
        Cmd::Compare {
            config,
            seed,
            out,
            models,
            preset,
        } => commands::compare(commands::CompareArgs {
            config,
            seed,
            out,
            models,
            preset,
        }),
        Cmd::Storage {
            config,
            total,
            epc_protected,
            curve,
            out,
        } => commands::storage(commands::StorageArgs {
            config,
            total,
            epc_protected,
            curve,
            out,
        }),
        Cmd::Attack {
            kinds,
            seed,
            seeds,
            background,
            out,
        } => commands::attack(commands::AttackArgs {
            kinds,
            seed,
            seeds,
            background,
            out,
        }),
        Cmd::GenTrace {
            config,
            out,
            seed,
            pattern,
            footprint,
            accesses,
            read_fraction,
            accesses_per_instruction,
            enclave,
        } => commands::gen_trace(commands::GenTraceArgs {
            config,
            out,
            seed,
            pattern,
            footprint,
            accesses,
            read_fraction,
            accesses_per_instruction,
            enclave,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.cmd) {
        Ok(Status::Benign) => ExitCode::SUCCESS,
        Ok(Status::SecurityEvent) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
