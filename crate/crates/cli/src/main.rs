use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use xdecomp::ndtensor::Fault;
use xdecomp::selfcheck::{run_all, SelfCheckOptions};

mod commands;
mod manifest;
mod selfcheck;

use commands::{Global, Preset};

/// Synthetic X-ray in-depth decomposition: generate phantoms, render
/// DRRs, train and evaluate the decomposition network.
#[derive(Parser)]
#[command(name = "xdecomp", version)]
struct Cli {
    /// Seed for all randomness; overrides the seed in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 makes every result bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run the invariant checks of the command on its outputs.
    #[arg(long, global = true)]
    verify: bool,
    /// Output directory. Nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom volumes and their clipped sub-volumes.
    Gen {
        /// Dataset config (JSON). Defaults to three desk-scale thorax phantoms.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Render DRRs of generated volumes into a sample dataset.
    Render {
        /// Output directory of `gen`.
        #[arg(long)]
        volumes: PathBuf,
        /// Trajectory config (JSON). Defaults to the one in the dataset config.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Train under the configured protocol and evaluate on held-out samples.
    Train {
        /// Output directory of `render`.
        #[arg(long)]
        data: PathBuf,
        /// Training config (JSON). Defaults to the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Network config (JSON). Defaults to the desk network sized to the data.
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        preset: Preset,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        /// Checkpoint (.xdc) written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory of `render`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Split one projection (.xdt, or .pgm with its .json sidecar) into components.
    Decompose {
        /// Checkpoint (.xdc) written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Projection to decompose.
        #[arg(long)]
        image: PathBuf,
    },
    /// Run the invariant suite.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn selfcheck(g: &Global, inject_fault: bool) -> Result<bool> {
    let opts = SelfCheckOptions {
        fault: inject_fault.then_some(Fault::FlipReluBackward),
    };
    let mut results = run_all(&opts);
    results.extend(selfcheck::run_cli_checks());
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {}::{}  {}", r.module, r.name, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    if let Some(out) = &g.out {
        let mut m = manifest::RunManifest::new(
            "selfcheck",
            g.seed,
            g.threads,
            serde_json::json!({"inject_fault": inject_fault}),
        );
        m.outputs.push("selfcheck.json".into());
        m.write(out)?;
        std::fs::write(out.join("selfcheck.json"), serde_json::to_vec_pretty(&results)?)?;
    }
    Ok(passed == results.len())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let g = Global {
        seed: cli.seed,
        threads: cli.threads,
        verify: cli.verify,
        out: cli.out,
        quiet: false,
    };
    match cli.command {
        Command::Gen { spec } => commands::gen(&g, spec.as_deref())?,
        Command::Render { volumes, trajectory } => commands::render(&g, &volumes, trajectory.as_deref())?,
        Command::Train {
            data,
            config,
            network,
            preset,
        } => commands::train(&g, &data, config.as_deref(), network.as_deref(), preset)?,
        Command::Eval { checkpoint, data } => commands::eval(&g, &checkpoint, &data)?,
        Command::Decompose { checkpoint, image } => commands::decompose(&g, &checkpoint, &image)?,
        Command::Selfcheck { inject_fault } => return selfcheck(&g, inject_fault),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
