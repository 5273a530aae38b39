//! `xyscan`: data generation, training, inference, evaluation, gradient
//! verification, scan benchmarking, and cost counting for the slice-and-scan
//! deblurring network.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use settings::Settings;
use xyscan_core::error::Error;

#[derive(Parser)]
#[command(name = "xyscan", version, about = "slice-and-scan state-space deblurring")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set model.base_channels=32.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Master seed for model init, training order, and data generation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "xyscan-out")]
    out: PathBuf,

    /// Training steps (shorthand for --set train.steps=N).
    #[arg(long, global = true)]
    steps: Option<u64>,

    /// Spatial extent as HxW for data generation, benchmarks, and counting.
    #[arg(long, global = true, value_parser = parse_size)]
    size: Option<(usize, usize)>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired blurred/sharp PNG directories.
    MakeData,
    /// Train on synthetic pairs or a data directory (--set data.dir=PATH).
    Train,
    /// Restore blurred PNGs through a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG files or directories of PNGs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// PSNR/SSIM over two directories of identically named PNGs.
    Eval {
        restored: PathBuf,
        reference: PathBuf,
    },
    /// Run the full gradient verification suite.
    Gradcheck,
    /// Benchmark scanning strategies and report misalignment metrics.
    BenchScan,
    /// Print parameter and MAC counts plus the fusion ablation comparison.
    Count,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.parse().map_err(|_| format!("bad height `{h}`"))?;
    let w = w.parse().map_err(|_| format!("bad width `{w}`"))?;
    Ok((h, w))
}

fn main() -> ExitCode {
    // cap rayon's worker count before any parallel work
    if let Ok(threads) = std::env::var("XYSCAN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; anything else is usage error
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let settings = match Settings::resolve(
        cli.config.as_deref(),
        &cli.sets,
        cli.seed,
        cli.steps,
        cli.size,
    ) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match &cli.command {
        Command::MakeData => commands::make_data(&settings, &cli.out),
        Command::Train => commands::train(&settings, &cli.out),
        Command::Infer { ckpt, inputs } => commands::infer(&settings, ckpt, inputs, &cli.out),
        Command::Eval { restored, reference } => {
            commands::eval(&settings, restored, reference, &cli.out)
        }
        Command::Gradcheck => {
            return match commands::gradcheck_cmd(&settings, &cli.out) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(2),
                Err(e) => exit_for(&e),
            }
        }
        Command::BenchScan => commands::bench_scan(&settings, &cli.out),
        Command::Count => commands::count(&settings, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } | Error::Shape(_) | Error::Contract(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}
