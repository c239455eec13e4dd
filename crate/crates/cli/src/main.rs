mod cmd;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Conditional diffusion generation of LiDAR objects.
#[derive(Debug, Parser)]
#[command(name = "lidargen", version)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "LIDARGEN_THREADS")]
    threads: Option<usize>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration (version 1).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent: desk or xs.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural dataset with the simulated scanner.
    Synth(cmd::synth::SynthArgs),
    /// Train a single-class denoiser or the evaluation feature extractor.
    Train(cmd::train::TrainArgs),
    /// Generate one object per condition with a trained denoiser.
    Sample(cmd::sample::SampleArgs),
    /// Compare generated objects with real ones.
    Eval(cmd::eval::EvalArgs),
    /// Write SVG previews and PLY files for every object of a split.
    Render(cmd::render::RenderArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<lidargen::Error>() {
        Some(le) if le.is_contract() => 1,
        _ => 2,
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => cmd::synth::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Sample(a) => cmd::sample::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::Render(a) => cmd::render::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
