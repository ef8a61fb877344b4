use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use fsml::config::{mode_name, ExperimentConfig, Mode};
use fsml::run::{run, select_seeds};

/// Few-shot crop classification experiments.
#[derive(Parser, Debug)]
#[command(name = "fsml", version)]
struct Args {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Runs this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if let Ok(n) = std::env::var("FSML_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: FSML_THREADS: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: FSML_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let mode = match cfg.resolve_mode(args.mode) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let problems = cfg.problems(mode);
    if !problems.is_empty() {
        eprintln!("error: invalid config for mode {}:", mode_name(mode));
        for p in problems {
            eprintln!("  {p}");
        }
        return ExitCode::from(2);
    }
    match run(&cfg, mode, &select_seeds(&cfg, args.seed), &args.out) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
