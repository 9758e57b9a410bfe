use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Spectral submanifolds, travelling waves and reduced models for 2D channel flows.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    /// Run configuration (JSON).
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for block-parallel assembly and eigensolves.
    #[arg(long)]
    threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, default_value = "info")]
    log_level: log::LevelFilter,
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::new().filter_level(args.log_level).format_timestamp_millis().init();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let outcome = channel_ssm::cli::load_config(&args.config)
        .and_then(|cfg| channel_ssm::cli::run(&cfg, args.output_dir.as_deref()));
    match outcome {
        Ok(o) => {
            if o.exit_code == 0 {
                log::info!("wrote {}", o.output_dir.join("manifest.json").display());
            }
            ExitCode::from(o.exit_code as u8)
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
