//! Runs a JSON configuration through the library entry point, as the binary does.
//!
//! `cargo run --release --example run_config -- examples/configs/ssm_laminar.json out/`

use std::path::PathBuf;

fn main() -> channel_ssm::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = PathBuf::from(args.next().unwrap_or_else(|| "crates/core/examples/configs/ssm_laminar.json".into()));
    let out = args.next().map(PathBuf::from);
    let cfg = channel_ssm::cli::load_config(&config)?;
    let outcome = channel_ssm::cli::run(&cfg, out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&outcome.manifest["summary"]).unwrap_or_default());
    println!("exit code {}, outputs in {}", outcome.exit_code, outcome.output_dir.display());
    Ok(())
}
