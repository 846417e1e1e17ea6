use clap::Parser;

use capa_cli::args::Cli;
use capa_cli::{commands, EXIT_CONFIG};

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("CAPA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CAPA_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("capa: config error: {e}");
        std::process::exit(EXIT_CONFIG);
    }
    if let Err(e) = commands::run(cli) {
        eprintln!("capa: {e}");
        std::process::exit(e.exit_code());
    }
}
