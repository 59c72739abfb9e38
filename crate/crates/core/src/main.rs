use std::io;

use anyhow::{bail, Context};

/// Size the global worker pool from `NDE_FORGE_THREADS` when it is set.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("NDE_FORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("NDE_FORGE_THREADS={raw:?} is not a thread count"))?;
    if n == 0 {
        bail!("NDE_FORGE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("building the worker pool")?;
    Ok(())
}

fn main() {
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        std::process::exit(nde_forge::cli::EXIT_USAGE);
    }
    let code = nde_forge::cli::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
