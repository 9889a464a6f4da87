//! Command-line driver: dataset ingestion, extraction of attention and
//! contribution matrices, and the statistics and figures built on them.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod dataset;
pub mod kind;
pub mod report;
pub mod svg;

pub use args::{Cli, Command};
pub use kind::Kind;

/// Runs one parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract(a) => commands::extract::run(&a),
        Command::Histogram(a) => commands::histogram::run(&a),
        Command::Com(a) => commands::com::run(&a),
        Command::Correlate(a) => commands::correlate::run(&a),
        Command::Maps(a) => commands::maps::run(&a),
    }
}

/// Runs `f` on a pool with `threads` workers, or rayon's default when 0.
pub fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> anyhow::Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?;
    Ok(pool.install(f))
}
