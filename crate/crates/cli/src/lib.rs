//! Library side of the `amod` command: run configuration, commands and
//! exit-code mapping.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_eval, cmd_extract, cmd_synth, cmd_train, cmd_visualize, SplitSel};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Caps the global worker pool; `None` keeps one worker per core.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|n| *n > 0) {
        // A pool may already exist in tests; the first setting wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
