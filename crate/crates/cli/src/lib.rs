//! Configuration, file formats, plots and the command line of the
//! persidskii toolkit. The numerics live in `persidskii-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod plot;

pub use commands::{execute, Command, Outcome};
pub use config::Config;
pub use error::{CliError, Result};
