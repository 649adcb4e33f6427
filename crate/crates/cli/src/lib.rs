//! Command-line front end for the allocation engines.
//!
//! Every subcommand is a thin wrapper over library calls, so any report can
//! be reproduced by calling the same functions with the same config.

pub mod cli;
pub mod commands;
pub mod error;
pub mod input;
pub mod report;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use cli::Cli;
pub use error::{CliError, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK};
pub use input::{load_covariates, OutputFormat, RunConfig};
pub use report::{Report, SCHEMA_VERSION};

/// Parses `args` and runs the command. Errors go to `err` as JSON.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match commands::run(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let body = serde_json::json!({ "error": e.report() });
            let _ = writeln!(err, "{body}");
            e.exit_code()
        }
    }
}
