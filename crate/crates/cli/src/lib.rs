//! The `difftrack` command-line tool.
//!
//! [`run`] parses arguments and dispatches to a subcommand, writing normal
//! output and diagnostics to the given streams. It returns the process exit
//! code: 0 on success, 1 on any validation or runtime failure.

use std::ffi::OsString;
use std::io::Write;

use clap::{Parser, Subcommand};

pub mod args;
mod commands;

pub use commands::{compare::CompareArgs, gradcheck::GradcheckArgs, synth::SynthArgs, track::TrackArgs};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "DIFFTRACK_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "difftrack",
    version,
    about = "Differentiable deterministic streamline tractography"
)]
pub struct Cli {
    /// Worker threads (0 = all cores); DIFFTRACK_THREADS takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track streamlines through an FOD image.
    Track(TrackArgs),
    /// Compare streamline coordinate gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Hausdorff distances between index-paired streamlines of two files.
    Compare(CompareArgs),
    /// Write a synthetic FOD image with known peak directions.
    Synth(SynthArgs),
}

fn thread_count(flag: usize) -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a non-negative integer, got {v:?}")),
        Err(_) => Ok(flag),
    }
}

fn dispatch(cli: Cli, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> anyhow::Result<bool> {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(|| match cli.command {
        Command::Track(a) => commands::track::run(&a, out, err),
        Command::Gradcheck(a) => commands::gradcheck::run(&a, out, err),
        Command::Compare(a) => commands::compare::run(&a, out),
        Command::Synth(a) => commands::synth::run(&a, out),
    })
}

/// Runs the tool on `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match dispatch(cli, out, err) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
