//! `ckp`: one verb per operation, `ckp <verb> <kind>[:<entry>] [key=value]... [--flag]...`.

mod args;
mod commands;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "ckp",
    version,
    about = "Automate, record and replay benchmarking experiments",
    arg_required_else_help = true,
    propagate_version = true
)]
pub struct Cli {
    /// Print exactly one JSON object on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// More diagnostics on stderr (repeat for more)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub verb: Verb,
}

/// `<kind>[:<entry>]` and `key=value` arguments.
#[derive(Debug, Args)]
pub struct Target {
    /// `<kind>[:<uid-or-alias>]`
    #[arg(value_name = "KIND[:ENTRY]")]
    pub target: String,
    /// Extra `key=value` arguments
    #[arg(value_name = "KEY=VALUE")]
    pub pairs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Write the document to this file instead of stdout
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Detection {
    /// Extra directory to search recursively (repeatable)
    #[arg(long = "search-dir", value_name = "DIR")]
    pub search_dirs: Vec<PathBuf>,
    /// Detect again instead of trusting cached installations
    #[arg(long)]
    pub refresh: bool,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Create an entry; `key=value` pairs become string meta fields
    Add {
        #[command(flatten)]
        t: Target,
        /// JSON file with the meta document (`-` for stdin)
        #[arg(long, value_name = "FILE")]
        meta: Option<PathBuf>,
        /// Tag to attach (repeatable)
        #[arg(long = "tag", value_name = "TAG")]
        tags: Vec<String>,
        /// Directory whose files are copied into the entry
        #[arg(long, value_name = "DIR")]
        payload: Option<PathBuf>,
        /// Repository to add to (default: the first registered)
        #[arg(long)]
        repo: Option<String>,
    },
    /// List entries of a kind; the entry part may use `*`; filter with tag=<tag>
    Find {
        #[command(flatten)]
        t: Target,
    },
    /// Remove an entry
    Rm {
        #[command(flatten)]
        t: Target,
    },
    /// Print an entry and its meta; experiments also get an integrity check
    Show {
        #[command(flatten)]
        t: Target,
    },
    /// Detect installations of soft:<name> and cache them
    Detect {
        #[command(flatten)]
        t: Target,
        /// Extra directory to search recursively (repeatable)
        #[arg(long = "search-dir", value_name = "DIR")]
        search_dirs: Vec<PathBuf>,
    },
    /// Resolve soft:<name> under min=, max= or exact= constraints
    Resolve {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        d: Detection,
    },
    /// Emit the environment script for a pipeline's dependencies or one soft
    Envscript {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        d: Detection,
        #[command(flatten)]
        o: Output,
    },
    /// Install package:<recipe> into prefix=<dir> and register it
    Install {
        #[command(flatten)]
        t: Target,
        /// Per-step timeout in seconds
        #[arg(long, value_name = "SECONDS")]
        step_timeout: Option<f64>,
    },
    /// Run pipeline:<name>; choice overrides are given as key=value
    Run {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        d: Detection,
        /// Keep the scratch directory after a successful run
        #[arg(long)]
        keep_scratch: bool,
    },
    /// Explore the tuning space of pipeline:<name>
    Explore {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        d: Detection,
        /// exhaustive or random (overrides the pipeline's tuning section)
        #[arg(long)]
        strategy: Option<String>,
        /// Seed for random sampling
        #[arg(long)]
        seed: Option<u64>,
        /// Number of points for random sampling
        #[arg(long)]
        sample_count: Option<usize>,
        /// Run points concurrently (timing-insensitive pipelines only)
        #[arg(long)]
        parallel: bool,
    },
    /// Re-execute experiment:<uid> with its recorded choices
    Replay {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        d: Detection,
    },
    /// Compare experiment:<reference> with replay=<uid>; tolerances as tol=<rule> or tol.<metric>=<rule>
    Compare {
        #[command(flatten)]
        t: Target,
    },
    /// Check an archival manifest given as manifest=<file>
    CheckArchival {
        /// `manifest=<file>`
        #[arg(value_name = "KEY=VALUE")]
        pairs: Vec<String>,
    },
    /// Export experiment records as CSV; columns=<a,b,...>, filters tag=, exploration=, pipeline=, status=
    Table {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        o: Output,
    },
    /// Export plot series of experiment:<exploration> with x=<choice> y=<metric>:<stat>
    PlotData {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        o: Output,
    },
    /// Render the validation report experiment:<uid> as text
    Report {
        #[command(flatten)]
        t: Target,
        #[command(flatten)]
        o: Output,
    },
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn,ckp_core::autotune=info",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn run(argv: Vec<OsString>) -> i32 {
    let json_mode = argv.iter().skip(1).any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = e.exit_code();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion if json_mode => {
                    println!("{}", serde_json::json!({ "help": e.to_string() }));
                }
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => print!("{e}"),
                _ if json_mode => {
                    let err = CliError::usage(e.to_string().trim_end().to_owned());
                    println!("{}", err.to_json());
                }
                _ => eprint!("{e}"),
            }
            return if code == 0 { 0 } else { EXIT_USAGE };
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli.verb) {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                print!("{}", out.text);
                if !out.text.is_empty() && !out.text.ends_with('\n') {
                    println!();
                }
            }
            0
        }
        Err(e) => {
            if cli.json {
                println!("{}", e.to_json());
            } else {
                eprintln!("error[{}]: {}", e.code, e.message);
                if let Some(v) = e.extra.get("experiment") {
                    eprintln!("experiment: {}", v.as_str().unwrap_or_default());
                }
            }
            e.exit
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()) as u8)
}
