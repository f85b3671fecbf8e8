use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gedmd_cli::bundled;
use gedmd_cli::config::RunConfig;
use gedmd_cli::error::{CliError, CliResult};
use gedmd_cli::runner;

#[derive(Parser)]
#[command(name = "gedmd", version, about = "Generator EDMD experiments from JSON configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration file or a bundled configuration by name.
    Run {
        config: String,
        /// Output directory (default: `out/<config name>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the base seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the bundled configurations.
    List {
        #[arg(long)]
        json: bool,
    },
}

fn load(arg: &str) -> CliResult<RunConfig> {
    if let Some(b) = bundled::find(arg) {
        return b.config();
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| CliError::Usage(format!("cannot read `{arg}`: {e} (and no bundled config has that name)")))?;
    RunConfig::from_json(&text)
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
            let manifest = runner::run(&cfg, &out, seed)?;
            for e in &manifest.experiments {
                println!("{}: {}", e.name, e.summary);
            }
            println!("artifacts in {}", out.display());
        }
        Command::List { json } => {
            let rows = bundled::listing()?;
            if json {
                let list: Vec<_> = rows
                    .iter()
                    .map(|(n, d)| serde_json::json!({ "name": n, "description": d }))
                    .collect();
                println!("{}", serde_json::to_string_pretty(&list)?);
            } else {
                let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
                for (n, d) in rows {
                    println!("{n:width$}  {d}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
