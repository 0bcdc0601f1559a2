use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use icoap::{parse_scenario, run, Scenario};

#[derive(Parser)]
#[command(name = "icoap", version, about = "Run CoAP-over-ICN scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and print its metrics.
    Run {
        file: PathBuf,
        /// Print the event trace before the metrics.
        #[arg(long)]
        trace: bool,
        #[arg(long, value_enum, default_value_t = MetricsFormat::Table)]
        metrics: MetricsFormat,
    },
    /// Check a scenario file without running it.
    Validate { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricsFormat {
    Csv,
    Table,
}

fn load(path: &Path) -> Result<Scenario, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_scenario(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { file } => match load(&file) {
            Ok(s) => {
                println!(
                    "ok: {} levels, {} naps, {} servers, {} resources, {} clients, {} actions",
                    s.hierarchy.levels().len(),
                    s.naps.len(),
                    s.servers.len(),
                    s.resources.len(),
                    s.clients.len(),
                    s.script.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(1)
            }
        },
        Command::Run {
            file,
            trace,
            metrics,
        } => {
            let scenario = match load(&file) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(1);
                }
            };
            let out = run(&scenario);
            if trace {
                print!("{}", out.trace.render());
            }
            match metrics {
                MetricsFormat::Csv => print!("{}", out.metrics.to_csv()),
                MetricsFormat::Table => print!("{}", out.metrics.to_table()),
            }
            if out.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                for v in &out.violations {
                    eprintln!("invariant violation: {v}");
                }
                ExitCode::from(2)
            }
        }
    }
}
