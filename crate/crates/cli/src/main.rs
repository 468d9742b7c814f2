use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use llflow_cli::{config, workflows, Workflow};

/// Approximate blowup profiles for the equivariant Landau-Lifshitz flow.
///
/// Exit status: 0 when every check passes, 1 when a check fails, 2 for an invalid
/// config, 3 for a numerical failure.
#[derive(Parser)]
#[command(name = "llflow", version)]
struct Cli {
    workflow: Workflow,
    /// TOML config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a dotted key, e.g. --set params.n=3. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref(), &cli.set, cli.out.as_deref())
        .and_then(|(cfg, table)| workflows::run(cli.workflow, &cfg, &table));
    match result {
        Ok(rep) => {
            for c in &rep.checks {
                println!("{} {} {:.6e} {} {:.6e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.relation, c.threshold);
            }
            println!("wrote {}", rep.config.output.dir.display());
            ExitCode::from(u8::from(!rep.pass))
        }
        Err(e) => {
            eprintln!("llflow {}: {e}", cli.workflow.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
