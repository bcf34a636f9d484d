use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qgraphon::config::{parse_config, resolve, CommandKind};
use qgraphon::runner;

/// Quantum graphon trajectory toolkit: finite-N and limit Belavkin
/// simulators, graphon cut norms, and the stability and chaos experiments.
#[derive(Parser)]
#[command(name = "qgraphon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results are identical for any value).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Two-class qubit feedback demo in matrix and Bloch form.
    Demo(CommonArgs),
    /// Coupled-noise two-graphon stability sweep.
    Stability(CommonArgs),
    /// Finite-N vs limit propagation-of-chaos table.
    Chaos(CommonArgs),
    /// Cut norm of a step kernel (exact or heuristic).
    Cutnorm(CommonArgs),
    /// Coupled graphon-Lindblad mean ODE.
    MeanOde(CommonArgs),
    /// One finite-N trajectory with observation record.
    Simulate(CommonArgs),
}

impl Command {
    fn kind(&self) -> CommandKind {
        match self {
            Command::Demo(_) => CommandKind::Demo,
            Command::Stability(_) => CommandKind::Stability,
            Command::Chaos(_) => CommandKind::Chaos,
            Command::Cutnorm(_) => CommandKind::Cutnorm,
            Command::MeanOde(_) => CommandKind::MeanOde,
            Command::Simulate(_) => CommandKind::Simulate,
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Demo(a)
            | Command::Stability(a)
            | Command::Chaos(a)
            | Command::Cutnorm(a)
            | Command::MeanOde(a)
            | Command::Simulate(a) => a,
        }
    }
}

fn fail(e: &qgraphon::Error) -> ExitCode {
    let payload = serde_json::json!({
        "error": e.to_string(),
        "exit_code": e.exit_code(),
    });
    eprintln!("{payload}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let kind = cli.command.kind();
    let args = cli.command.args();

    if let Some(threads) = args.threads {
        // Determinism does not depend on the pool size; this only bounds CPU.
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("{{\"error\": \"failed to build thread pool: {e}\"}}");
            return ExitCode::from(1);
        }
    }

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return fail(&qgraphon::Error::Io(e)),
    };
    let raw = match parse_config(&text) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if raw.command != kind {
        return fail(&qgraphon::Error::validation(
            "command",
            format!(
                "config says '{}' but the CLI subcommand is '{}'",
                raw.command.name(),
                kind.name()
            ),
        ));
    }
    let out_dir = raw
        .output
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| args.out.clone());
    let resolved = match resolve(&raw, args.seed) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match runner::run(&resolved, &out_dir) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::json!({
                    "command": kind.name(),
                    "out": out_dir,
                    "files": outcome.files.len(),
                })
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
