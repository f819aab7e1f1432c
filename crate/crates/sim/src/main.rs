use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lplr_sim::config::ExperimentKind;
use lplr_sim::experiments::Summary;
use lplr_sim::output::write_outcome;
use lplr_sim::report::{comparison_table, load_summary};
use lplr_sim::{run_experiment, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "lplr", version, about = "Private contextual bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Replace the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that receives `<name>/` (default: the config's, else `runs`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Switch all privacy noise off. Refused when the config requires privacy.
    #[arg(long, global = true)]
    zero_noise: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run { config: PathBuf },
    /// Run the mechanism checks; exit 2 if any fails.
    Selftest,
    /// Merge summaries into one comparison table.
    Report {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
}

const SELFTEST: &str = r#"{"name": "selftest", "kind": "mechanism_selftest"}"#;

fn print_gates(summary: &Summary) {
    for (gate, pass) in &summary.gates {
        println!("{:<28} {}", gate, if *pass { "pass" } else { "FAIL" });
    }
    for (key, fit) in &summary.slopes {
        println!("slope {key:<40} {:.4} (r2 {:.3})", fit.slope, fit.r2);
    }
    for note in &summary.notes {
        println!("note: {note}");
    }
}

fn run(cli: &Cli, mut config: ExperimentConfig) -> anyhow::Result<ExitCode> {
    config.apply(&Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        zero_noise: cli.zero_noise,
    })?;
    let outcome = run_experiment(&config, cli.threads)?;
    let root = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let dir = write_outcome(&outcome, &root)?;
    println!("{} ({}) -> {}", config.name, outcome.summary.config_hash, dir.display());
    if config.kind == ExperimentKind::MechanismSelftest {
        for check in outcome.summary.checks.iter().filter(|c| c.z.is_some() || !c.pass) {
            let z = check.z.map(|z| format!("z = {z:+.2}")).unwrap_or_default();
            println!("{:<4} {:<60} {z}", if check.pass { "ok" } else { "FAIL" }, check.name);
        }
    }
    print_gates(&outcome.summary);
    if config.kind == ExperimentKind::MechanismSelftest && !outcome.summary.passed() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => ExperimentConfig::load(config)
            .map_err(anyhow::Error::from)
            .and_then(|c| run(&cli, c)),
        Command::Selftest => ExperimentConfig::from_json(SELFTEST)
            .map_err(anyhow::Error::from)
            .and_then(|c| run(&cli, c)),
        Command::Report { summaries } => summaries
            .iter()
            .map(|p| load_summary(p).with_context(|| format!("reading {}", p.display())))
            .collect::<anyhow::Result<Vec<_>>>()
            .map(|all| {
                print!("{}", comparison_table(&all));
                ExitCode::SUCCESS
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
