use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use aep_core::sim::{self, Injection, Scenario, TraceSpec};
use anyhow::Context;
use clap::{Parser, Subcommand};

/// Crowdshipping simulator with rule-based agent perception.
#[derive(Debug, Parser)]
#[command(name = "aepsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a multi-agent scenario and write agents.jsonl, pipeline.jsonl and report.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a GPS trace through one perception pipeline and print event counts.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        /// Directory of .epl files.
        #[arg(long)]
        rules: PathBuf,
        /// JSON file with initial beliefs and scripted domain events.
        #[arg(long)]
        inject: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Parse and validate a rule directory and print its dependency graph.
    CheckRules { dir: PathBuf },
    /// Generate a synthetic GPS trace CSV from a JSON spec.
    GenTrace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let mut stdout = stdout.lock();
    match cmd {
        Command::Run { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let started = Instant::now();
            let output = sim::run(&s)?;
            let elapsed = started.elapsed();
            output.write_to(&out)?;
            let r = &output.report;
            writeln!(
                stdout,
                "ticks {} agents {} auctions {}/{}/{} (opened/resolved/failed) handovers {} deliveries {}",
                r.ticks, r.agents, r.auctions.opened, r.auctions.resolved, r.auctions.failed, r.handovers, r.deliveries
            )?;
            for (agent, balance) in &r.ledger {
                writeln!(stdout, "balance {agent} {balance:.2}")?;
            }
            eprintln!("runtime {:.3} s", elapsed.as_secs_f64());
        }
        Command::Replay {
            trace,
            rules,
            inject,
            json,
        } => {
            let injection = match inject {
                Some(p) => Injection::load(&p)?,
                None => Injection::default(),
            };
            let started = Instant::now();
            let report = sim::replay(&trace, Some(&rules), &injection)?;
            let secs = started.elapsed().as_secs_f64();
            if json {
                writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                write!(stdout, "{}", report.table())?;
            }
            let events: u64 = report.sensed.values().sum();
            eprintln!(
                "{events} events in {secs:.3} s ({:.0} events/s)",
                events as f64 / secs.max(1e-9)
            );
        }
        Command::CheckRules { dir } => {
            let report = sim::check_rules(&dir)?;
            writeln!(stdout, "{} rules in {} files", report.rules.len(), report.files.len())?;
            write!(stdout, "{}", report.graph())?;
        }
        Command::GenTrace { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: TraceSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let fixes = sim::gen_trace(&spec)?;
            let file = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = std::io::BufWriter::new(file);
            sim::write_trace(&fixes, &mut w)?;
            w.flush()?;
            writeln!(stdout, "{} fixes written to {}", fixes.len(), out.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
