use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hvsim::fuzzgen;
use hvsim::scenario::{self, RunConfig};

/// Hypervisor-extension machine model: scenario runner and differential fuzzer.
#[derive(Parser)]
#[command(name = "hvsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenario files and check their expectations.
    Run {
        /// Scenario files to execute, in order.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Re-check every fresh (non-TLB-hit) translation against the
        /// reference walker and fail on disagreement.
        #[arg(long)]
        oracle_check: bool,
        /// TLB capacity in entries.
        #[arg(long, default_value_t = 16)]
        tlb_size: usize,
        /// Disable the TLB entirely (every translation walks).
        #[arg(long)]
        no_tlb: bool,
        /// Write the JSON-lines trace to this file instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate random translation setups and compare the machine
    /// against the reference walker.
    Fuzz {
        /// Number of random machine images to generate.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Addresses probed per image.
        #[arg(long, default_value_t = 32)]
        addrs: usize,
        /// RNG seed; identical seeds reproduce identical runs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { files, oracle_check, tlb_size, no_tlb, trace } => {
            run_scenarios(files, oracle_check, tlb_size, no_tlb, trace)
        }
        Command::Fuzz { cases, addrs, seed } => fuzz(cases, addrs, seed),
    }
}

fn run_scenarios(
    files: Vec<PathBuf>,
    oracle_check: bool,
    tlb_size: usize,
    no_tlb: bool,
    trace_path: Option<PathBuf>,
) -> ExitCode {
    let cfg = RunConfig { tlb_enabled: !no_tlb, tlb_capacity: tlb_size, oracle_check };
    let mut trace_out = String::new();
    let mut any_fail = false;

    for path in &files {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("{}: cannot read: {e}", path.display());
                return ExitCode::from(2);
            }
        };
        let parsed = match scenario::parse(&name, &text) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return ExitCode::from(2);
            }
        };
        let report = scenario::run(&parsed, &cfg);
        trace_out.push_str(&report.trace.to_jsonl());
        if report.pass {
            eprintln!("{}: pass", report.name);
        } else {
            any_fail = true;
            eprintln!("{}: FAIL ({} expectation failure(s))", report.name, report.failures.len());
            for f in &report.failures {
                eprintln!("  {}:{}: {}", path.display(), f.line, f.message);
            }
        }
    }

    match trace_path {
        Some(p) => {
            if let Err(e) = fs::write(&p, trace_out) {
                eprintln!("{}: cannot write trace: {e}", p.display());
                return ExitCode::from(2);
            }
        }
        None => {
            let mut out = std::io::stdout().lock();
            if out.write_all(trace_out.as_bytes()).is_err() {
                return ExitCode::from(2);
            }
        }
    }

    if any_fail {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn fuzz(cases: usize, addrs: usize, seed: u64) -> ExitCode {
    let outcome = fuzzgen::run(cases, addrs, seed);
    eprintln!(
        "fuzz: {} images, {} queries, seed {:#x}",
        outcome.images, outcome.queries, outcome.seed
    );
    eprintln!(
        "fuzz: max walk accesses single-stage {} (bound 3), two-stage {} (bound 15)",
        outcome.max_single_stage_accesses, outcome.max_two_stage_accesses
    );
    if outcome.bound_violations > 0 {
        eprintln!("fuzz: {} access-bound violation(s)", outcome.bound_violations);
    }
    if outcome.disagreements.is_empty() && outcome.bound_violations == 0 {
        eprintln!("fuzz: all queries agree with the reference walker");
        ExitCode::SUCCESS
    } else {
        for d in outcome.disagreements.iter().take(20) {
            eprintln!(
                "fuzz: DISAGREE [{}] expected {}, got {}",
                d.context, d.expected, d.actual
            );
        }
        eprintln!("fuzz: {} disagreement(s)", outcome.disagreements.len());
        ExitCode::from(3)
    }
}
