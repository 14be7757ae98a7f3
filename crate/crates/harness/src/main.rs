use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cachefs::raftlog::{verify, DirStore, RaftLog, Verification, DEFAULT_ROLLOVER};
use cachefs_harness::check::second_level_refs_resolve;
use cachefs_harness::runner::run_scenario;
use cachefs_harness::scenario::Scenario;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cachefs-sim", about = "Run cachefs scenarios in the simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and check every invariant.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the operation trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write `key value` metrics here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write node logs and the object store under this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Check the framing, checksums and references of a node directory.
    VerifyLog { node_dir: PathBuf },
}

fn run(scenario: PathBuf, seed: Option<u64>, trace: Option<PathBuf>, metrics: Option<PathBuf>, dump: Option<PathBuf>) -> Result<bool> {
    let s = Scenario::load(&scenario)?;
    let report = run_scenario(&s, seed);
    print!("{}", report.text());
    if let Some(p) = trace {
        std::fs::write(&p, report.trace_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = metrics {
        std::fs::write(&p, report.metrics_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = dump {
        report.dump(&p).with_context(|| format!("dumping to {}", p.display()))?;
    }
    Ok(report.passed())
}

fn verify_log(dir: PathBuf) -> Result<bool> {
    let wal = dir.join("wal.log");
    let bytes = std::fs::read(&wal).with_context(|| format!("reading {}", wal.display()))?;
    match verify(&bytes) {
        Verification::Ok { entries } => println!("wal ok: {entries} entries, {} bytes", bytes.len()),
        Verification::Corrupt { index, offset, defect } => {
            println!("wal corrupt at entry {index} (offset {offset}): {defect:?}");
            return Ok(false);
        }
    }
    let store = DirStore::open(&dir).with_context(|| format!("opening {}", dir.display()))?;
    let log = match RaftLog::open(store, DEFAULT_ROLLOVER) {
        Ok(l) => l,
        Err(e) => {
            println!("replay failed: {e}");
            return Ok(false);
        }
    };
    match second_level_refs_resolve(&log) {
        Ok(n) => println!("second-level ok: {n} references resolve"),
        Err(e) => {
            println!("second-level reference broken: {e}");
            return Ok(false);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run { scenario, seed, trace, metrics, dump } => run(scenario, seed, trace, metrics, dump),
        Cmd::VerifyLog { node_dir } => verify_log(node_dir),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
