use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use gridfs::harness::{self, render_text, write_records, Cluster, HarnessError, Scenario, ScenarioOptions, Shape};
use gridfs::wire::SecurityMode;

/// Spawns a loopback cluster and runs end-to-end scenarios against it.
#[derive(Parser)]
#[command(name = "gridfs-harness", version)]
struct Args {
    /// ms (master-slaves), hier (hierarchical) or graph (complete graph).
    #[arg(long, default_value = "hier")]
    topology: String,
    #[arg(long, default_value_t = 6)]
    nodes: usize,
    /// transfer, crypt, pi, resume or all.
    #[arg(long, default_value = "all")]
    scenario: String,
    #[arg(long, default_value_t = 3)]
    repeats: u32,
    /// Where to write one hex-encoded record per line.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also print a table to stdout.
    #[arg(long)]
    report_text: bool,
    /// Transfer size in bytes.
    #[arg(long, default_value_t = 16 << 20)]
    bytes: u64,
    /// none, secure or semi.
    #[arg(long, default_value = "secure")]
    security: String,
    /// The daemon executable; defaults to `gridfs` next to this one.
    #[arg(long)]
    binary: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let usage = |msg: String| {
        eprintln!("gridfs-harness: {msg}");
        ExitCode::from(2)
    };
    let Some(shape) = Shape::parse(&args.topology) else {
        return usage(format!("unknown topology `{}`", args.topology));
    };
    let Some(scenario) = Scenario::parse(&args.scenario) else {
        return usage(format!("unknown scenario `{}`", args.scenario));
    };
    let security = match args.security.as_str() {
        "none" => SecurityMode::NonSecure,
        "secure" => SecurityMode::Secure,
        "semi" => SecurityMode::SemiSecure,
        other => return usage(format!("unknown security mode `{other}`")),
    };
    let plan = match harness::plan(shape, args.nodes) {
        Ok(p) => p,
        Err(e) => return usage(e.to_string()),
    };
    let binary = args.binary.clone().unwrap_or_else(harness::sibling_binary);
    let mut cluster = match Cluster::spawn(plan, &binary) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gridfs-harness: {e}");
            return ExitCode::from(1);
        }
    };
    let opts = ScenarioOptions {
        repeats: args.repeats.max(1),
        security,
        transfer_bytes: args.bytes,
        ..ScenarioOptions::default()
    };
    let (records, failure) = match harness::run_scenario(&mut cluster, scenario, &opts) {
        Ok(r) => (r, None),
        Err(HarnessError::ScenarioFailed {
            records,
            scenario,
            assertion,
        }) => (records, Some(format!("scenario {scenario} failed: {assertion}"))),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    cluster.teardown();

    if let Some(path) = &args.report {
        if let Err(e) = std::fs::write(path, write_records(&records)) {
            eprintln!("gridfs-harness: cannot write {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    if args.report_text || args.report.is_none() {
        print!("{}", render_text(&records));
    }
    match failure {
        Some(msg) => {
            eprintln!("gridfs-harness: {msg}");
            ExitCode::from(1)
        }
        None => ExitCode::SUCCESS,
    }
}
