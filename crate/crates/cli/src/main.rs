use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adrsq_core::pipeline::{convergence_csv, emit_convergence, load_scenario, run_tb_pipeline, RunOptions};
use clap::{Args, Parser, Subcommand};

/// Runs square-function diagnostics described by a scenario file.
///
/// Exit status: 0 when every stage passes, 2 when a stage fails or the Tb
/// hypotheses are not met, 1 on a hard error.
#[derive(Parser)]
#[command(name = "adrsq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Quadrature points per box edge = 2^refine (overrides the scenario)
    #[arg(long)]
    refine: Option<u32>,
    /// Worker threads; 1 runs sequentially
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    VerifyGeometry(Common),
    BuildGrid(Common),
    VerifyGrid(Common),
    RunT1(Common),
    RunTb(Common),
    Tail(Common),
    All(Common),
    /// Reruns T1 quantities at doubled resolutions and writes convergence.csv
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| e.error)?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32, Box<dyn std::error::Error>> {
    let (name, common, levels) = match &cli.command {
        Command::VerifyGeometry(c) => ("verify-geometry", c, None),
        Command::BuildGrid(c) => ("build-grid", c, None),
        Command::VerifyGrid(c) => ("verify-grid", c, None),
        Command::RunT1(c) => ("run-t1", c, None),
        Command::RunTb(c) => ("run-tb", c, None),
        Command::Tail(c) => ("tail", c, None),
        Command::All(c) => ("all", c, None),
        Command::Convergence { common, levels } => ("convergence", common, Some(*levels)),
    };
    if let Some(n) = common.threads {
        if !adrsq_core::par::set_threads(n) {
            log::warn!("thread pool already configured; --threads {n} ignored");
        }
    }
    let scenario = load_scenario(&common.scenario)?;
    std::fs::create_dir_all(&common.out)?;
    if let Some(levels) = levels {
        let rows = emit_convergence(&scenario, levels, common.refine)?;
        write_atomic(&common.out, "convergence.csv", &convergence_csv(&rows)?)?;
        return Ok(0);
    }
    let mut opts = RunOptions::for_command(name)?;
    opts.refine = common.refine;
    let outcome = run_tb_pipeline(&scenario, &opts)?;
    for t in &outcome.tables {
        write_atomic(&common.out, &format!("{}.csv", t.name), &t.to_csv()?)?;
    }
    let mut json = serde_json::to_vec_pretty(&outcome.report)?;
    json.push(b'\n');
    write_atomic(&common.out, "report.json", &json)?;
    for s in &outcome.stages {
        println!("{:<14} {:?}", s.name, s.status);
    }
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADRSQ_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
