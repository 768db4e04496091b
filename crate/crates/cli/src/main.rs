//! `refloop` command-line entry point.
//!
//! Exit codes: 0 on success, 2 for usage or configuration problems, 3 when a
//! run aborts at runtime.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use refloop_core::context::load_history;
use refloop_core::orchestrator::{load_records, HISTORY_FILE, RECORDS_FILE};
use refloop_core::synthbench::{
    bench_config, emit_report, median_iterations, run_experiment, ConvergenceExperiment, FIXTURES,
};
use refloop_core::{
    IterationRecord, Orchestrator, Resumed, RunConfig, RunError, RunResult, SynthError, SyntheticSpace,
};

#[derive(Parser)]
#[command(name = "refloop", version, about = "Specification-driven refinement loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Initial artifact directory; not needed for synthetic fixtures.
        #[arg(long)]
        artifact: Option<PathBuf>,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue an interrupted run from its directory.
    Resume {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run seeded replicates on a synthetic fixture and write a CSV report.
    Bench {
        /// One of S1, S2, S3.
        #[arg(long)]
        fixture: String,
        #[arg(long)]
        replicates: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Print one iteration of a run as JSON.
    Inspect {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        at: u64,
    },
    /// Check a config file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Distribution,
    History,
    Feedback,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(_) | RunError::NoRun(_) | RunError::AlreadyExists(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::UnknownFixture(_) | SynthError::NoReplicates => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            artifact,
            out,
            seed,
        } => cmd_run(&config, artifact.as_deref(), &out, seed),
        Command::Resume { run } => cmd_resume(&run),
        Command::Bench {
            fixture,
            replicates,
            out,
            lambda,
        } => cmd_bench(&fixture, replicates, &out, lambda),
        Command::Inspect { run, what, at } => cmd_inspect(&run, what, at),
        Command::ValidateConfig { config } => load_config(&config).map(|_| println!("config ok")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Runtime(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_run(config: &Path, artifact: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let setup = cfg.build_setup(artifact).map_err(|e| Failure::Usage(e.to_string()))?;
    let orch = Orchestrator::create(setup, Some(out))?;
    drive(orch)
}

fn cmd_resume(run: &Path) -> Result<(), Failure> {
    match Orchestrator::resume_dir(run)? {
        Resumed::Finished(result) => {
            println!("run already finished");
            summarize(&result);
            Ok(())
        }
        Resumed::Running(orch) => {
            println!("resuming after t={}", orch.records().last().map_or(0, |r| r.t));
            drive(*orch)
        }
    }
}

fn drive(mut orch: Orchestrator) -> Result<(), Failure> {
    loop {
        let done = orch.step()?;
        if let Some(r) = orch.records().last() {
            print_iteration(r);
        }
        if done.is_some() {
            break;
        }
    }
    summarize(&orch.result()?);
    Ok(())
}

fn print_iteration(r: &IterationRecord) {
    println!(
        "t={:<4} best_delta={:.6} pool={:<3} cache_hit_rate={:.3}",
        r.t,
        r.best_delta,
        r.pool.len(),
        r.cache_hit_rate()
    );
}

fn summarize(result: &RunResult) {
    let r = &result.report;
    println!(
        "finished: {:?} after {} iterations, delta={:.6} mu={:.6} candidate={}",
        r.termination, r.iterations, r.final_delta, r.final_mu, r.final_candidate.id
    );
}

fn cmd_bench(fixture: &str, replicates: u64, out: &Path, lambda: Option<f64>) -> Result<(), Failure> {
    if replicates == 0 {
        return Err(Failure::Usage("--replicates must be at least 1".into()));
    }
    if !FIXTURES.contains(&fixture) {
        return Err(Failure::Usage(format!(
            "unknown fixture {fixture}; expected one of {}",
            FIXTURES.join(", ")
        )));
    }
    let space = SyntheticSpace::fixture(fixture)?;
    let mut config = bench_config(lambda.unwrap_or(refloop_core::SearchConfig::default().lambda));
    config.validate_knobs().map_err(|e| Failure::Usage(e.to_string()))?;
    config.synthetic_fixture = Some(fixture.to_string());
    let exp = ConvergenceExperiment {
        space,
        config,
        seeds: (0..replicates).collect(),
    };
    let rows = run_experiment(&exp)?;
    emit_report(&rows, out)?;
    let successes = rows.iter().filter(|r| r.success).count();
    let median = median_iterations(&rows).map_or_else(|| "n/a".to_string(), |m| format!("{m}"));
    println!(
        "{fixture}: {successes}/{} converged, median iterations {median}; report at {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(run: &Path, what: What, at: u64) -> Result<(), Failure> {
    let records_path = run.join(RECORDS_FILE);
    if !records_path.exists() {
        return Err(Failure::Usage(format!("no run found in {}", run.display())));
    }
    let records = load_records(&records_path)?;
    let record = records
        .iter()
        .find(|r| r.t == at)
        .ok_or_else(|| Failure::Usage(format!("iteration {at} not in run (last t={})", records.len())))?;
    let value = match what {
        What::Distribution => {
            let d = &record.distribution;
            json!({
                "t": record.t,
                "spec_version": record.spec_version,
                "total_mass": d.total_mass(),
                "masses": d.entries(),
            })
        }
        What::Feedback => {
            let eval = record
                .evaluations
                .iter()
                .find(|e| e.candidate == record.incumbent)
                .ok_or_else(|| Failure::Runtime(format!("t={at}: incumbent has no evaluation")))?;
            json!({
                "t": record.t,
                "candidate": eval.candidate,
                "delta": eval.delta,
                "mu": eval.mu,
                "feedback": eval.feedback,
            })
        }
        What::History => {
            let path = run.join(HISTORY_FILE);
            let items = if path.exists() {
                load_history(&path).map_err(|e| Failure::Runtime(e.to_string()))?.0
            } else {
                Vec::new()
            };
            let at_t: Vec<_> = items.into_iter().filter(|x| x.iteration == at).collect();
            json!({ "t": at, "items": at_t })
        }
    };
    println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
    Ok(())
}
