//! `protoforge`: check, synthesize, verify, simulate and sweep protocol
//! specifications.
//!
//! Exit codes: 0 success, 1 semantic failure (not realizable, verification
//! failed), 2 input error, 3 resource limit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use protoforge::bounds::{solve_opt, BoundsVector, OptError, DEFAULT_CAP};
use protoforge::csa::Csa;
use protoforge::medium::{feasibility_sweep, write_csv, Axis, Grid, DEFAULT_A, DEFAULT_B};
use protoforge::parse::parse_spec;
use protoforge::protocol::FullSpec;
use protoforge::semantics::{
    check_correctness, run_monte_carlo, ExploreOptions, MonteCarloConfig, Scenario, SemanticsError, DEFAULT_BUDGET,
};
use protoforge::synthesis::{synthesize_with_bounds, SynthesisError};

const BUDGET_VAR: &str = "PROTOFORGE_BUDGET";

#[derive(Parser)]
#[command(
    name = "protoforge",
    version,
    about = "Synthesize and verify QoS-bounded car-to-car protocols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report well-posedness and realizability of a specification.
    Check(CheckArgs),
    /// Write one CSA per car plus the retransmission bounds.
    Synth(SynthArgs),
    /// Compute exact synchronization probabilities and compare them with the requirements.
    Verify(VerifyArgs),
    /// Estimate synchronization rates by seeded Monte Carlo simulation.
    Simulate(SimulateArgs),
    /// Sweep realizability over medium load parameters.
    Feasible(FeasibleArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Specification file in the .psl format.
    #[arg(long)]
    spec: PathBuf,
    /// Drop probability bound, overriding the one in the file.
    #[arg(long)]
    delta: Option<f64>,
    /// Largest retransmission bound considered.
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: u32,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Dot,
    Json,
    Csv,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Bounds file (JSON object name -> bound) used instead of solving.
    #[arg(long)]
    bounds: Option<PathBuf>,
    /// Write only this automaton format; both DOT and JSON by default.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct NetworkArgs {
    /// Specification file in the .psl format.
    #[arg(long)]
    spec: PathBuf,
    /// Drop probability to evaluate at, overriding the one in the file.
    /// Automata synthesized here are always built for the file's value.
    #[arg(long)]
    delta: Option<f64>,
    /// Bounds file used when synthesizing.
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: u32,
    /// CSA JSON files; synthesized from `--spec` when omitted.
    csas: Vec<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    net: NetworkArgs,
    /// Report format; plain text by default.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    net: NetworkArgs,
    #[arg(long, default_value_t = 10_000)]
    runs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write one JSON line per run to `<out>/traces.jsonl`.
    #[arg(long, requires = "out")]
    traces: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FeasibleArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: u32,
    /// Number of cars, as start:end:step.
    #[arg(long, default_value = "2:11:1")]
    grid_n: String,
    /// Message length, as start:end:step.
    #[arg(long, default_value = "10:100:10")]
    grid_dmax: String,
    /// Minimum message delay, as start:end:step.
    #[arg(long, default_value = "1:10:1")]
    grid_tau: String,
    #[arg(long, default_value_t = DEFAULT_A)]
    sigmoid_a: f64,
    #[arg(long, default_value_t = DEFAULT_B)]
    sigmoid_b: f64,
    /// Write `<out>/feasibility.csv` instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

fn semantic(msg: String) -> Failure {
    Failure {
        code: 1,
        error: anyhow!(msg),
    }
}

fn from_semantics(e: SemanticsError) -> Failure {
    let code = match e {
        SemanticsError::DivergenceDetected { .. } => 3,
        _ => 2,
    };
    Failure { code, error: e.into() }
}

fn from_synthesis(e: SynthesisError) -> Failure {
    let code = match e {
        SynthesisError::MissingBound(_) => 2,
        _ => 1,
    };
    Failure { code, error: e.into() }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Check(args) => check(args),
        Command::Synth(args) => synth(args),
        Command::Verify(args) => verify(args),
        Command::Simulate(args) => simulate(args),
        Command::Feasible(args) => feasible(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn load_spec(path: &Path, delta: Option<f64>) -> Result<FullSpec, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)?;
    let full = parse_spec(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(input)?;
    match delta {
        Some(d) => full.with_delta(d).map_err(input),
        None => Ok(full),
    }
}

fn load_bounds(path: &Path) -> Result<BoundsVector, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing bounds {}", path.display()))
        .map_err(input)
}

fn budget() -> Result<ExploreOptions, Failure> {
    match std::env::var(BUDGET_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|budget| ExploreOptions { budget })
            .with_context(|| format!("{BUDGET_VAR}={v} is not a configuration count"))
            .map_err(input),
        Err(_) => Ok(ExploreOptions { budget: DEFAULT_BUDGET }),
    }
}

fn optimal_bounds(full: &FullSpec, cap: u32) -> Result<BoundsVector, Failure> {
    solve_opt(&full.protocol, full.delta, cap).map_err(|e| match e {
        OptError::NotWellPosed(report) => semantic(format!("specification is not well-posed:\n{report}")),
        OptError::Infeasible(why) => semantic(format!("not realizable at delta {}: {why}", full.delta)),
    })
}

fn check(args: CheckArgs) -> Outcome {
    let full = load_spec(&args.spec.spec, args.spec.delta)?;
    println!("spec: {}", full.protocol);
    println!("delta: {}", full.delta);
    let report = full.protocol.well_posed();
    if !report.is_ok() {
        println!("well-posed: no");
        println!("{report}");
        return Err(semantic("specification is not well-posed".into()));
    }
    println!("well-posed: yes");
    match solve_opt(&full.protocol, full.delta, args.spec.cap) {
        Ok(bounds) => {
            println!("realizable: yes");
            println!("bounds: {bounds} (sum {})", bounds.sum());
            Ok(())
        }
        Err(e) => {
            println!("realizable: no");
            Err(semantic(e.to_string()))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input)
}

fn synth(args: SynthArgs) -> Outcome {
    let full = load_spec(&args.spec.spec, args.spec.delta)?;
    let bounds = match &args.bounds {
        Some(path) => load_bounds(path)?,
        None => optimal_bounds(&full, args.spec.cap)?,
    };
    let synthesis = synthesize_with_bounds(&full, bounds).map_err(from_synthesis)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(input)?;
    let (dot, json) = match args.format {
        None => (true, true),
        Some(Format::Dot) => (true, false),
        Some(Format::Json) => (false, true),
        Some(Format::Csv) => return Err(input(anyhow!("automata are written as dot or json"))),
    };
    for csa in &synthesis.csas {
        let stem = args.out.join(csa.owner.as_str());
        if json {
            write_file(&stem.with_extension("json"), &(csa.to_json() + "\n"))?;
        }
        if dot {
            write_file(&stem.with_extension("dot"), &csa.to_dot())?;
        }
        println!(
            "{}: {} states, {} transitions, {} final",
            csa.owner,
            csa.states.len(),
            csa.transitions.len(),
            csa.finals.len()
        );
    }
    let bounds_json = serde_json::to_string_pretty(&synthesis.bounds).map_err(input)?;
    write_file(&args.out.join("bounds.json"), &(bounds_json + "\n"))?;
    println!("bounds: {} (sum {})", synthesis.bounds, synthesis.bounds.sum());
    Ok(())
}

/// The automata to evaluate and the drop probability to evaluate them at.
fn network(args: &NetworkArgs) -> Result<(FullSpec, Vec<Csa>, f64), Failure> {
    let full = load_spec(&args.spec, None)?;
    let delta = args.delta.unwrap_or(full.delta);
    if !(0.0..=1.0).contains(&delta) {
        return Err(input(anyhow!("delta {delta} is outside [0, 1]")));
    }
    let csas = if args.csas.is_empty() {
        let bounds = match &args.bounds {
            Some(path) => load_bounds(path)?,
            None => optimal_bounds(&full, args.cap)?,
        };
        synthesize_with_bounds(&full, bounds).map_err(from_synthesis)?.csas
    } else {
        args.csas
            .iter()
            .map(|path| {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(input)?;
                Csa::from_json(&text)
                    .with_context(|| format!("loading {}", path.display()))
                    .map_err(input)
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok((full, csas, delta))
}

fn verify(args: VerifyArgs) -> Outcome {
    let (full, csas, delta) = network(&args.net)?;
    let report = check_correctness(&csas, delta, &full.protocol, budget()?).map_err(from_semantics)?;
    match args.format {
        Some(Format::Json) => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(input)?);
        }
        Some(_) => {
            return Err(input(anyhow!("verify reports are text or json")));
        }
        None => {
            println!("delta: {delta}");
            for s in &report.sequences {
                println!(
                    "{}  required {}  achieved {:.9}  margin {:+.9}  {}",
                    s.sequence,
                    s.required,
                    s.achieved,
                    s.margin,
                    if s.holds { "ok" } else { "FAIL" }
                );
            }
            println!("verdict: {}", if report.holds { "pass" } else { "fail" });
        }
    }
    if report.holds {
        Ok(())
    } else {
        Err(semantic(
            "some sequence is synchronized less likely than required".into(),
        ))
    }
}

fn simulate(args: SimulateArgs) -> Outcome {
    let (full, csas, delta) = network(&args.net)?;
    if args.runs == 0 {
        return Err(input(anyhow!("--runs must be at least 1")));
    }
    let mut out = String::new();
    let mut traces = Vec::new();
    writeln!(out, "seed: {}  runs: {}  delta: {delta}", args.seed, args.runs).expect("writing to a String");
    for (index, seq) in full.protocol.sequences().iter().enumerate() {
        let config = MonteCarloConfig {
            runs: args.runs,
            // one stream family per sequence keeps sequences independent
            seed: args.seed.wrapping_add(index as u64),
            record_traces: args.traces,
            ..MonteCarloConfig::default()
        };
        let report =
            run_monte_carlo(&csas, delta, &Scenario::for_sequence(&seq.events), config).map_err(from_semantics)?;
        writeln!(
            out,
            "{seq}  rate {:.6}  stderr {:.6}  successes {}/{}",
            report.rate, report.std_error, report.successes, args.runs
        )
        .expect("writing to a String");
        if args.traces {
            report.write_traces(&mut traces).map_err(input)?;
        }
    }
    print!("{out}");
    if let (true, Some(dir)) = (args.traces, &args.out) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(input)?;
        let path = dir.join("traces.jsonl");
        fs::write(&path, traces)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(input)?;
    }
    Ok(())
}

fn parse_axis(flag: &str, text: &str) -> Result<Axis, Failure> {
    let parts: Vec<&str> = text.split(':').collect();
    let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
    match nums.as_deref() {
        Ok([start, end, step]) if *step > 0.0 && end >= start => Ok(Axis::new(*start, *end, *step)),
        _ => Err(input(anyhow!(
            "--{flag} expects start:end:step with step > 0, got `{text}`"
        ))),
    }
}

fn feasible(args: FeasibleArgs) -> Outcome {
    let full = load_spec(&args.spec, None)?;
    let grid = Grid {
        n_cars: parse_axis("grid-n", &args.grid_n)?,
        d_max: parse_axis("grid-dmax", &args.grid_dmax)?,
        tau_min: parse_axis("grid-tau", &args.grid_tau)?,
        a: args.sigmoid_a,
        b: args.sigmoid_b,
    };
    let points = feasibility_sweep(&full.protocol, &grid, args.cap).map_err(|e| match e {
        protoforge::medium::MediumError::NotWellPosed(_) => semantic(e.to_string()),
        other => input(other),
    })?;
    let mut buf = Vec::new();
    match args.format {
        Format::Csv => write_csv(&points, &mut buf).map_err(input)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut buf, &points).map_err(input)?;
            buf.push(b'\n');
        }
        Format::Dot => return Err(input(anyhow!("sweeps are written as csv or json"))),
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(input)?;
            let ext = if args.format == Format::Json { "json" } else { "csv" };
            let path = dir.join(format!("feasibility.{ext}"));
            fs::write(&path, &buf)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(input)?;
            let realizable = points.iter().filter(|p| p.realizable).count();
            println!(
                "{realizable}/{} grid points realizable -> {}",
                points.len(),
                path.display()
            );
        }
        None => print!("{}", String::from_utf8(buf).expect("csv and json output is UTF-8")),
    }
    Ok(())
}
