//! `pmx`: run, explore, analyze and replay protocol executions.
//!
//! Exit status: 0 when everything passes, 1 on any violation or failed
//! verdict, 2 on configuration, usage or trace-integrity errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pmx_core::analysis::{
    check_fcfs, check_maximal_concurrency, check_starvation_freedom_with,
    default_starvation_bound, message_complexity, sessions, vf_monotonic, vf_parity_holds,
    Outcome, VerdictStatus,
};
use pmx_core::explore::{explore_with, ExploreConfig};
use pmx_core::sim::{run_with, SimError, Trace};
use pmx_core::trace_file;
use pmx_core::{check_all, prio_acyclic, Mutation};

#[derive(Parser)]
#[command(
    name = "pmx",
    about = "Laboratory for a partial mutual exclusion protocol",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and record its trace.
    Run(RunArgs),
    /// Exhaustively explore a configuration's reachable states.
    Explore(ExploreArgs),
    /// Re-run a recorded trace and evaluate checks on it.
    Analyze(AnalyzeArgs),
    /// Verify that a recorded trace replays bit-identically.
    Replay(ReplayArgs),
    /// Run any of the above under a deliberately broken protocol variant.
    #[cfg(feature = "mutate")]
    Mutate(MutateArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output trace file.
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args, Clone)]
struct ExploreArgs {
    /// Exploration config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output report file.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Clone)]
struct AnalyzeArgs {
    /// Recorded trace file.
    #[arg(long)]
    trace: PathBuf,
    /// Checks to evaluate.
    #[arg(long, value_delimiter = ',', required = true)]
    checks: Vec<CheckName>,
    /// Completion bound in steps for starvation/maxconc (default
    /// 50 * |universe| * K).
    #[arg(long)]
    bound: Option<u64>,
}

#[derive(Args, Clone)]
struct ReplayArgs {
    /// Recorded trace file.
    #[arg(long)]
    trace: PathBuf,
}

#[cfg(feature = "mutate")]
#[derive(Args)]
struct MutateArgs {
    /// Mutation name (e.g. omit-fork-dec-fwd16).
    #[arg(long, value_parser = parse_mutation)]
    name: Mutation,
    #[command(subcommand)]
    action: MutateAction,
}

#[cfg(feature = "mutate")]
#[derive(Subcommand)]
enum MutateAction {
    Run(RunArgs),
    Explore(ExploreArgs),
    Analyze(AnalyzeArgs),
    Replay(ReplayArgs),
}

#[cfg(feature = "mutate")]
fn parse_mutation(s: &str) -> Result<Mutation, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckName {
    Invariants,
    Fcfs,
    Complexity,
    Starvation,
    Maxconc,
    Vf,
}

const EXIT_OK: u8 = 0;
const EXIT_VIOLATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => cmd_run(&args, None),
        Command::Explore(args) => cmd_explore(&args, None),
        Command::Analyze(args) => cmd_analyze(&args, None),
        Command::Replay(args) => cmd_replay(&args, None),
        #[cfg(feature = "mutate")]
        Command::Mutate(args) => {
            let m = Some(args.name);
            match args.action {
                MutateAction::Run(a) => cmd_run(&a, m),
                MutateAction::Explore(a) => cmd_explore(&a, m),
                MutateAction::Analyze(a) => cmd_analyze(&a, m),
                MutateAction::Replay(a) => cmd_replay(&a, m),
            }
        }
    };
    ExitCode::from(code)
}

fn read_file(path: &PathBuf) -> Result<String, u8> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        EXIT_CONFIG
    })
}

fn write_file(path: &PathBuf, content: &str) -> Result<(), u8> {
    fs::write(path, content).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_CONFIG
    })
}

fn cmd_run(args: &RunArgs, mutation: Option<Mutation>) -> u8 {
    let text = match read_file(&args.scenario) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let scenario = match serde_json::from_str(&text) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("error: bad scenario JSON: {e}");
            return EXIT_CONFIG;
        }
    };
    match run_with(&scenario, mutation) {
        Ok(trace) => {
            if write_file(&args.trace, &trace_file::render(&trace)).is_err() {
                return EXIT_CONFIG;
            }
            let completed = sessions(&trace)
                .map(|ss| {
                    ss.iter()
                        .filter(|s| s.outcome == Outcome::Completed)
                        .count()
                })
                .unwrap_or(0);
            println!(
                "steps={} rounds={} events={} sessions_completed={} final_quiescent={}",
                trace.steps,
                trace.rounds,
                trace.events.len(),
                completed,
                trace.final_state.channels.is_empty()
            );
            EXIT_OK
        }
        Err(SimError::InvariantViolation { step, detail }) => {
            eprintln!("invariant violation at step {step}: {detail}");
            EXIT_VIOLATION
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn cmd_explore(args: &ExploreArgs, mutation: Option<Mutation>) -> u8 {
    let text = match read_file(&args.config) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let cfg: ExploreConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: bad exploration config JSON: {e}");
            return EXIT_CONFIG;
        }
    };
    let result = match explore_with(&cfg, mutation, None) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let mut report = String::new();
    report.push_str(&result.summary());
    report.push('\n');
    for cex in &result.violations {
        report.push_str(&format!("violation={}\n", cex.violation));
        for (i, alt) in cex.path.iter().enumerate() {
            report.push_str(&format!("step={} alt={}\n", i + 1, alt));
        }
    }
    for (state, path) in &result.silent_nonidle {
        let stuck: Vec<String> = state
            .universe
            .iter()
            .filter(|&&p| state.pc(p) != 11)
            .map(|p| format!("{p}@{}", state.pc(*p)))
            .collect();
        report.push_str(&format!("silent_nonidle: {}\n", stuck.join(" ")));
        for (i, alt) in path.iter().enumerate() {
            report.push_str(&format!("step={} alt={}\n", i + 1, alt));
        }
    }
    if write_file(&args.report, &report).is_err() {
        return EXIT_CONFIG;
    }
    print!("{report}");
    if result.clean() {
        EXIT_OK
    } else {
        EXIT_VIOLATION
    }
}

fn load_trace(path: &PathBuf, mutation: Option<Mutation>) -> Result<Trace, u8> {
    let text = read_file(path)?;
    let parsed = trace_file::parse(&text).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    trace_file::verify_with(&parsed, mutation).map_err(|e| {
        eprintln!("replay-integrity error: {e}");
        EXIT_CONFIG
    })
}

fn cmd_replay(args: &ReplayArgs, mutation: Option<Mutation>) -> u8 {
    match load_trace(&args.trace, mutation) {
        Ok(trace) => {
            println!(
                "replay ok: steps={} events={}",
                trace.steps,
                trace.events.len()
            );
            EXIT_OK
        }
        Err(code) => code,
    }
}

fn cmd_analyze(args: &AnalyzeArgs, mutation: Option<Mutation>) -> u8 {
    let trace = match load_trace(&args.trace, mutation) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let bound = args
        .bound
        .unwrap_or_else(|| default_starvation_bound(&trace.scenario));

    struct Line {
        check: &'static str,
        result: String,
        detail: String,
    }
    let mut lines: Vec<Line> = Vec::new();
    let mut push = |check: &'static str, result: String, detail: String| {
        println!("check={check} result={result} detail={detail}");
        lines.push(Line {
            check,
            result,
            detail,
        });
    };

    for check in &args.checks {
        match check {
            CheckName::Invariants => {
                let mut bad = 0usize;
                let mut first = String::new();
                for (step, state) in &trace.snapshots {
                    let vs = check_all(state);
                    if !(vs.is_empty() && prio_acyclic(state)) {
                        bad += 1;
                        if first.is_empty() {
                            first = format!(
                                "step {step}: {}",
                                vs.first().map(|v| v.to_string()).unwrap_or_default()
                            );
                        }
                    }
                }
                let result = if bad == 0 { "pass" } else { "fail" };
                let detail = if bad == 0 {
                    format!("{} snapshots clean", trace.snapshots.len())
                } else {
                    format!("{bad} snapshots violated ({first})")
                };
                push("invariants", result.into(), detail);
            }
            CheckName::Fcfs => match check_fcfs(&trace) {
                Ok(vs) if vs.is_empty() => {
                    push("fcfs", "pass".into(), "no ordering breaches".into())
                }
                Ok(vs) => push(
                    "fcfs",
                    "fail".into(),
                    format!("{} breaches; first: {}", vs.len(), vs[0]),
                ),
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            },
            CheckName::Complexity => match message_complexity(&trace) {
                Ok(tallies) => {
                    let judged = tallies.iter().filter(|t| t.judged).count();
                    let bad: Vec<&_> = tallies.iter().filter(|t| t.judged && !t.ok).collect();
                    if bad.is_empty() {
                        push(
                            "complexity",
                            "pass".into(),
                            format!("{judged} judged session edges exact"),
                        );
                    } else {
                        push(
                            "complexity",
                            "fail".into(),
                            format!("{} of {judged} edges off; first: {:?}", bad.len(), bad[0]),
                        );
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_CONFIG;
                }
            },
            CheckName::Starvation => {
                match check_starvation_freedom_with(&trace, bound, mutation) {
                    Ok(v) => push("starvation", v.status.to_string(), v.detail),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return EXIT_CONFIG;
                    }
                }
            }
            CheckName::Maxconc => {
                let mut overall = VerdictStatus::Pass;
                let mut details = Vec::new();
                for &p in &trace.final_state.universe {
                    match check_maximal_concurrency(&trace, p, bound) {
                        Ok(v) => {
                            if v.status == VerdictStatus::Fail {
                                overall = VerdictStatus::Fail;
                            }
                            details.push(format!("{p}:{}", v.status));
                        }
                        Err(e) => {
                            eprintln!("error: {e}");
                            return EXIT_CONFIG;
                        }
                    }
                }
                push("maxconc", overall.to_string(), details.join(" "));
            }
            CheckName::Vf => {
                let mut parity_bad = 0usize;
                for (_, state) in &trace.snapshots {
                    if !vf_parity_holds(state) {
                        parity_bad += 1;
                    }
                }
                let mut mono_fail = Vec::new();
                let mut mono_pass = 0usize;
                let universe = trace.final_state.universe.clone();
                for &p in &universe {
                    for &q in &universe {
                        if p == q {
                            continue;
                        }
                        match vf_monotonic(&trace, p, q) {
                            Ok(v) => match v.status {
                                VerdictStatus::Pass => mono_pass += 1,
                                VerdictStatus::Fail => mono_fail.push(v.detail),
                                VerdictStatus::Inapplicable => {}
                            },
                            Err(e) => {
                                eprintln!("error: {e}");
                                return EXIT_CONFIG;
                            }
                        }
                    }
                }
                if parity_bad == 0 && mono_fail.is_empty() {
                    push(
                        "vf",
                        "pass".into(),
                        format!(
                            "parity on {} snapshots, {mono_pass} monotonic pairs",
                            trace.snapshots.len()
                        ),
                    );
                } else {
                    push(
                        "vf",
                        "fail".into(),
                        format!("parity_bad={parity_bad} monotonic_failures={mono_fail:?}"),
                    );
                }
            }
        }
    }

    // Machine-readable summary for CI consumers.
    let summary: Vec<serde_json::Value> = lines
        .iter()
        .map(|l| {
            serde_json::json!({
                "check": l.check,
                "result": l.result,
                "detail": l.detail,
            })
        })
        .collect();
    println!("{}", serde_json::json!({ "checks": summary }));

    if lines.iter().any(|l| l.result == "fail") {
        EXIT_VIOLATION
    } else {
        EXIT_OK
    }
}
