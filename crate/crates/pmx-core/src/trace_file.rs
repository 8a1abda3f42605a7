//! Line-delimited trace files.
//!
//! Layout:
//!
//! ```text
//! # pmx-trace v1 scenario_hash=<16 hex> seed=<u64>
//! # scenario=<canonical scenario JSON>
//! step=<n> alt=<name(args)> kind=<event> session=<s>
//! ...
//! ```
//!
//! The embedded scenario makes a file self-contained: loading replays the
//! scenario and compares the regenerated event lines against the recorded
//! ones, so any tampering (or engine nondeterminism) surfaces as a
//! replay-integrity error.

use thiserror::Error;

use crate::fnv1a64;
use crate::sim::{self, Scenario, SimError, Trace};

#[derive(Debug, Error)]
pub enum TraceFileError {
    #[error("trace file: {0}")]
    Malformed(String),
    #[error("trace file: scenario hash mismatch (header {header:016x}, computed {computed:016x})")]
    HashMismatch { header: u64, computed: u64 },
    #[error("trace file: event line {index} differs from replay: `{recorded}` vs `{replayed}`")]
    EventMismatch {
        index: usize,
        recorded: String,
        replayed: String,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trace file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Stable hash of a scenario's canonical JSON form.
pub fn scenario_hash(scenario: &Scenario) -> u64 {
    let json = serde_json::to_string(scenario).expect("scenario serializes");
    fnv1a64(json.as_bytes())
}

/// Render a trace in the file format.
pub fn render(trace: &Trace) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# pmx-trace v1 scenario_hash={:016x} seed={}\n",
        scenario_hash(&trace.scenario),
        trace.scenario.scheduler.seed
    ));
    out.push_str(&format!(
        "# scenario={}\n",
        serde_json::to_string(&trace.scenario).expect("scenario serializes")
    ));
    for ev in &trace.events {
        out.push_str(&ev.to_string());
        out.push('\n');
    }
    out
}

/// A parsed (not yet verified) trace file.
#[derive(Debug, Clone)]
pub struct TraceFile {
    pub scenario: Scenario,
    pub header_hash: u64,
    pub seed: u64,
    pub event_lines: Vec<String>,
}

/// Parse the header and event lines of a trace file.
pub fn parse(text: &str) -> Result<TraceFile, TraceFileError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TraceFileError::Malformed("empty file".into()))?;
    let rest = header
        .strip_prefix("# pmx-trace v1 ")
        .ok_or_else(|| TraceFileError::Malformed(format!("bad header line `{header}`")))?;
    let mut header_hash = None;
    let mut seed = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("scenario_hash=") {
            header_hash = Some(
                u64::from_str_radix(v, 16)
                    .map_err(|e| TraceFileError::Malformed(format!("bad scenario_hash: {e}")))?,
            );
        } else if let Some(v) = field.strip_prefix("seed=") {
            seed = Some(
                v.parse::<u64>()
                    .map_err(|e| TraceFileError::Malformed(format!("bad seed: {e}")))?,
            );
        }
    }
    let header_hash =
        header_hash.ok_or_else(|| TraceFileError::Malformed("missing scenario_hash".into()))?;
    let seed = seed.ok_or_else(|| TraceFileError::Malformed("missing seed".into()))?;

    let scenario_line = lines
        .next()
        .ok_or_else(|| TraceFileError::Malformed("missing scenario line".into()))?;
    let json = scenario_line
        .strip_prefix("# scenario=")
        .ok_or_else(|| TraceFileError::Malformed("missing scenario line".into()))?;
    let scenario: Scenario = serde_json::from_str(json)?;

    let event_lines = lines.map(str::to_owned).collect();
    Ok(TraceFile {
        scenario,
        header_hash,
        seed,
        event_lines,
    })
}

/// Verify a parsed file (hash, seed, event lines) by replaying its
/// scenario; returns the regenerated in-memory trace on success.
pub fn verify(file: &TraceFile) -> Result<Trace, TraceFileError> {
    verify_with(file, None)
}

/// [`verify`] under the protocol mutation the file was recorded with.
pub fn verify_with(
    file: &TraceFile,
    mutation: Option<crate::Mutation>,
) -> Result<Trace, TraceFileError> {
    let computed = scenario_hash(&file.scenario);
    if computed != file.header_hash {
        return Err(TraceFileError::HashMismatch {
            header: file.header_hash,
            computed,
        });
    }
    if file.seed != file.scenario.scheduler.seed {
        return Err(TraceFileError::Malformed(format!(
            "header seed {} does not match scenario seed {}",
            file.seed, file.scenario.scheduler.seed
        )));
    }
    let trace = sim::run_with(&file.scenario, mutation)?;
    let replayed: Vec<String> = trace.events.iter().map(|e| e.to_string()).collect();
    let n = file.event_lines.len().max(replayed.len());
    for i in 0..n {
        let recorded = file.event_lines.get(i);
        let fresh = replayed.get(i);
        if recorded != fresh {
            return Err(TraceFileError::EventMismatch {
                index: i,
                recorded: recorded.cloned().unwrap_or_else(|| "<none>".into()),
                replayed: fresh.cloned().unwrap_or_else(|| "<none>".into()),
            });
        }
    }
    Ok(trace)
}

/// Parse and verify in one step.
pub fn load(text: &str) -> Result<Trace, TraceFileError> {
    verify(&parse(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Pid, PidSet};
    use crate::sim::{EnvPolicy, NbhDist, Policy, SchedulerSpec};

    fn scenario(seed: u64) -> Scenario {
        Scenario {
            universe: vec![Pid(0), Pid(1)],
            ae: PidSet::new(),
            env: EnvPolicy {
                trigger_prob: 0.5,
                nbh_dist: NbhDist::All,
                abort_prob: 0.0,
                max_triggers: Some(1),
            },
            scheduler: SchedulerSpec {
                policy: Policy::FairRoundRobin,
                seed,
                k: None,
                freeze: vec![],
                dwell: 0,
            },
            max_steps: 1_000,
            snapshot_every: Some(1),
            check_invariants: true,
        }
    }

    #[test]
    fn render_parse_verify_roundtrip() {
        let t = sim::run(&scenario(42)).unwrap();
        let text = render(&t);
        let loaded = load(&text).unwrap();
        assert_eq!(loaded.events, t.events);
        assert_eq!(loaded.final_state, t.final_state);
    }

    #[test]
    fn rendering_is_reproducible() {
        let a = render(&sim::run(&scenario(7)).unwrap());
        let b = render(&sim::run(&scenario(7)).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn tampered_event_line_is_rejected() {
        let t = sim::run(&scenario(42)).unwrap();
        let mut text = render(&t);
        text = text.replace("kind=cs_enter(0)", "kind=cs_enter(1)");
        match load(&text) {
            Err(TraceFileError::EventMismatch { .. }) => {}
            other => panic!("expected event mismatch, got {other:?}"),
        }
    }

    #[test]
    fn tampered_scenario_is_rejected_by_hash() {
        let t = sim::run(&scenario(42)).unwrap();
        let text = render(&t).replace("\"max_steps\":1000", "\"max_steps\":1001");
        match load(&text) {
            Err(TraceFileError::HashMismatch { .. }) => {}
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            load("not a trace"),
            Err(TraceFileError::Malformed(_))
        ));
    }
}
