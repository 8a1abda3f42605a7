//! Trace analyzers: first-come-first-served ordering, per-session message
//! complexity, starvation freedom, maximal concurrency and the `vf`
//! variant-function diagnostics.
//!
//! All analyses are pure functions over recorded traces. Verdicts are
//! three-valued: a check whose precondition fails (unfair trace, missing
//! snapshots, frozen subject) is *inapplicable* rather than failed.
//! Eventually-always conditions are read in their finite-horizon form,
//! "holds from some step through trace end", and say so in their detail
//! text.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::protocol::{conflict, line, GlobalState, MsgKind, Mutation, Pid};
use crate::sim::{fairness_audit, fairness_audit_with, EventKind, Policy, Scenario, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("trace integrity: {0}")]
    TraceIntegrity(String),
    #[error("vf is undefined on the diagonal (p = q = {0})")]
    SamePid(Pid),
    #[error("replay failed: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Aborted,
    Unfinished,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Completed => "completed",
            Outcome::Aborted => "aborted",
            Outcome::Unfinished => "unfinished",
        })
    }
}

/// One pass of a process from trigger back to idle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub process: Pid,
    /// Per-process cycle number, starting at 1.
    pub index: u64,
    pub nbh: crate::PidSet,
    pub triggered_at: u64,
    pub entry_start_at: Option<u64>,
    pub cs_enter_at: Option<u64>,
    pub ended_at: Option<u64>,
    pub outcome: Outcome,
}

/// Reconstruct sessions from the trace events: one session per trigger,
/// fields filled from the subsequent events of that process.
pub fn sessions(trace: &Trace) -> Result<Vec<Session>, AnalysisError> {
    let mut done: Vec<Session> = Vec::new();
    let mut open: BTreeMap<Pid, (Session, bool)> = BTreeMap::new(); // (session, aborted)
    for ev in &trace.events {
        match &ev.kind {
            EventKind::Trigger { p, nbh } => {
                if open.contains_key(p) {
                    return Err(AnalysisError::TraceIntegrity(format!(
                        "trigger for {p} at step {} inside an open session",
                        ev.step
                    )));
                }
                open.insert(
                    *p,
                    (
                        Session {
                            process: *p,
                            index: ev.session,
                            nbh: nbh.clone(),
                            triggered_at: ev.step,
                            entry_start_at: None,
                            cs_enter_at: None,
                            ended_at: None,
                            outcome: Outcome::Unfinished,
                        },
                        false,
                    ),
                );
            }
            EventKind::EntryStart { p } => {
                let (s, _) = open.get_mut(p).ok_or_else(|| {
                    AnalysisError::TraceIntegrity(format!(
                        "entry_start for {p} at step {} without a session",
                        ev.step
                    ))
                })?;
                if s.entry_start_at.is_some() {
                    return Err(AnalysisError::TraceIntegrity(format!(
                        "duplicate entry_start for {p} at step {}",
                        ev.step
                    )));
                }
                s.entry_start_at = Some(ev.step);
            }
            EventKind::CsEnter { p } => {
                let (s, _) = open.get_mut(p).ok_or_else(|| {
                    AnalysisError::TraceIntegrity(format!(
                        "cs_enter for {p} at step {} without a session",
                        ev.step
                    ))
                })?;
                if s.cs_enter_at.is_some() {
                    return Err(AnalysisError::TraceIntegrity(format!(
                        "duplicate cs_enter for {p} at step {}",
                        ev.step
                    )));
                }
                s.cs_enter_at = Some(ev.step);
            }
            EventKind::Abort { p, .. } => {
                let (_, aborted) = open.get_mut(p).ok_or_else(|| {
                    AnalysisError::TraceIntegrity(format!(
                        "abort for {p} at step {} without a session",
                        ev.step
                    ))
                })?;
                *aborted = true;
            }
            EventKind::Idle { p } => {
                let (mut s, aborted) = open.remove(p).ok_or_else(|| {
                    AnalysisError::TraceIntegrity(format!(
                        "idle for {p} at step {} without a session",
                        ev.step
                    ))
                })?;
                s.ended_at = Some(ev.step);
                s.outcome = match (aborted, s.cs_enter_at) {
                    (true, None) => Outcome::Aborted,
                    (false, Some(_)) => Outcome::Completed,
                    (true, Some(_)) => {
                        return Err(AnalysisError::TraceIntegrity(format!(
                            "session of {p} both aborted and entered CS"
                        )))
                    }
                    (false, None) => {
                        return Err(AnalysisError::TraceIntegrity(format!(
                            "session of {p} went idle without CS or abort"
                        )))
                    }
                };
                done.push(s);
            }
            EventKind::CsExit { .. } | EventKind::Send { .. } | EventKind::Receive { .. } => {}
        }
    }
    done.extend(open.into_values().map(|(s, _)| s));
    done.sort_by_key(|s| (s.triggered_at, s.process));
    Ok(done)
}

/// A first-come-first-served breach: the notified process entered the
/// critical section before the notifier did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FcfsViolation {
    /// Process and session that notified first.
    pub first: (Pid, u64),
    /// Process and session that was notified before triggering, yet won.
    pub second: (Pid, u64),
    pub notify_received_at: u64,
    pub second_trigger_at: u64,
    pub first_cs: Option<u64>,
    pub second_cs: u64,
}

impl fmt::Display for FcfsViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "fcfs: {}#{} notified {}#{} at step {} (before its trigger at {}), \
             but the latter entered CS at {} vs {:?}",
            self.first.0,
            self.first.1,
            self.second.0,
            self.second.1,
            self.notify_received_at,
            self.second_trigger_at,
            self.second_cs,
            self.first_cs
        )
    }
}

/// Check the FCFS ordering rule on every pair of sessions: if `q`'s
/// notification reached `r` before `r` triggered, the sessions are in
/// two-sided conflict, and `q` did not abort, then `q` must execute its
/// critical section first.
pub fn check_fcfs(trace: &Trace) -> Result<Vec<FcfsViolation>, AnalysisError> {
    let sess = sessions(trace)?;
    let by_key: BTreeMap<(Pid, u64), &Session> =
        sess.iter().map(|s| ((s.process, s.index), s)).collect();

    // Match notify receives to sender sessions: channels are counters, so
    // the k-th receive on an edge corresponds to the k-th send.
    let mut in_flight: BTreeMap<(Pid, Pid), VecDeque<u64>> = BTreeMap::new();
    let mut received: Vec<(Pid, u64, Pid, u64)> = Vec::new(); // (q, session_of_q, r, step)
    for ev in &trace.events {
        match ev.kind {
            EventKind::Send {
                kind: MsgKind::Notify,
                from,
                to,
            } => in_flight
                .entry((from, to))
                .or_default()
                .push_back(ev.session),
            EventKind::Receive {
                kind: MsgKind::Notify,
                from,
                to,
            } => {
                let sess_idx = in_flight
                    .get_mut(&(from, to))
                    .and_then(|q| q.pop_front())
                    .ok_or_else(|| {
                        AnalysisError::TraceIntegrity(format!(
                            "notify receive without matching send on {from}->{to}"
                        ))
                    })?;
                received.push((from, sess_idx, to, ev.step));
            }
            _ => {}
        }
    }

    let mut violations = Vec::new();
    for &(q, i, r, recv_step) in &received {
        let Some(si) = by_key.get(&(q, i)) else {
            continue;
        };
        if si.outcome == Outcome::Aborted {
            continue; // an aborted notifier imposes no ordering
        }
        for sj in sess.iter().filter(|s| s.process == r) {
            if sj.triggered_at <= recv_step {
                continue; // r already in its entry protocol when notified
            }
            let conflicting = si.nbh.contains(&r) && sj.nbh.contains(&q);
            if !conflicting {
                continue;
            }
            let Some(j_cs) = sj.cs_enter_at else { continue };
            let wins = match si.cs_enter_at {
                Some(i_cs) => i_cs < j_cs,
                None => false, // q never entered: r overtook it
            };
            if !wins {
                violations.push(FcfsViolation {
                    first: (q, i),
                    second: (r, sj.index),
                    notify_received_at: recv_step,
                    second_trigger_at: sj.triggered_at,
                    first_cs: si.cs_enter_at,
                    second_cs: j_cs,
                });
            }
        }
    }
    Ok(violations)
}

/// Message tallies of one session against one neighbour, attributed by
/// the sender-side rule: a session owns the notify/withdraw/req/gra
/// messages it sends, the ack answering its withdraw and the grant
/// answering its request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeTally {
    pub process: Pid,
    pub session: u64,
    pub neighbour: Pid,
    pub notify_sent: u32,
    pub withdraw_sent: u32,
    pub ack_received: u32,
    pub req_sent: u32,
    pub gra_received: u32,
    pub gra_sent: u32,
    /// Judged means the session completed without abort; only judged
    /// tallies carry a pass/fail meaning.
    pub judged: bool,
    /// For judged tallies: exactly 3 messages on a lower edge, 6 on a
    /// higher edge.
    pub ok: bool,
}

impl EdgeTally {
    pub fn total(&self) -> u32 {
        self.notify_sent
            + self.withdraw_sent
            + self.ack_received
            + self.req_sent
            + self.gra_received
            + self.gra_sent
    }
}

/// Per-session, per-neighbour message accounting with verdicts.
pub fn message_complexity(trace: &Trace) -> Result<Vec<EdgeTally>, AnalysisError> {
    let sess = sessions(trace)?;
    let mut tallies: BTreeMap<(Pid, u64, Pid), EdgeTally> = BTreeMap::new();
    for s in &sess {
        for &q in &s.nbh {
            tallies.insert(
                (s.process, s.index, q),
                EdgeTally {
                    process: s.process,
                    session: s.index,
                    neighbour: q,
                    notify_sent: 0,
                    withdraw_sent: 0,
                    ack_received: 0,
                    req_sent: 0,
                    gra_received: 0,
                    gra_sent: 0,
                    judged: s.outcome == Outcome::Completed,
                    ok: true,
                },
            );
        }
    }

    let mut bump = |p: Pid, session: u64, q: Pid, f: fn(&mut EdgeTally)| {
        if let Some(t) = tallies.get_mut(&(p, session, q)) {
            f(t);
        }
    };

    // Outstanding withdraw/req senders' sessions per directed edge; the
    // wack discipline keeps these queues at length <= 1 in correct runs.
    let mut withdraw_q: BTreeMap<(Pid, Pid), VecDeque<u64>> = BTreeMap::new();
    let mut req_q: BTreeMap<(Pid, Pid), VecDeque<u64>> = BTreeMap::new();

    for ev in &trace.events {
        match ev.kind {
            EventKind::Send { kind, from, to } => match kind {
                MsgKind::Notify => bump(from, ev.session, to, |t| t.notify_sent += 1),
                MsgKind::Withdraw => {
                    bump(from, ev.session, to, |t| t.withdraw_sent += 1);
                    withdraw_q
                        .entry((from, to))
                        .or_default()
                        .push_back(ev.session);
                }
                MsgKind::Req => {
                    bump(from, ev.session, to, |t| t.req_sent += 1);
                    req_q.entry((from, to)).or_default().push_back(ev.session);
                }
                MsgKind::Gra => {
                    // Only the fork return to a higher neighbour belongs
                    // to the sender's own session; grants to lower
                    // processes answer the peer's request.
                    if from < to {
                        bump(from, ev.session, to, |t| t.gra_sent += 1);
                    }
                }
                MsgKind::Ack => {}
            },
            EventKind::Receive { kind, from, to } => match kind {
                MsgKind::Ack => {
                    // `from` acknowledged `to`'s withdraw.
                    if let Some(sess_idx) =
                        withdraw_q.get_mut(&(to, from)).and_then(|q| q.pop_front())
                    {
                        bump(to, sess_idx, from, |t| t.ack_received += 1);
                    }
                }
                MsgKind::Gra if to < from => {
                    // Answer to `to`'s request at its higher neighbour.
                    if let Some(sess_idx) = req_q.get_mut(&(to, from)).and_then(|q| q.pop_front())
                    {
                        bump(to, sess_idx, from, |t| t.gra_received += 1);
                    }
                }
                _ => {}
            },
            _ => {}
        }
    }

    let mut out: Vec<EdgeTally> = tallies.into_values().collect();
    for t in &mut out {
        if t.judged {
            let expected = if t.neighbour < t.process {
                (1, 1, 1, 0, 0, 0)
            } else {
                (1, 1, 1, 1, 1, 1)
            };
            t.ok = (
                t.notify_sent,
                t.withdraw_sent,
                t.ack_received,
                t.req_sent,
                t.gra_received,
                t.gra_sent,
            ) == expected;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictStatus {
    Pass,
    Fail,
    Inapplicable,
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictStatus::Pass => "pass",
            VerdictStatus::Fail => "fail",
            VerdictStatus::Inapplicable => "inapplicable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub check: &'static str,
    pub status: VerdictStatus,
    pub detail: String,
}

impl Verdict {
    fn pass(check: &'static str, detail: String) -> Self {
        Verdict {
            check,
            status: VerdictStatus::Pass,
            detail,
        }
    }

    fn fail(check: &'static str, detail: String) -> Self {
        Verdict {
            check,
            status: VerdictStatus::Fail,
            detail,
        }
    }

    fn inapplicable(check: &'static str, detail: String) -> Self {
        Verdict {
            check,
            status: VerdictStatus::Inapplicable,
            detail,
        }
    }

    /// Stable report line.
    pub fn line(&self) -> String {
        format!(
            "check={} result={} detail={}",
            self.check, self.status, self.detail
        )
    }
}

/// Default completion bound: a 50-fold allowance of the scenario's
/// fairness bound per universe member.
pub fn default_starvation_bound(scenario: &Scenario) -> u64 {
    50 * scenario.universe.len() as u64 * scenario.resolved_k()
}

/// Starvation freedom at finite horizon: on a globally fair, abort-free
/// trace every session triggered early enough completes within `bound`
/// steps of its trigger.
pub fn check_starvation_freedom(trace: &Trace, bound: u64) -> Result<Verdict, AnalysisError> {
    check_starvation_freedom_with(trace, bound, None)
}

pub fn check_starvation_freedom_with(
    trace: &Trace,
    bound: u64,
    mutation: Option<Mutation>,
) -> Result<Verdict, AnalysisError> {
    const CHECK: &str = "starvation";
    let sc = &trace.scenario;
    if sc.scheduler.policy != Policy::FairRoundRobin || !sc.scheduler.freeze.is_empty() {
        return Ok(Verdict::inapplicable(
            CHECK,
            "requires the fair-round-robin scheduler without freezes".into(),
        ));
    }
    if !sc.ae.is_empty() && sc.env.abort_prob > 0.0 {
        return Ok(Verdict::inapplicable(
            CHECK,
            "requires an abort-free run (ae empty or abort probability 0)".into(),
        ));
    }
    let debts =
        fairness_audit_with(trace, mutation).map_err(|e| AnalysisError::Replay(e.to_string()))?;
    if !debts.is_empty() {
        return Ok(Verdict::inapplicable(
            CHECK,
            format!("trace is not weakly fair: {} fairness debts", debts.len()),
        ));
    }

    let judged_horizon = sc.max_steps.saturating_sub(bound);
    let mut judged = 0u64;
    let mut unjudged = 0u64;
    let mut failures: Vec<String> = Vec::new();
    for s in sessions(trace)? {
        if s.triggered_at >= judged_horizon {
            unjudged += 1;
            continue;
        }
        judged += 1;
        let done_in_time = s.outcome == Outcome::Completed
            && s.ended_at.is_some_and(|end| end - s.triggered_at <= bound);
        if !done_in_time {
            failures.push(format!(
                "{}#{} triggered at {} is {} (ended {:?})",
                s.process, s.index, s.triggered_at, s.outcome, s.ended_at
            ));
        }
    }
    if failures.is_empty() {
        Ok(Verdict::pass(
            CHECK,
            format!("judged={judged} unjudged={unjudged} bound={bound}"),
        ))
    } else {
        Ok(Verdict::fail(
            CHECK,
            format!(
                "{} of {judged} judged sessions missed the bound: {}",
                failures.len(),
                failures.join("; ")
            ),
        ))
    }
}

/// Maximal concurrency at finite horizon: a process that is itself fair
/// and whose messages are answered completes each of its sessions within
/// the bound, unless it stays in two-sided conflict with some process
/// through the end of the trace.
pub fn check_maximal_concurrency(
    trace: &Trace,
    p: Pid,
    bound: u64,
) -> Result<Verdict, AnalysisError> {
    const CHECK: &str = "maxconc";
    let sc = &trace.scenario;
    if sc.is_frozen(p) {
        return Ok(Verdict::inapplicable(
            CHECK,
            format!("process {p} is itself frozen"),
        ));
    }
    let debts = fairness_audit(trace).map_err(|e| AnalysisError::Replay(e.to_string()))?;
    let own_debts: Vec<_> = debts.iter().filter(|d| d.slot.involves(p)).collect();
    if !own_debts.is_empty() {
        return Ok(Verdict::inapplicable(
            CHECK,
            format!(
                "per-process fairness for {p} not met: {} debts",
                own_debts.len()
            ),
        ));
    }

    let late: Vec<Session> = sessions(trace)?
        .into_iter()
        .filter(|s| s.process == p)
        .filter(|s| {
            !(s.outcome == Outcome::Completed
                && s.ended_at.is_some_and(|end| end - s.triggered_at <= bound))
        })
        .collect();
    if late.is_empty() {
        return Ok(Verdict::pass(
            CHECK,
            format!("process {p} completed all its sessions within {bound} steps"),
        ));
    }

    // Finite-horizon eventually-always: a two-sided conflict that holds
    // from some snapshot through the end of the trace.
    if trace.snapshots.is_empty() {
        return Ok(Verdict::inapplicable(
            CHECK,
            "no snapshots available for the conflict check".into(),
        ));
    }
    let others: Vec<Pid> = trace
        .final_state
        .universe
        .iter()
        .copied()
        .filter(|&q| q != p)
        .collect();
    for q in others {
        if !conflict(p, q, &trace.final_state) {
            continue;
        }
        let mut suffix_start = trace.snapshots.len() - 1;
        while suffix_start > 0 && conflict(p, q, &trace.snapshots[suffix_start - 1].1) {
            suffix_start -= 1;
        }
        let from_step = trace.snapshots[suffix_start].0;
        return Ok(Verdict::pass(
            CHECK,
            format!(
                "process {p} stays in conflict with {q} from step {from_step} to trace end \
                 (finite-horizon reading)"
            ),
        ));
    }
    Ok(Verdict::fail(
        CHECK,
        format!(
            "{} sessions of {p} unfinished or late and no conflict persists to trace end",
            late.len()
        ),
    ))
}

/// Variant function `vf(q, p)`: a weighted sum of three bits that bounds
/// how often the pair's fork administration can still change while `p`
/// waits for forks.
pub fn vf(q: Pid, p: Pid, s: &GlobalState) -> Result<u8, AnalysisError> {
    if p == q {
        return Err(AnalysisError::SamePid(p));
    }
    let bit0 = u8::from(s.local(p).need.contains(&q));
    let bit1 = u8::from(
        i64::from(s.forks.count(q, p)) + i64::from(s.channels.count(MsgKind::Gra, p, q)) == 0
            && q < p,
    );
    let lq = s.local(q);
    let bit2 = u8::from(lq.pc >= line::PRIO_WAIT && lq.nbh.contains(&p) && !lq.prio.contains(&p));
    Ok(bit0 + 2 * bit1 + 4 * bit2)
}

/// Parity link between the variant function and the need set:
/// `q ∈ need.p` exactly when `vf(q, p)` is odd.
pub fn vf_parity_holds(s: &GlobalState) -> bool {
    for &p in &s.universe {
        for &q in &s.universe {
            if p == q {
                continue;
            }
            let v = vf(q, p, s).expect("distinct pids");
            if (v % 2 == 1) != s.local(p).need.contains(&q) {
                return false;
            }
        }
    }
    true
}

/// While `p` sits at the fork-wait line with its notification registered
/// at `q`, `vf(q, p)` must not increase from one step to the next.
/// Requires per-step snapshots.
pub fn vf_monotonic(trace: &Trace, p: Pid, q: Pid) -> Result<Verdict, AnalysisError> {
    const CHECK: &str = "vf";
    if p == q {
        return Err(AnalysisError::SamePid(p));
    }
    if trace.scenario.resolved_snapshot_every() != 1 {
        return Ok(Verdict::inapplicable(
            CHECK,
            "per-step snapshots required (snapshot_every=1)".into(),
        ));
    }
    let in_window = |s: &GlobalState| s.pc(p) == line::FORK_WAIT && s.local(q).before.contains(&p);
    let mut checked = 0u64;
    for pair in trace.snapshots.windows(2) {
        let (step_a, a) = &pair[0];
        let (step_b, b) = &pair[1];
        if step_b - step_a != 1 {
            continue;
        }
        if in_window(a) && in_window(b) {
            checked += 1;
            let va = vf(q, p, a)?;
            let vb = vf(q, p, b)?;
            if vb > va {
                return Ok(Verdict::fail(
                    CHECK,
                    format!(
                        "vf({q},{p}) increased {va} -> {vb} across step {step_b} \
                         inside a fork-wait window"
                    ),
                ));
            }
        }
    }
    Ok(Verdict::pass(
        CHECK,
        format!("non-increasing over {checked} in-window steps"),
    ))
}
