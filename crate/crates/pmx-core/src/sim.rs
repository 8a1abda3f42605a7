//! Seeded, replayable executions of the protocol.
//!
//! A [`Scenario`] fixes the universe, the abort-enabled set, a stochastic
//! environment policy and a scheduler policy. One engine *round* consists
//! of an environment phase (each idle process may be triggered, each
//! abort-enabled process may be aborted, decided by seeded coins) followed
//! by one scheduler-chosen step of a forward or receive alternative.
//!
//! Weak fairness is operationalized as bounded delay: under the
//! `fair-round-robin` policy, a forward or receive alternative that stays
//! continuously enabled fires within `K` rounds. [`fairness_audit`]
//! re-executes a trace and reports every alternative for which that bound
//! was missed. The `adversarial-freeze` policy deliberately breaks global
//! fairness for selected components, which is what the maximal-concurrency
//! scenarios need.
//!
//! All randomness flows from the scenario seed through one ChaCha stream,
//! so [`replay`] reproduces the event sequence bit for bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariants::check_all;
use crate::protocol::{
    apply_with, enabled_with, initial_state, line, Alternative, GlobalState, MsgKind, Mutation,
    Pid, PidSet,
};

/// How a trigger chooses the neighbour set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NbhDist {
    /// Always the full set of other processes.
    All,
    /// Each other process independently with probability 1/2.
    Uniform,
    /// Uniform subset of size at least `min` (clamped to what exists).
    Dense { min: usize },
    /// Explicit candidate sets per process, chosen uniformly. Processes
    /// without an entry are never triggered.
    Fixed { sets: BTreeMap<Pid, Vec<PidSet>> },
}

/// Stochastic environment: trigger and abort coins per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPolicy {
    pub trigger_prob: f64,
    pub nbh_dist: NbhDist,
    #[serde(default)]
    pub abort_prob: f64,
    /// Trigger budget per process; `None` means unlimited.
    #[serde(default)]
    pub max_triggers: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    FairRoundRobin,
    Random,
    AdversarialFreeze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentClass {
    Forward,
    Receive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeWhen {
    /// Frozen from the first round on.
    Start,
    /// Frozen once the process first reaches the critical section.
    AtCs,
}

fn default_freeze_when() -> FreezeWhen {
    FreezeWhen::Start
}

/// One frozen (process, component) pair under `adversarial-freeze`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Freeze {
    pub process: Pid,
    pub component: ComponentClass,
    #[serde(default = "default_freeze_when")]
    pub when: FreezeWhen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSpec {
    pub policy: Policy,
    pub seed: u64,
    /// Fairness bound in rounds; defaults to four times the number of
    /// fair alternative slots of the universe.
    #[serde(rename = "K", default)]
    pub k: Option<u64>,
    #[serde(default)]
    pub freeze: Vec<Freeze>,
    /// Rounds a process must dwell in the critical section before its
    /// forward step becomes schedulable again; emulates CS duration.
    #[serde(default)]
    pub dwell: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub universe: Vec<Pid>,
    #[serde(default)]
    pub ae: PidSet,
    pub env: EnvPolicy,
    pub scheduler: SchedulerSpec,
    pub max_steps: u64,
    #[serde(default)]
    pub snapshot_every: Option<u64>,
    /// Check the invariant catalog after every step (on by default).
    #[serde(default = "default_true")]
    pub check_invariants: bool,
}

fn default_true() -> bool {
    true
}

/// Fair alternative slots of an `n`-process universe: one forward slot per
/// process plus seven receive-component slots per ordered pair.
pub fn slot_count(n: usize) -> u64 {
    (n + 7 * n * (n - 1)) as u64
}

impl Scenario {
    pub fn resolved_k(&self) -> u64 {
        self.scheduler
            .k
            .unwrap_or_else(|| 4 * slot_count(self.universe.len()))
    }

    pub fn resolved_snapshot_every(&self) -> u64 {
        self.snapshot_every
            .unwrap_or(if self.universe.len() <= 5 { 1 } else { 100 })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::InvalidScenario(msg));
        if self.universe.is_empty() {
            return fail("empty universe".into());
        }
        if self.max_steps == 0 {
            return fail("max_steps must be >= 1".into());
        }
        if self.resolved_k() == 0 {
            return fail("K must be >= 1".into());
        }
        for p in &self.ae {
            if !self.universe.contains(p) {
                return fail(format!("abort-enabled process {p} outside universe"));
            }
        }
        for prob in [self.env.trigger_prob, self.env.abort_prob] {
            if !(0.0..=1.0).contains(&prob) {
                return fail(format!("probability {prob} outside [0,1]"));
            }
        }
        if let NbhDist::Fixed { sets } = &self.env.nbh_dist {
            for (p, list) in sets {
                if !self.universe.contains(p) {
                    return fail(format!("fixed neighbour sets for {p} outside universe"));
                }
                if list.is_empty() {
                    return fail(format!("fixed neighbour sets for {p} must be nonempty"));
                }
                for set in list {
                    if set.contains(p) {
                        return fail(format!("process {p} may not choose itself"));
                    }
                    for q in set {
                        if !self.universe.contains(q) {
                            return fail(format!("neighbour {q} outside universe"));
                        }
                    }
                }
            }
        }
        if !self.scheduler.freeze.is_empty() && self.scheduler.policy != Policy::AdversarialFreeze
        {
            return fail(
                "freeze entries require the adversarial-freeze policy; \
                 fair policies must keep every component weakly fair"
                    .into(),
            );
        }
        for f in &self.scheduler.freeze {
            if !self.universe.contains(&f.process) {
                return fail(format!("frozen process {} outside universe", f.process));
            }
        }
        Ok(())
    }

    pub fn is_frozen(&self, p: Pid) -> bool {
        self.scheduler.freeze.iter().any(|f| f.process == p)
    }
}

/// What happened at one step, beyond the alternative that fired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    /// Entry attempt triggered with the chosen neighbour set.
    Trigger { p: Pid, nbh: PidSet },
    /// Entry attempt aborted at the given line.
    Abort { p: Pid, line: u8 },
    /// Entry protocol started (notifications sent).
    EntryStart { p: Pid },
    /// Critical section executed.
    CsEnter { p: Pid },
    /// Exit protocol executed.
    CsExit { p: Pid },
    /// Process back at the idle line.
    Idle { p: Pid },
    Send { kind: MsgKind, from: Pid, to: Pid },
    Receive { kind: MsgKind, from: Pid, to: Pid },
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventKind::Trigger { p, nbh } => {
                write!(f, "trigger({p},{{")?;
                for (i, q) in nbh.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{q}")?;
                }
                write!(f, "}})")
            }
            EventKind::Abort { p, line } => write!(f, "abort({p},{line})"),
            EventKind::EntryStart { p } => write!(f, "entry_start({p})"),
            EventKind::CsEnter { p } => write!(f, "cs_enter({p})"),
            EventKind::CsExit { p } => write!(f, "cs_exit({p})"),
            EventKind::Idle { p } => write!(f, "idle({p})"),
            EventKind::Send { kind, from, to } => write!(f, "send({kind},{from},{to})"),
            EventKind::Receive { kind, from, to } => write!(f, "receive({kind},{from},{to})"),
        }
    }
}

/// One trace record. Several events may share a step when one alternative
/// has several effects (a trigger, its sends, the return to idle).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub step: u64,
    pub alt: Alternative,
    pub kind: EventKind,
    /// Cycle counter of the acting process; 0 before its first trigger.
    pub session: u64,
}

impl std::fmt::Display for Event {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} alt={} kind={} session={}",
            self.step, self.alt, self.kind, self.session
        )
    }
}

/// A finished execution: replaying the scenario reproduces `events`
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub scenario: Scenario,
    pub events: Vec<Event>,
    /// Sampled states: `(step, state after that many steps)`, always
    /// including step 0 and the final state.
    pub snapshots: Vec<(u64, GlobalState)>,
    pub final_state: GlobalState,
    /// Proper steps taken.
    pub steps: u64,
    /// Scheduler rounds consumed.
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invariant violation at step {step}: {detail}")]
    InvariantViolation { step: u64, detail: String },
    #[error(
        "replay diverged at event index {index}: recorded `{recorded}`, replayed `{replayed}`"
    )]
    ReplayDivergence {
        index: usize,
        recorded: String,
        replayed: String,
    },
    #[error("protocol error during simulation: {0}")]
    Protocol(String),
}

/// Identity of a weakly fair alternative slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlotId {
    Forward(Pid),
    /// `Rcv(kind, from, to)`: `to` receives `kind` from `from`.
    Rcv(MsgKind, Pid, Pid),
    /// Ack-answer slot of the pair `(peer, owner)`.
    After(Pid, Pid),
    /// Grant slot of the pair `(peer, owner)`.
    Prom(Pid, Pid),
}

impl SlotId {
    pub fn owner(&self) -> Pid {
        match *self {
            SlotId::Forward(p) => p,
            SlotId::Rcv(_, _, p) | SlotId::After(_, p) | SlotId::Prom(_, p) => p,
        }
    }

    /// The peer process for receive-component slots.
    pub fn peer(&self) -> Option<Pid> {
        match *self {
            SlotId::Forward(_) => None,
            SlotId::Rcv(_, q, _) | SlotId::After(q, _) | SlotId::Prom(q, _) => Some(q),
        }
    }

    pub fn class(&self) -> ComponentClass {
        match self {
            SlotId::Forward(_) => ComponentClass::Forward,
            _ => ComponentClass::Receive,
        }
    }

    /// True if the slot is `p`'s own step or carries messages to or from
    /// `p`; this is the scope of per-process fairness.
    pub fn involves(&self, p: Pid) -> bool {
        self.owner() == p || self.peer() == Some(p)
    }

    /// Slot enumeration of a universe, in fixed scheduling order.
    pub fn enumerate(universe: &[Pid]) -> Vec<SlotId> {
        let mut slots = Vec::new();
        for &p in universe {
            slots.push(SlotId::Forward(p));
            for &q in universe {
                if q == p {
                    continue;
                }
                slots.push(SlotId::Rcv(MsgKind::Notify, q, p));
                slots.push(SlotId::Rcv(MsgKind::Withdraw, q, p));
                slots.push(SlotId::After(q, p));
                slots.push(SlotId::Rcv(MsgKind::Ack, q, p));
                slots.push(SlotId::Rcv(MsgKind::Req, q, p));
                slots.push(SlotId::Rcv(MsgKind::Gra, q, p));
                slots.push(SlotId::Prom(q, p));
            }
        }
        slots
    }

    /// The alternative this slot would fire in `s`, before guard checks.
    fn alternative(&self, s: &GlobalState) -> Option<Alternative> {
        match *self {
            SlotId::Forward(p) => {
                let alt = match s.pc(p) {
                    line::START => Alternative::Fwd12(p),
                    line::PRIO_WAIT => Alternative::Fwd13(p),
                    line::FORK_WAIT => Alternative::Fwd14(p),
                    line::CS => Alternative::Fwd15(p),
                    line::EXIT => Alternative::Fwd16(p),
                    _ => return None,
                };
                Some(alt)
            }
            SlotId::Rcv(kind, q, p) => Some(match kind {
                MsgKind::Notify => Alternative::RcvNotify(q, p),
                MsgKind::Withdraw => Alternative::RcvWithdraw(q, p),
                MsgKind::Ack => Alternative::RcvAck(q, p),
                MsgKind::Req => Alternative::RcvReq(q, p),
                MsgKind::Gra => Alternative::RcvGra(q, p),
            }),
            SlotId::After(q, p) => Some(Alternative::After(q, p)),
            SlotId::Prom(q, p) => Some(Alternative::Prom(q, p)),
        }
    }
}

impl std::fmt::Display for SlotId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SlotId::Forward(p) => write!(f, "forward({p})"),
            SlotId::Rcv(kind, q, p) => write!(f, "rcv({kind},{q},{p})"),
            SlotId::After(q, p) => write!(f, "after({q},{p})"),
            SlotId::Prom(q, p) => write!(f, "prom({q},{p})"),
        }
    }
}

/// A missed fairness bound: the slot stayed eligible, unfired, for more
/// than `K` consecutive rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FairnessDebt {
    pub slot: SlotId,
    pub from_round: u64,
    pub to_round: u64,
}

/// Run the scenario to completion (step budget exhausted or quiescence).
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    run_with(scenario, None)
}

/// [`run`] under an optional protocol mutation.
pub fn run_with(scenario: &Scenario, mutation: Option<Mutation>) -> Result<Trace, SimError> {
    execute(scenario, mutation, None).map(|(trace, _)| trace)
}

/// Re-execute the trace's scenario and verify the recorded events match
/// bit for bit; returns the regenerated trace (with snapshots).
pub fn replay(trace: &Trace) -> Result<Trace, SimError> {
    replay_with(trace, None)
}

/// [`replay`] under the mutation the original run used, if any.
pub fn replay_with(trace: &Trace, mutation: Option<Mutation>) -> Result<Trace, SimError> {
    let fresh = run_with(&trace.scenario, mutation)?;
    compare_events(&trace.events, &fresh.events)?;
    Ok(fresh)
}

pub(crate) fn compare_events(recorded: &[Event], replayed: &[Event]) -> Result<(), SimError> {
    let n = recorded.len().max(replayed.len());
    for i in 0..n {
        match (recorded.get(i), replayed.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => {
                return Err(SimError::ReplayDivergence {
                    index: i,
                    recorded: a.map(|e| e.to_string()).unwrap_or_else(|| "<none>".into()),
                    replayed: b.map(|e| e.to_string()).unwrap_or_else(|| "<none>".into()),
                })
            }
        }
    }
    Ok(())
}

/// Re-execute the trace and report every fairness debt of non-frozen
/// forward/receive slots against the scenario's bound `K`.
pub fn fairness_audit(trace: &Trace) -> Result<Vec<FairnessDebt>, SimError> {
    fairness_audit_with(trace, None)
}

pub fn fairness_audit_with(
    trace: &Trace,
    mutation: Option<Mutation>,
) -> Result<Vec<FairnessDebt>, SimError> {
    let mut audit = AuditState::new(trace.scenario.resolved_k());
    let (fresh, slots) = execute(&trace.scenario, mutation, Some(&mut audit))?;
    compare_events(&trace.events, &fresh.events)?;
    Ok(audit.close(&slots))
}

/// Continuous-eligibility bookkeeping for the fairness audit.
struct AuditState {
    k: u64,
    streak_start: Vec<Option<u64>>,
    debts: Vec<(usize, u64, u64)>,
    last_round: u64,
}

impl AuditState {
    fn new(k: u64) -> Self {
        AuditState {
            k,
            streak_start: Vec::new(),
            debts: Vec::new(),
            last_round: 0,
        }
    }

    fn on_round(&mut self, round: u64, eligible: &[bool], fired: Option<usize>) {
        if self.streak_start.is_empty() {
            self.streak_start = vec![None; eligible.len()];
        }
        self.last_round = round;
        for (i, &on) in eligible.iter().enumerate() {
            if on && fired != Some(i) {
                if self.streak_start[i].is_none() {
                    self.streak_start[i] = Some(round);
                }
                continue;
            }
            if let Some(start) = self.streak_start[i].take() {
                // The streak covers start..round-1 if the slot went
                // disabled, start..=round if it only fired now.
                let end = if fired == Some(i) {
                    round
                } else {
                    round.saturating_sub(1)
                };
                if end.saturating_sub(start) + 1 > self.k {
                    self.debts.push((i, start, end));
                }
            }
        }
    }

    fn close(mut self, slots: &[SlotId]) -> Vec<FairnessDebt> {
        let open: Vec<(usize, u64)> = self
            .streak_start
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|start| (i, start)))
            .collect();
        for (i, start) in open {
            if self.last_round.saturating_sub(start) + 1 > self.k {
                self.debts.push((i, start, self.last_round));
            }
        }
        self.debts
            .into_iter()
            .map(|(i, from_round, to_round)| FairnessDebt {
                slot: slots[i],
                from_round,
                to_round,
            })
            .collect()
    }
}

fn execute(
    scenario: &Scenario,
    mutation: Option<Mutation>,
    audit: Option<&mut AuditState>,
) -> Result<(Trace, Vec<SlotId>), SimError> {
    scenario.validate()?;
    let mut engine = Engine::new(scenario, mutation)?;
    engine.run_loop(audit)?;
    let slots = engine.slots.clone();
    Ok((engine.into_trace(), slots))
}

struct Engine<'a> {
    sc: &'a Scenario,
    mutation: Option<Mutation>,
    rng: ChaCha8Rng,
    state: GlobalState,
    sessions: BTreeMap<Pid, u64>,
    triggers_used: BTreeMap<Pid, u64>,
    slots: Vec<SlotId>,
    cursor: usize,
    /// Activation flag per freeze entry.
    freeze_active: Vec<bool>,
    /// Round at which each process last arrived in the critical section.
    cs_entered_round: BTreeMap<Pid, u64>,
    step: u64,
    round: u64,
    events: Vec<Event>,
    snapshots: Vec<(u64, GlobalState)>,
    snapshot_every: u64,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, mutation: Option<Mutation>) -> Result<Self, SimError> {
        let state =
            initial_state(&sc.universe).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let slots = SlotId::enumerate(&state.universe);
        let snapshots = vec![(0, state.clone())];
        Ok(Engine {
            sc,
            mutation,
            rng: ChaCha8Rng::seed_from_u64(sc.scheduler.seed),
            sessions: state.universe.iter().map(|&p| (p, 0)).collect(),
            triggers_used: state.universe.iter().map(|&p| (p, 0)).collect(),
            freeze_active: sc
                .scheduler
                .freeze
                .iter()
                .map(|f| f.when == FreezeWhen::Start)
                .collect(),
            cs_entered_round: BTreeMap::new(),
            state,
            slots,
            cursor: 0,
            step: 0,
            round: 0,
            events: Vec::new(),
            snapshots,
            snapshot_every: sc.resolved_snapshot_every(),
        })
    }

    fn into_trace(self) -> Trace {
        Trace {
            scenario: self.sc.clone(),
            events: self.events,
            final_state: self.state.clone(),
            snapshots: self.snapshots,
            steps: self.step,
            rounds: self.round,
        }
    }

    fn session_of(&self, p: Pid) -> u64 {
        self.sessions[&p]
    }

    fn slot_frozen(&self, slot: &SlotId) -> bool {
        self.sc
            .scheduler
            .freeze
            .iter()
            .zip(&self.freeze_active)
            .any(|(f, &active)| active && f.process == slot.owner() && f.component == slot.class())
    }

    /// The slot's enabled alternative, ignoring freeze and dwell.
    fn slot_enabled(&self, slot: &SlotId) -> Option<Alternative> {
        let alt = slot.alternative(&self.state)?;
        enabled_with(&alt, &self.state, &self.sc.ae, self.mutation)
            .unwrap_or(false)
            .then_some(alt)
    }

    /// Whether the slot may be scheduled now: enabled, not frozen, and
    /// past its CS dwell.
    fn slot_eligible(&self, slot: &SlotId) -> Option<Alternative> {
        let alt = self.slot_enabled(slot)?;
        if self.slot_frozen(slot) {
            return None;
        }
        if let Alternative::Fwd15(p) = alt {
            if let Some(&entered) = self.cs_entered_round.get(&p) {
                if self.round < entered + self.sc.scheduler.dwell {
                    return None;
                }
            }
        }
        Some(alt)
    }

    fn fire(&mut self, alt: &Alternative) -> Result<(), SimError> {
        let next = apply_with(alt, &self.state, &self.sc.ae, self.mutation)
            .map_err(|e| SimError::Protocol(e.to_string()))?;
        self.step += 1;
        let step = self.step;

        // Marker event first.
        match alt {
            Alternative::Env11(p, nbh) => {
                *self.sessions.get_mut(p).unwrap() += 1;
                *self.triggers_used.get_mut(p).unwrap() += 1;
                self.push_event(
                    step,
                    alt,
                    EventKind::Trigger {
                        p: *p,
                        nbh: nbh.clone(),
                    },
                    *p,
                );
            }
            Alternative::Env12(p) => {
                self.push_event(step, alt, EventKind::Abort { p: *p, line: 12 }, *p)
            }
            Alternative::Env13(p) => {
                self.push_event(step, alt, EventKind::Abort { p: *p, line: 13 }, *p)
            }
            Alternative::Env14(p) => {
                self.push_event(step, alt, EventKind::Abort { p: *p, line: 14 }, *p)
            }
            Alternative::Fwd12(p) => {
                self.push_event(step, alt, EventKind::EntryStart { p: *p }, *p)
            }
            Alternative::Fwd15(p) => self.push_event(step, alt, EventKind::CsEnter { p: *p }, *p),
            Alternative::Fwd16(p) => self.push_event(step, alt, EventKind::CsExit { p: *p }, *p),
            Alternative::RcvNotify(q, p) => {
                self.push_receive(step, alt, MsgKind::Notify, *q, *p)
            }
            Alternative::RcvWithdraw(q, p) => {
                self.push_receive(step, alt, MsgKind::Withdraw, *q, *p)
            }
            Alternative::RcvAck(q, p) => self.push_receive(step, alt, MsgKind::Ack, *q, *p),
            Alternative::RcvReq(q, p) => self.push_receive(step, alt, MsgKind::Req, *q, *p),
            Alternative::RcvGra(q, p) => self.push_receive(step, alt, MsgKind::Gra, *q, *p),
            Alternative::Fwd13(_)
            | Alternative::Fwd14(_)
            | Alternative::After(..)
            | Alternative::Prom(..) => {}
        }

        // Send events from this step's channel delta.
        for ((kind, from, to), count) in next.channels.iter() {
            let before = self.state.channels.count(kind, from, to);
            for _ in before..count {
                self.push_event(step, alt, EventKind::Send { kind, from, to }, from);
            }
        }

        // Return-to-idle marker last.
        let actor = alt.actor();
        if next.pc(actor) == line::IDLE && self.state.pc(actor) != line::IDLE {
            self.push_event(step, alt, EventKind::Idle { p: actor }, actor);
        }

        self.state = next;

        if self.state.pc(actor) == line::CS {
            self.cs_entered_round.insert(actor, self.round);
            // Arrival in the critical section activates at-CS freezes.
            for (f, active) in self
                .sc
                .scheduler
                .freeze
                .iter()
                .zip(self.freeze_active.iter_mut())
            {
                if f.when == FreezeWhen::AtCs && f.process == actor {
                    *active = true;
                }
            }
        }

        if self.sc.check_invariants {
            let vs = check_all(&self.state);
            if !vs.is_empty() {
                return Err(SimError::InvariantViolation {
                    step,
                    detail: vs[0].to_string(),
                });
            }
        }
        if step.is_multiple_of(self.snapshot_every) {
            self.snapshots.push((step, self.state.clone()));
        }
        Ok(())
    }

    fn push_receive(&mut self, step: u64, alt: &Alternative, kind: MsgKind, from: Pid, to: Pid) {
        self.push_event(step, alt, EventKind::Receive { kind, from, to }, to);
    }

    fn push_event(&mut self, step: u64, alt: &Alternative, kind: EventKind, of: Pid) {
        self.events.push(Event {
            step,
            alt: alt.clone(),
            kind,
            session: self.session_of(of),
        });
    }

    fn sample_nbh(&mut self, p: Pid) -> Option<PidSet> {
        let others: Vec<Pid> = self.state.others(p);
        match &self.sc.env.nbh_dist {
            NbhDist::All => Some(others.into_iter().collect()),
            NbhDist::Uniform => Some(
                others
                    .into_iter()
                    .filter(|_| self.rng.gen_bool(0.5))
                    .collect(),
            ),
            NbhDist::Dense { min } => {
                let m = others.len();
                let lo = (*min).min(m);
                let k = self.rng.gen_range(lo..=m);
                let mut pool = others;
                // Partial Fisher-Yates: the first k entries become the sample.
                for i in 0..k {
                    let j = self.rng.gen_range(i..pool.len());
                    pool.swap(i, j);
                }
                Some(pool.into_iter().take(k).collect())
            }
            NbhDist::Fixed { sets } => {
                let list = sets.get(&p)?;
                let idx = self.rng.gen_range(0..list.len());
                Some(list[idx].clone())
            }
        }
    }

    /// Whether the environment could still act now or later, assuming no
    /// fair step changes the state first.
    fn env_possible(&self) -> bool {
        let budget = self.sc.env.max_triggers.unwrap_or(u64::MAX);
        let can_trigger = self.sc.env.trigger_prob > 0.0
            && self.state.universe.iter().any(|&p| {
                self.state.pc(p) == line::IDLE
                    && self.triggers_used[&p] < budget
                    && !matches!(&self.sc.env.nbh_dist,
                                 NbhDist::Fixed { sets } if !sets.contains_key(&p))
            });
        if can_trigger {
            return true;
        }
        self.sc.env.abort_prob > 0.0
            && self.state.universe.iter().any(|&p| {
                self.sc.ae.contains(&p)
                    && match self.state.pc(p) {
                        line::START | line::PRIO_WAIT => true,
                        line::FORK_WAIT => self.state.local(p).need.iter().all(|q| *q < p),
                        _ => false,
                    }
            })
    }

    fn env_phase(&mut self) -> Result<bool, SimError> {
        let mut fired = false;
        let budget = self.sc.env.max_triggers.unwrap_or(u64::MAX);
        for p in self.state.universe.clone() {
            if self.step >= self.sc.max_steps {
                break;
            }
            let pc = self.state.pc(p);
            if pc == line::IDLE {
                if self.triggers_used[&p] >= budget || self.sc.env.trigger_prob <= 0.0 {
                    continue;
                }
                if self.rng.gen_bool(self.sc.env.trigger_prob) {
                    if let Some(nbh) = self.sample_nbh(p) {
                        self.fire(&Alternative::Env11(p, nbh))?;
                        fired = true;
                    }
                }
            } else if self.sc.ae.contains(&p)
                && self.sc.env.abort_prob > 0.0
                && matches!(pc, line::START | line::PRIO_WAIT | line::FORK_WAIT)
                && self.rng.gen_bool(self.sc.env.abort_prob)
            {
                let alt = match pc {
                    line::START => Alternative::Env12(p),
                    line::PRIO_WAIT => Alternative::Env13(p),
                    _ => Alternative::Env14(p),
                };
                if enabled_with(&alt, &self.state, &self.sc.ae, self.mutation).unwrap_or(false) {
                    self.fire(&alt)?;
                    fired = true;
                }
            }
        }
        Ok(fired)
    }

    fn run_loop(&mut self, mut audit: Option<&mut AuditState>) -> Result<(), SimError> {
        let round_cap = self.sc.max_steps.saturating_mul(8).max(10_000);
        while self.step < self.sc.max_steps && self.round < round_cap {
            self.round += 1;
            let env_fired = self.env_phase()?;
            if self.step >= self.sc.max_steps {
                break;
            }

            let eligible: Vec<Option<Alternative>> = self
                .slots
                .iter()
                .map(|slot| self.slot_eligible(slot))
                .collect();
            let eligible_mask: Vec<bool> = eligible.iter().map(|e| e.is_some()).collect();
            let any_eligible = eligible_mask.iter().any(|&b| b);

            let pick: Option<usize> = if !any_eligible {
                None
            } else {
                match self.sc.scheduler.policy {
                    Policy::FairRoundRobin | Policy::AdversarialFreeze => {
                        let n = self.slots.len();
                        (0..n)
                            .map(|off| (self.cursor + off) % n)
                            .find(|&i| eligible_mask[i])
                    }
                    Policy::Random => {
                        let candidates: Vec<usize> = eligible_mask
                            .iter()
                            .enumerate()
                            .filter(|(_, &b)| b)
                            .map(|(i, _)| i)
                            .collect();
                        Some(candidates[self.rng.gen_range(0..candidates.len())])
                    }
                }
            };

            if let Some(i) = pick {
                let alt = eligible[i].clone().expect("picked slot is eligible");
                self.fire(&alt)?;
                if matches!(
                    self.sc.scheduler.policy,
                    Policy::FairRoundRobin | Policy::AdversarialFreeze
                ) {
                    self.cursor = (i + 1) % self.slots.len();
                }
            }

            if let Some(a) = audit.as_deref_mut() {
                a.on_round(self.round, &eligible_mask, pick);
            }

            if pick.is_none() && !env_fired {
                // Dwelling slots wake up later; frozen ones never do.
                let any_pending = self
                    .slots
                    .iter()
                    .any(|slot| self.slot_enabled(slot).is_some() && !self.slot_frozen(slot));
                if !any_pending && !self.env_possible() {
                    break; // quiescent: nothing can ever fire again
                }
            }
        }
        // Always record the final state as a snapshot.
        if self.snapshots.last().map(|(s, _)| *s) != Some(self.step) {
            self.snapshots.push((self.step, self.state.clone()));
        }
        Ok(())
    }
}
