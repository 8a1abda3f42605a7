//! Transition system for the two-layer partial mutual exclusion protocol.
//!
//! Every process runs three component loops over a shared message space:
//! an *environment* that triggers entry attempts (handing the process a
//! finite neighbour set) and may abort them, a *forward* component that
//! steps the process through the entry protocol, the critical section and
//! the exit protocol, and one *receive* component per peer that handles
//! incoming messages. The global behaviour is an interleaving of atomic
//! guarded alternatives; [`Alternative`] names each of the sixteen.
//!
//! Line numbers of the forward loop: 11 idle, 12 waiting for outstanding
//! acknowledgements, 13 waiting for priority holders (FCFS layer), 14
//! waiting for forks (mutual exclusion layer), 15 critical section, 16
//! exit protocol.
//!
//! The outer (FCFS) layer uses `notify`/`withdraw`/`ack` messages and the
//! private sets `prio`, `before`, `after`, `wack`. The inner layer uses
//! `req`/`gra` messages, the private sets `need`, `prom`, `away` and the
//! ghost fork counters: each unordered pair of processes shares exactly
//! one fork, held by default at the higher-numbered process.
//!
//! All operations here are pure: [`apply`] returns a fresh state and never
//! mutates its input, so states can be copied, hashed and shared freely.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Process identifier. The natural-number order decides which process of a
/// pair is "lower" and therefore has to request the shared fork.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finite set of processes, ordered for deterministic iteration.
pub type PidSet = BTreeSet<Pid>;

/// Program-counter values of the forward loop. Kept as plain `u8` so that
/// corrupted states can be constructed in tests; the range 11..=16 is an
/// invariant (`Jq0`), not a type-level guarantee.
pub mod line {
    /// Idle, outside any entry attempt.
    pub const IDLE: u8 = 11;
    /// Entry started; waiting for acknowledgements of the previous cycle.
    pub const START: u8 = 12;
    /// Waiting for the priority set to empty (FCFS).
    pub const PRIO_WAIT: u8 = 13;
    /// Waiting for the needed forks.
    pub const FORK_WAIT: u8 = 14;
    /// Critical section.
    pub const CS: u8 = 15;
    /// Exit protocol: return used forks.
    pub const EXIT: u8 = 16;
}

/// The five asynchronous message kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsgKind {
    Req,
    Gra,
    Notify,
    Withdraw,
    Ack,
}

impl MsgKind {
    pub const ALL: [MsgKind; 5] = [
        MsgKind::Req,
        MsgKind::Gra,
        MsgKind::Notify,
        MsgKind::Withdraw,
        MsgKind::Ack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::Req => "req",
            MsgKind::Gra => "gra",
            MsgKind::Notify => "notify",
            MsgKind::Withdraw => "withdraw",
            MsgKind::Ack => "ack",
        }
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One process's program counter and private sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LocalState {
    pub pc: u8,
    pub nbh: PidSet,
    pub prio: PidSet,
    pub before: PidSet,
    pub after: PidSet,
    pub wack: PidSet,
    pub away: PidSet,
    pub need: PidSet,
    pub prom: PidSet,
}

impl LocalState {
    pub fn idle() -> Self {
        LocalState {
            pc: line::IDLE,
            ..LocalState::default()
        }
    }
}

/// Message counters per (kind, sender, receiver). Channels are unordered:
/// messages may overtake each other, so a plain counter is the whole state.
/// Only nonzero counters are stored, which keeps equality and hashing
/// canonical.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Channels {
    counts: BTreeMap<(MsgKind, Pid, Pid), u32>,
}

impl Channels {
    pub fn count(&self, kind: MsgKind, from: Pid, to: Pid) -> u32 {
        self.counts.get(&(kind, from, to)).copied().unwrap_or(0)
    }

    /// Overwrite one counter (test/corruption hook). Zero entries are dropped.
    pub fn set(&mut self, kind: MsgKind, from: Pid, to: Pid, count: u32) {
        if count == 0 {
            self.counts.remove(&(kind, from, to));
        } else {
            self.counts.insert((kind, from, to), count);
        }
    }

    pub(crate) fn send(&mut self, kind: MsgKind, from: Pid, to: Pid) {
        *self.counts.entry((kind, from, to)).or_insert(0) += 1;
    }

    pub(crate) fn receive(&mut self, kind: MsgKind, from: Pid, to: Pid) {
        let c = self.counts.get_mut(&(kind, from, to)).expect("receive on empty channel");
        *c -= 1;
        if *c == 0 {
            self.counts.remove(&(kind, from, to));
        }
    }

    /// Nonzero counters in `(kind, sender, receiver)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((MsgKind, Pid, Pid), u32)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Ghost fork counters: `count(q, r)` is the number of forks for the edge
/// `{q, r}` currently held by `q`. The counters are signed because the
/// exit and grant alternatives decrement unconditionally; non-negativity
/// is an invariant (`Iq7`) that is checked, never enforced. Diagonal
/// entries are meaningless and not stored.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ForkGhost {
    held: BTreeMap<(Pid, Pid), i32>,
}

impl ForkGhost {
    /// Default distribution: the fork of every edge starts at the
    /// higher-numbered process.
    pub fn default_distribution(universe: &[Pid]) -> Self {
        let mut held = BTreeMap::new();
        for &q in universe {
            for &r in universe {
                if q != r {
                    held.insert((q, r), i32::from(r < q));
                }
            }
        }
        ForkGhost { held }
    }

    pub fn count(&self, holder: Pid, peer: Pid) -> i32 {
        debug_assert_ne!(holder, peer, "diagonal fork entries are never read");
        self.held.get(&(holder, peer)).copied().unwrap_or(0)
    }

    /// Overwrite one counter (test/corruption hook).
    pub fn set(&mut self, holder: Pid, peer: Pid, count: i32) {
        self.held.insert((holder, peer), count);
    }

    pub(crate) fn add(&mut self, holder: Pid, peer: Pid, delta: i32) {
        *self.held.entry((holder, peer)).or_insert(0) += delta;
    }
}

/// Complete protocol configuration over a finite universe of processes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalState {
    /// Sorted, duplicate-free process ids. Fixed for the lifetime of a run.
    pub universe: Vec<Pid>,
    pub locals: BTreeMap<Pid, LocalState>,
    pub channels: Channels,
    pub forks: ForkGhost,
}

impl GlobalState {
    pub fn contains(&self, p: Pid) -> bool {
        self.locals.contains_key(&p)
    }

    /// Local state of `p`. Panics on ids outside the universe; operations
    /// validate their arguments before reading.
    pub fn local(&self, p: Pid) -> &LocalState {
        self.locals.get(&p).expect("process outside universe")
    }

    pub fn pc(&self, p: Pid) -> u8 {
        self.local(p).pc
    }

    fn local_mut(&mut self, p: Pid) -> &mut LocalState {
        self.locals.get_mut(&p).expect("process outside universe")
    }

    /// All processes except `p`, in ascending order.
    pub fn others(&self, p: Pid) -> Vec<Pid> {
        self.universe.iter().copied().filter(|&q| q != p).collect()
    }
}

/// Errors from the transition-system operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("universe must not be empty")]
    EmptyUniverse,
    #[error("duplicate process id {0}")]
    DuplicateProcess(Pid),
    #[error("process {0} is outside the universe")]
    UnknownProcess(Pid),
    #[error("process {0} may not choose itself as a neighbour")]
    SelfNeighbour(Pid),
    #[error("alternative {0} is not enabled")]
    Disabled(String),
}

/// Identifier of one atomic guarded command, with its parameters.
///
/// Receive-component alternatives carry `(peer, owner)`: the second id is
/// the process executing the step, the first is the peer it concerns (the
/// sender of the message being received, or the process being answered).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Alternative {
    /// Environment triggers `p` with the chosen neighbour set.
    Env11(Pid, PidSet),
    /// Environment aborts `p` at line 12.
    Env12(Pid),
    /// Environment aborts `p` at line 13, withdrawing its notifications.
    Env13(Pid),
    /// Environment aborts `p` at line 14, returning acquired higher forks.
    Env14(Pid),
    /// `p` notifies its neighbours and computes its priority set.
    Fwd12(Pid),
    /// `p` requests the missing forks from its higher neighbours.
    Fwd13(Pid),
    /// `p` enters the critical section and withdraws its notifications.
    Fwd14(Pid),
    /// `p` executes the critical section.
    Fwd15(Pid),
    /// `p` runs the exit protocol, returning used forks.
    Fwd16(Pid),
    /// `p` receives a notification from `q`: `RcvNotify(q, p)`.
    RcvNotify(Pid, Pid),
    /// `p` receives a withdrawal from `q`.
    RcvWithdraw(Pid, Pid),
    /// `p` answers a matched notify/withdraw pair from `q` with an ack.
    After(Pid, Pid),
    /// `p` receives an acknowledgement from `q`.
    RcvAck(Pid, Pid),
    /// `p` receives a fork request from `q`.
    RcvReq(Pid, Pid),
    /// `p` receives a granted fork from `q`.
    RcvGra(Pid, Pid),
    /// `p` grants the fork promised to `q`.
    Prom(Pid, Pid),
}

impl Alternative {
    /// The process executing the step.
    pub fn actor(&self) -> Pid {
        match *self {
            Alternative::Env11(p, _)
            | Alternative::Env12(p)
            | Alternative::Env13(p)
            | Alternative::Env14(p)
            | Alternative::Fwd12(p)
            | Alternative::Fwd13(p)
            | Alternative::Fwd14(p)
            | Alternative::Fwd15(p)
            | Alternative::Fwd16(p) => p,
            Alternative::RcvNotify(_, p)
            | Alternative::RcvWithdraw(_, p)
            | Alternative::After(_, p)
            | Alternative::RcvAck(_, p)
            | Alternative::RcvReq(_, p)
            | Alternative::RcvGra(_, p)
            | Alternative::Prom(_, p) => p,
        }
    }

    /// True for environment steps, which are never subject to fairness.
    pub fn is_env(&self) -> bool {
        matches!(
            self,
            Alternative::Env11(..)
                | Alternative::Env12(_)
                | Alternative::Env13(_)
                | Alternative::Env14(_)
        )
    }

    fn validate(&self, s: &GlobalState) -> Result<(), ProtocolError> {
        let check = |p: Pid| {
            if s.contains(p) {
                Ok(())
            } else {
                Err(ProtocolError::UnknownProcess(p))
            }
        };
        match self {
            Alternative::Env11(p, nbh) => {
                check(*p)?;
                if nbh.contains(p) {
                    return Err(ProtocolError::SelfNeighbour(*p));
                }
                for &q in nbh {
                    check(q)?;
                }
                Ok(())
            }
            Alternative::Env12(p)
            | Alternative::Env13(p)
            | Alternative::Env14(p)
            | Alternative::Fwd12(p)
            | Alternative::Fwd13(p)
            | Alternative::Fwd14(p)
            | Alternative::Fwd15(p)
            | Alternative::Fwd16(p) => check(*p),
            Alternative::RcvNotify(q, p)
            | Alternative::RcvWithdraw(q, p)
            | Alternative::After(q, p)
            | Alternative::RcvAck(q, p)
            | Alternative::RcvReq(q, p)
            | Alternative::RcvGra(q, p)
            | Alternative::Prom(q, p) => {
                check(*q)?;
                check(*p)
            }
        }
    }
}

fn fmt_set(set: &PidSet, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    write!(f, "{{")?;
    for (i, p) in set.iter().enumerate() {
        if i > 0 {
            write!(f, ",")?;
        }
        write!(f, "{p}")?;
    }
    write!(f, "}}")
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alternative::Env11(p, nbh) => {
                write!(f, "Env11({p},")?;
                fmt_set(nbh, f)?;
                write!(f, ")")
            }
            Alternative::Env12(p) => write!(f, "Env12({p})"),
            Alternative::Env13(p) => write!(f, "Env13({p})"),
            Alternative::Env14(p) => write!(f, "Env14({p})"),
            Alternative::Fwd12(p) => write!(f, "Fwd12({p})"),
            Alternative::Fwd13(p) => write!(f, "Fwd13({p})"),
            Alternative::Fwd14(p) => write!(f, "Fwd14({p})"),
            Alternative::Fwd15(p) => write!(f, "Fwd15({p})"),
            Alternative::Fwd16(p) => write!(f, "Fwd16({p})"),
            Alternative::RcvNotify(q, p) => write!(f, "RcvNotify({q},{p})"),
            Alternative::RcvWithdraw(q, p) => write!(f, "RcvWithdraw({q},{p})"),
            Alternative::After(q, p) => write!(f, "After({q},{p})"),
            Alternative::RcvAck(q, p) => write!(f, "RcvAck({q},{p})"),
            Alternative::RcvReq(q, p) => write!(f, "RcvReq({q},{p})"),
            Alternative::RcvGra(q, p) => write!(f, "RcvGra({q},{p})"),
            Alternative::Prom(q, p) => write!(f, "Prom({q},{p})"),
        }
    }
}

/// Deliberate protocol defects for checker-sensitivity tests. Each one
/// removes a single guard conjunct or effect from [`apply`]; the rest of
/// the semantics is untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Line 13 fires even while the priority set is nonempty.
    SkipFwd13PrioGuard,
    /// Line 16 grants the fork without decrementing the ghost counter.
    OmitForkDecFwd16,
    /// The grant alternative forgets to re-add the granted fork to `need`.
    DropPromNeedUpdate,
    /// Line 12 fires without waiting for outstanding acknowledgements.
    SkipWackWaitFwd12,
    /// Line 14 moves to the critical section without withdrawing.
    OmitWithdrawFwd14,
    /// Line 16 keeps the used forks instead of returning them.
    OmitGraFwd16,
}

impl Mutation {
    pub const ALL: [Mutation; 6] = [
        Mutation::SkipFwd13PrioGuard,
        Mutation::OmitForkDecFwd16,
        Mutation::DropPromNeedUpdate,
        Mutation::SkipWackWaitFwd12,
        Mutation::OmitWithdrawFwd14,
        Mutation::OmitGraFwd16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::SkipFwd13PrioGuard => "skip-fwd13-prio-guard",
            Mutation::OmitForkDecFwd16 => "omit-fork-dec-fwd16",
            Mutation::DropPromNeedUpdate => "drop-prom-need-update",
            Mutation::SkipWackWaitFwd12 => "skip-wack-wait-fwd12",
            Mutation::OmitWithdrawFwd14 => "omit-withdraw-fwd14",
            Mutation::OmitGraFwd16 => "omit-gra-fwd16",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mutation '{s}'"))
    }
}

/// State with every process idle, all sets empty, all channels empty and
/// the default fork distribution.
pub fn initial_state(universe: &[Pid]) -> Result<GlobalState, ProtocolError> {
    if universe.is_empty() {
        return Err(ProtocolError::EmptyUniverse);
    }
    let mut sorted: Vec<Pid> = universe.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(ProtocolError::DuplicateProcess(w[0]));
        }
    }
    let locals = sorted.iter().map(|&p| (p, LocalState::idle())).collect();
    Ok(GlobalState {
        forks: ForkGhost::default_distribution(&sorted),
        universe: sorted,
        locals,
        channels: Channels::default(),
    })
}

/// The exact guard of `alt` in `s`. Abort guards additionally require
/// membership of the scenario's abort-enabled set `ae`.
pub fn enabled(alt: &Alternative, s: &GlobalState, ae: &PidSet) -> Result<bool, ProtocolError> {
    enabled_with(alt, s, ae, None)
}

/// [`enabled`] under an optional protocol mutation.
pub fn enabled_with(
    alt: &Alternative,
    s: &GlobalState,
    ae: &PidSet,
    mutation: Option<Mutation>,
) -> Result<bool, ProtocolError> {
    alt.validate(s)?;
    Ok(guard_holds(alt, s, ae, mutation))
}

/// Guard evaluation without argument validation; callers must pass
/// alternatives whose ids are universe members.
pub(crate) fn guard_holds(
    alt: &Alternative,
    s: &GlobalState,
    ae: &PidSet,
    mutation: Option<Mutation>,
) -> bool {
    let on = |m: Mutation| mutation == Some(m);
    match alt {
        Alternative::Env11(p, _) => s.pc(*p) == line::IDLE,
        Alternative::Env12(p) => s.pc(*p) == line::START && ae.contains(p),
        Alternative::Env13(p) => s.pc(*p) == line::PRIO_WAIT && ae.contains(p),
        Alternative::Env14(p) => {
            s.pc(*p) == line::FORK_WAIT
                && ae.contains(p)
                && s.local(*p).need.iter().all(|q| q < p)
        }
        Alternative::Fwd12(p) => {
            s.pc(*p) == line::START
                && (s.local(*p).wack.is_empty() || on(Mutation::SkipWackWaitFwd12))
        }
        Alternative::Fwd13(p) => {
            s.pc(*p) == line::PRIO_WAIT
                && (s.local(*p).prio.is_empty() || on(Mutation::SkipFwd13PrioGuard))
        }
        Alternative::Fwd14(p) => s.pc(*p) == line::FORK_WAIT && s.local(*p).need.is_empty(),
        Alternative::Fwd15(p) => s.pc(*p) == line::CS,
        Alternative::Fwd16(p) => s.pc(*p) == line::EXIT,
        Alternative::RcvNotify(q, p) => s.channels.count(MsgKind::Notify, *q, *p) > 0,
        Alternative::RcvWithdraw(q, p) => s.channels.count(MsgKind::Withdraw, *q, *p) > 0,
        Alternative::After(q, p) => {
            let l = s.local(*p);
            l.after.contains(q) && l.before.contains(q)
        }
        Alternative::RcvAck(q, p) => s.channels.count(MsgKind::Ack, *q, *p) > 0,
        Alternative::RcvReq(q, p) => s.channels.count(MsgKind::Req, *q, *p) > 0,
        Alternative::RcvGra(q, p) => s.channels.count(MsgKind::Gra, *q, *p) > 0,
        Alternative::Prom(q, p) => {
            let l = s.local(*p);
            l.prom.contains(q)
                && !l.away.contains(q)
                && !(l.pc >= line::CS && l.nbh.contains(q))
        }
    }
}

/// Execute one atomic alternative, returning the successor state.
///
/// The caller must ensure the guard holds; calling with a disabled
/// alternative is a contract violation and yields an error rather than a
/// silent no-op.
pub fn apply(alt: &Alternative, s: &GlobalState, ae: &PidSet) -> Result<GlobalState, ProtocolError> {
    apply_with(alt, s, ae, None)
}

/// [`apply`] under an optional protocol mutation.
pub fn apply_with(
    alt: &Alternative,
    s: &GlobalState,
    ae: &PidSet,
    mutation: Option<Mutation>,
) -> Result<GlobalState, ProtocolError> {
    if !enabled_with(alt, s, ae, mutation)? {
        return Err(ProtocolError::Disabled(alt.to_string()));
    }
    Ok(apply_assuming_enabled(alt, s, mutation))
}

/// Effect body of [`apply`], for callers that have just evaluated the
/// guard themselves (the explorer's successor loop).
pub(crate) fn apply_assuming_enabled(
    alt: &Alternative,
    s: &GlobalState,
    mutation: Option<Mutation>,
) -> GlobalState {
    let on = |m: Mutation| mutation == Some(m);
    let mut t = s.clone();
    match alt {
        Alternative::Env11(p, chosen) => {
            let l = t.local_mut(*p);
            l.nbh = chosen.clone();
            l.pc = line::START;
        }
        Alternative::Env12(p) => {
            let l = t.local_mut(*p);
            l.nbh.clear();
            l.pc = line::IDLE;
        }
        Alternative::Env13(p) => {
            let nbh = t.local(*p).nbh.clone();
            for &q in &nbh {
                t.channels.send(MsgKind::Withdraw, *p, q);
            }
            let l = t.local_mut(*p);
            l.wack = nbh;
            l.nbh.clear();
            l.prio.clear();
            l.pc = line::IDLE;
        }
        Alternative::Env14(p) => {
            let nbh = t.local(*p).nbh.clone();
            for &q in &nbh {
                if *p < q {
                    t.channels.send(MsgKind::Gra, *p, q);
                    t.forks.add(*p, q, -1);
                }
            }
            for &q in &nbh {
                t.channels.send(MsgKind::Withdraw, *p, q);
            }
            let l = t.local_mut(*p);
            l.wack = nbh;
            l.need.clear();
            l.nbh.clear();
            l.pc = line::IDLE;
        }
        Alternative::Fwd12(p) => {
            let nbh = t.local(*p).nbh.clone();
            for &q in &nbh {
                t.channels.send(MsgKind::Notify, *p, q);
            }
            let l = t.local_mut(*p);
            l.prio = nbh
                .iter()
                .copied()
                .filter(|q| l.before.contains(q) && !l.after.contains(q))
                .collect();
            l.pc = line::PRIO_WAIT;
        }
        Alternative::Fwd13(p) => {
            let nbh = t.local(*p).nbh.clone();
            for &q in &nbh {
                if *p < q {
                    t.channels.send(MsgKind::Req, *p, q);
                }
            }
            let l = t.local_mut(*p);
            l.need = nbh
                .iter()
                .copied()
                .filter(|&q| *p < q || l.away.contains(&q))
                .collect();
            l.pc = line::FORK_WAIT;
        }
        Alternative::Fwd14(p) => {
            let nbh = t.local(*p).nbh.clone();
            if !on(Mutation::OmitWithdrawFwd14) {
                for &q in &nbh {
                    t.channels.send(MsgKind::Withdraw, *p, q);
                }
            }
            let l = t.local_mut(*p);
            l.wack = nbh;
            l.pc = line::CS;
        }
        Alternative::Fwd15(p) => {
            t.local_mut(*p).pc = line::EXIT;
        }
        Alternative::Fwd16(p) => {
            let nbh = t.local(*p).nbh.clone();
            for &q in &nbh {
                if *p < q && !on(Mutation::OmitGraFwd16) {
                    t.channels.send(MsgKind::Gra, *p, q);
                    if !on(Mutation::OmitForkDecFwd16) {
                        t.forks.add(*p, q, -1);
                    }
                }
            }
            let l = t.local_mut(*p);
            l.nbh.clear();
            l.pc = line::IDLE;
        }
        Alternative::RcvNotify(q, p) => {
            t.channels.receive(MsgKind::Notify, *q, *p);
            t.local_mut(*p).before.insert(*q);
        }
        Alternative::RcvWithdraw(q, p) => {
            t.channels.receive(MsgKind::Withdraw, *q, *p);
            let l = t.local_mut(*p);
            l.prio.remove(q);
            l.after.insert(*q);
        }
        Alternative::After(q, p) => {
            let l = t.local_mut(*p);
            l.after.remove(q);
            l.before.remove(q);
            t.channels.send(MsgKind::Ack, *p, *q);
        }
        Alternative::RcvAck(q, p) => {
            t.channels.receive(MsgKind::Ack, *q, *p);
            t.local_mut(*p).wack.remove(q);
        }
        Alternative::RcvReq(q, p) => {
            t.channels.receive(MsgKind::Req, *q, *p);
            t.local_mut(*p).prom.insert(*q);
        }
        Alternative::RcvGra(q, p) => {
            t.channels.receive(MsgKind::Gra, *q, *p);
            t.forks.add(*p, *q, 1);
            let l = t.local_mut(*p);
            l.away.remove(q);
            l.need.remove(q);
        }
        Alternative::Prom(q, p) => {
            t.channels.send(MsgKind::Gra, *p, *q);
            t.forks.add(*p, *q, -1);
            let l = t.local_mut(*p);
            l.away.insert(*q);
            l.prom.remove(q);
            if l.pc == line::FORK_WAIT && l.nbh.contains(q) && !on(Mutation::DropPromNeedUpdate) {
                l.need.insert(*q);
            }
        }
    }
    t
}

/// Every alternative enabled in `s`. Trigger alternatives are enumerated
/// from the supplied per-process choice policy; the result is
/// deterministic given the state and the policy.
pub fn enabled_alternatives(
    s: &GlobalState,
    ae: &PidSet,
    nbh_choices: &dyn Fn(Pid) -> Vec<PidSet>,
) -> Vec<Alternative> {
    enabled_alternatives_with(s, ae, nbh_choices, None)
}

/// [`enabled_alternatives`] under an optional protocol mutation.
pub fn enabled_alternatives_with(
    s: &GlobalState,
    ae: &PidSet,
    nbh_choices: &dyn Fn(Pid) -> Vec<PidSet>,
    mutation: Option<Mutation>,
) -> Vec<Alternative> {
    let mut out = Vec::new();
    // Alternatives built from universe members below need no id
    // validation; only the policy-supplied trigger sets do.
    let mut push = |alt: Alternative| {
        if guard_holds(&alt, s, ae, mutation) {
            out.push(alt);
        }
    };
    for &p in &s.universe {
        if s.pc(p) == line::IDLE {
            for nbh in nbh_choices(p) {
                let valid = !nbh.contains(&p) && nbh.iter().all(|q| s.contains(*q));
                if valid {
                    push(Alternative::Env11(p, nbh));
                }
            }
        }
        push(Alternative::Env12(p));
        push(Alternative::Env13(p));
        push(Alternative::Env14(p));
        push(Alternative::Fwd12(p));
        push(Alternative::Fwd13(p));
        push(Alternative::Fwd14(p));
        push(Alternative::Fwd15(p));
        push(Alternative::Fwd16(p));
    }
    for &p in &s.universe {
        for &q in &s.universe {
            if q == p {
                continue;
            }
            push(Alternative::RcvNotify(q, p));
            push(Alternative::RcvWithdraw(q, p));
            push(Alternative::After(q, p));
            push(Alternative::RcvAck(q, p));
            push(Alternative::RcvReq(q, p));
            push(Alternative::RcvGra(q, p));
            push(Alternative::Prom(q, p));
        }
    }
    out
}

/// Mutual neighbourhood membership: `q ∈ nbh.p` and `p ∈ nbh.q`.
pub fn conflict(p: Pid, q: Pid, s: &GlobalState) -> bool {
    debug_assert!(s.contains(p) && s.contains(q));
    match (s.locals.get(&p), s.locals.get(&q)) {
        (Some(lp), Some(lq)) => lp.nbh.contains(&q) && lq.nbh.contains(&p),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pids(ids: &[u32]) -> Vec<Pid> {
        ids.iter().map(|&i| Pid(i)).collect()
    }

    pub(crate) fn pidset(ids: &[u32]) -> PidSet {
        ids.iter().map(|&i| Pid(i)).collect()
    }

    fn no_ae() -> PidSet {
        PidSet::new()
    }

    #[test]
    fn initial_two_processes_has_default_forks() {
        let s = initial_state(&pids(&[0, 1])).unwrap();
        assert_eq!(s.pc(Pid(0)), 11);
        assert_eq!(s.pc(Pid(1)), 11);
        assert_eq!(s.forks.count(Pid(1), Pid(0)), 1);
        assert_eq!(s.forks.count(Pid(0), Pid(1)), 0);
        assert!(s.channels.is_empty());
    }

    #[test]
    fn initial_singleton() {
        let s = initial_state(&pids(&[5])).unwrap();
        assert_eq!(s.universe, pids(&[5]));
        assert_eq!(s.pc(Pid(5)), 11);
    }

    #[test]
    fn initial_three_processes_fork_matrix() {
        let s = initial_state(&pids(&[0, 1, 2])).unwrap();
        assert_eq!(s.forks.count(Pid(2), Pid(0)), 1);
        assert_eq!(s.forks.count(Pid(2), Pid(1)), 1);
        assert_eq!(s.forks.count(Pid(1), Pid(0)), 1);
        assert_eq!(s.forks.count(Pid(0), Pid(1)), 0);
        assert_eq!(s.forks.count(Pid(0), Pid(2)), 0);
        assert_eq!(s.forks.count(Pid(1), Pid(2)), 0);
    }

    #[test]
    fn initial_rejects_bad_universes() {
        assert_eq!(initial_state(&[]), Err(ProtocolError::EmptyUniverse));
        assert_eq!(
            initial_state(&pids(&[3, 3])),
            Err(ProtocolError::DuplicateProcess(Pid(3)))
        );
    }

    #[test]
    fn only_triggers_enabled_initially() {
        let s = initial_state(&pids(&[0, 1])).unwrap();
        let full = |p: Pid| vec![s.others(p).into_iter().collect::<PidSet>()];
        let alts = enabled_alternatives(&s, &no_ae(), &full);
        assert_eq!(
            alts,
            vec![
                Alternative::Env11(Pid(0), pidset(&[1])),
                Alternative::Env11(Pid(1), pidset(&[0])),
            ]
        );
    }

    #[test]
    fn fwd12_waits_for_acks() {
        let mut s = initial_state(&pids(&[0, 1])).unwrap();
        {
            let l = s.locals.get_mut(&Pid(0)).unwrap();
            l.pc = line::START;
            l.wack = pidset(&[1]);
        }
        assert!(!enabled(&Alternative::Fwd12(Pid(0)), &s, &no_ae()).unwrap());
        s.locals.get_mut(&Pid(0)).unwrap().wack.clear();
        assert!(enabled(&Alternative::Fwd12(Pid(0)), &s, &no_ae()).unwrap());
    }

    #[test]
    fn prom_blocked_while_owner_uses_the_fork() {
        let mut s = initial_state(&pids(&[0, 1])).unwrap();
        {
            let l = s.locals.get_mut(&Pid(1)).unwrap();
            l.pc = line::CS;
            l.nbh = pidset(&[0]);
            l.prom = pidset(&[0]);
        }
        assert!(!enabled(&Alternative::Prom(Pid(0), Pid(1)), &s, &no_ae()).unwrap());
        // Outside the protected window the grant is allowed.
        s.locals.get_mut(&Pid(1)).unwrap().pc = line::FORK_WAIT;
        assert!(enabled(&Alternative::Prom(Pid(0), Pid(1)), &s, &no_ae()).unwrap());
    }

    #[test]
    fn enabled_rejects_foreign_ids() {
        let s = initial_state(&pids(&[0, 1])).unwrap();
        assert_eq!(
            enabled(&Alternative::Fwd12(Pid(7)), &s, &no_ae()),
            Err(ProtocolError::UnknownProcess(Pid(7)))
        );
        assert_eq!(
            enabled(
                &Alternative::Env11(Pid(0), pidset(&[0])),
                &s,
                &no_ae()
            ),
            Err(ProtocolError::SelfNeighbour(Pid(0)))
        );
    }

    #[test]
    fn trigger_sets_neighbourhood_and_advances() {
        let s = initial_state(&pids(&[0, 1])).unwrap();
        let t = apply(&Alternative::Env11(Pid(0), pidset(&[1])), &s, &no_ae()).unwrap();
        let mut expected = s.clone();
        {
            let l = expected.locals.get_mut(&Pid(0)).unwrap();
            l.nbh = pidset(&[1]);
            l.pc = line::START;
        }
        assert_eq!(t, expected);
    }

    #[test]
    fn fwd12_notifies_and_computes_priority() {
        let mut s = initial_state(&pids(&[0, 1])).unwrap();
        {
            let l = s.locals.get_mut(&Pid(0)).unwrap();
            l.pc = line::START;
            l.nbh = pidset(&[1]);
        }
        let t = apply(&Alternative::Fwd12(Pid(0)), &s, &no_ae()).unwrap();
        let mut expected = s.clone();
        expected.channels.set(MsgKind::Notify, Pid(0), Pid(1), 1);
        expected.locals.get_mut(&Pid(0)).unwrap().pc = line::PRIO_WAIT;
        assert_eq!(t, expected);
        assert!(t.local(Pid(0)).prio.is_empty());
    }

    #[test]
    fn prom_grants_fork_and_tracks_need() {
        // Process 1 waits at 14 with 0 in its neighbourhood while holding
        // the edge fork; granting to 0 must re-add 0 to its need set.
        let mut s = initial_state(&pids(&[0, 1])).unwrap();
        {
            let l = s.locals.get_mut(&Pid(1)).unwrap();
            l.pc = line::FORK_WAIT;
            l.nbh = pidset(&[0]);
            l.prom = pidset(&[0]);
        }
        let t = apply(&Alternative::Prom(Pid(0), Pid(1)), &s, &no_ae()).unwrap();
        assert_eq!(t.channels.count(MsgKind::Gra, Pid(1), Pid(0)), 1);
        assert_eq!(t.forks.count(Pid(1), Pid(0)), 0);
        let l = t.local(Pid(1));
        assert_eq!(l.away, pidset(&[0]));
        assert!(l.prom.is_empty());
        assert_eq!(l.need, pidset(&[0]));
    }

    #[test]
    fn apply_rejects_disabled_alternative() {
        let s = initial_state(&pids(&[0, 1])).unwrap();
        let err = apply(&Alternative::Fwd12(Pid(0)), &s, &no_ae()).unwrap_err();
        assert!(matches!(err, ProtocolError::Disabled(_)));
    }

    #[test]
    fn abort_at_prio_wait_withdraws_and_clears() {
        let ae = pidset(&[1]);
        let mut s = initial_state(&pids(&[0, 1, 2])).unwrap();
        {
            let l = s.locals.get_mut(&Pid(1)).unwrap();
            l.pc = line::PRIO_WAIT;
            l.nbh = pidset(&[0, 2]);
            l.prio = pidset(&[0]);
        }
        let t = apply(&Alternative::Env13(Pid(1)), &s, &ae).unwrap();
        let mut expected = s.clone();
        expected.channels.set(MsgKind::Withdraw, Pid(1), Pid(0), 1);
        expected.channels.set(MsgKind::Withdraw, Pid(1), Pid(2), 1);
        {
            let l = expected.locals.get_mut(&Pid(1)).unwrap();
            l.pc = line::IDLE;
            l.nbh.clear();
            l.prio.clear();
            l.wack = pidset(&[0, 2]);
        }
        assert_eq!(t, expected);
    }

    #[test]
    fn abort_at_fork_wait_returns_higher_forks() {
        let ae = pidset(&[1]);
        let mut s = initial_state(&pids(&[0, 1, 2])).unwrap();
        {
            let l = s.locals.get_mut(&Pid(1)).unwrap();
            l.pc = line::FORK_WAIT;
            l.nbh = pidset(&[0, 2]);
        }
        // 1 acquired the fork towards its higher neighbour 2 earlier.
        s.forks.set(Pid(1), Pid(2), 1);
        s.forks.set(Pid(2), Pid(1), 0);
        // Guard rejects while a higher fork is still needed.
        {
            let l = s.locals.get_mut(&Pid(1)).unwrap();
            l.need = pidset(&[2]);
        }
        assert!(!enabled(&Alternative::Env14(Pid(1)), &s, &ae).unwrap());
        s.locals.get_mut(&Pid(1)).unwrap().need = pidset(&[0]);
        let t = apply(&Alternative::Env14(Pid(1)), &s, &ae).unwrap();
        let mut expected = s.clone();
        expected.channels.set(MsgKind::Gra, Pid(1), Pid(2), 1);
        expected.forks.set(Pid(1), Pid(2), 0);
        expected.channels.set(MsgKind::Withdraw, Pid(1), Pid(0), 1);
        expected.channels.set(MsgKind::Withdraw, Pid(1), Pid(2), 1);
        {
            let l = expected.locals.get_mut(&Pid(1)).unwrap();
            l.pc = line::IDLE;
            l.nbh.clear();
            l.need.clear();
            l.wack = pidset(&[0, 2]);
        }
        assert_eq!(t, expected);
    }

    /// Hand-executed complete cycle of process 0 against idle process 1,
    /// including the message drain back to a quiescent state. Each step
    /// asserts the state details that the semantics pins down.
    #[test]
    fn full_two_process_cycle_returns_to_initial() {
        let ae = no_ae();
        let init = initial_state(&pids(&[0, 1])).unwrap();
        let p0 = Pid(0);
        let p1 = Pid(1);

        let s = apply(&Alternative::Env11(p0, pidset(&[1])), &init, &ae).unwrap();
        let s = apply(&Alternative::Fwd12(p0), &s, &ae).unwrap();
        assert_eq!(s.channels.count(MsgKind::Notify, p0, p1), 1);
        let s = apply(&Alternative::RcvNotify(p0, p1), &s, &ae).unwrap();
        assert_eq!(s.local(p1).before, pidset(&[0]));
        let s = apply(&Alternative::Fwd13(p0), &s, &ae).unwrap();
        assert_eq!(s.channels.count(MsgKind::Req, p0, p1), 1);
        assert_eq!(s.local(p0).need, pidset(&[1]));
        let s = apply(&Alternative::RcvReq(p0, p1), &s, &ae).unwrap();
        assert_eq!(s.local(p1).prom, pidset(&[0]));
        let s = apply(&Alternative::Prom(p0, p1), &s, &ae).unwrap();
        assert_eq!(s.forks.count(p1, p0), 0);
        let s = apply(&Alternative::RcvGra(p1, p0), &s, &ae).unwrap();
        assert_eq!(s.forks.count(p0, p1), 1);
        assert!(s.local(p0).need.is_empty());
        let s = apply(&Alternative::Fwd14(p0), &s, &ae).unwrap();
        assert_eq!(s.pc(p0), line::CS);
        assert_eq!(s.local(p0).wack, pidset(&[1]));
        let s = apply(&Alternative::Fwd15(p0), &s, &ae).unwrap();
        let s = apply(&Alternative::Fwd16(p0), &s, &ae).unwrap();
        assert_eq!(s.pc(p0), line::IDLE);
        assert_eq!(s.channels.count(MsgKind::Gra, p0, p1), 1);

        // Drain: withdraw/ack handshake plus the returned fork.
        let s = apply(&Alternative::RcvWithdraw(p0, p1), &s, &ae).unwrap();
        assert_eq!(s.local(p1).after, pidset(&[0]));
        let s = apply(&Alternative::After(p0, p1), &s, &ae).unwrap();
        assert_eq!(s.channels.count(MsgKind::Ack, p1, p0), 1);
        let s = apply(&Alternative::RcvAck(p1, p0), &s, &ae).unwrap();
        assert!(s.local(p0).wack.is_empty());
        let s = apply(&Alternative::RcvGra(p0, p1), &s, &ae).unwrap();

        assert_eq!(s, init);
    }

    #[test]
    fn conflict_requires_mutual_membership() {
        let mut s = initial_state(&pids(&[0, 1])).unwrap();
        s.locals.get_mut(&Pid(0)).unwrap().nbh = pidset(&[1]);
        assert!(!conflict(Pid(0), Pid(1), &s));
        s.locals.get_mut(&Pid(1)).unwrap().nbh = pidset(&[0]);
        assert!(conflict(Pid(0), Pid(1), &s));
        assert!(!conflict(Pid(0), Pid(0), &s));
    }

    #[test]
    fn receive_alternatives_follow_channel_counts() {
        let mut s = initial_state(&pids(&[0, 1])).unwrap();
        s.channels.set(MsgKind::Notify, Pid(0), Pid(1), 1);
        let none = |_: Pid| vec![PidSet::new()];
        let alts = enabled_alternatives(&s, &no_ae(), &none);
        assert!(alts.contains(&Alternative::RcvNotify(Pid(0), Pid(1))));
        assert!(!alts.contains(&Alternative::RcvNotify(Pid(1), Pid(0))));
    }

    #[test]
    fn apply_is_pure_and_deterministic() {
        use rand::prelude::*;
        let ae = pidset(&[0, 1, 2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let universe = pids(&[0, 1, 2]);
        let mut s = initial_state(&universe).unwrap();
        let choices = |p: Pid| {
            let mut out = vec![PidSet::new()];
            let others: Vec<Pid> = universe.iter().copied().filter(|&q| q != p).collect();
            out.push(others.iter().copied().collect());
            out
        };
        for _ in 0..300 {
            let alts = enabled_alternatives(&s, &ae, &choices);
            if alts.is_empty() {
                break;
            }
            let alt = alts[rng.gen_range(0..alts.len())].clone();
            let before = s.clone();
            let a = apply(&alt, &s, &ae).unwrap();
            let b = apply(&alt, &s, &ae).unwrap();
            assert_eq!(a, b);
            assert_eq!(s, before);
            s = a;
        }
    }
}
