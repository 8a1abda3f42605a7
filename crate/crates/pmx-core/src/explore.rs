//! Exhaustive breadth-first exploration of the reachable state space for
//! small configurations.
//!
//! Every visited state is checked against the full invariant catalog and
//! the priority-acyclicity condition; failures come back with a replayable
//! counterexample path. A state in which no forward or receive alternative
//! is enabled is *silent*; silent states with a non-idle process are
//! deadlocks and reported separately.
//!
//! States are deduplicated on a canonical byte encoding, so the visited
//! set, the state count and the order-independent state-set hash do not
//! depend on the order in which alternatives are expanded.

use std::collections::{BTreeMap, VecDeque};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fnv1a64;
use crate::invariants::{check, check_all, InvariantId, Violation};
use crate::protocol::{
    enabled_alternatives_with, initial_state, line, Alternative, Channels, ForkGhost, GlobalState,
    LocalState, MsgKind, Mutation, Pid, PidSet,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("invalid exploration config: {0}")]
    InvalidConfig(String),
}

/// Bounds and nondeterminism envelope for one exploration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub universe: Vec<Pid>,
    #[serde(default)]
    pub ae: PidSet,
    /// Neighbour sets each trigger may choose, per process. `None` allows
    /// every subset of the universe minus the process itself.
    #[serde(default)]
    pub nbh_choices: Option<BTreeMap<Pid, Vec<PidSet>>>,
    #[serde(default = "default_max_states")]
    pub max_states: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
}

fn default_max_states() -> usize {
    2_000_000
}

impl ExploreConfig {
    pub fn new(universe: Vec<Pid>) -> Self {
        ExploreConfig {
            universe,
            ae: PidSet::new(),
            nbh_choices: None,
            max_states: default_max_states(),
            max_depth: None,
        }
    }

    fn validate(&self) -> Result<(), ExploreError> {
        if self.universe.is_empty() {
            return Err(ExploreError::InvalidConfig("empty universe".into()));
        }
        if self.max_states == 0 {
            return Err(ExploreError::InvalidConfig("max_states must be >= 1".into()));
        }
        for p in &self.ae {
            if !self.universe.contains(p) {
                return Err(ExploreError::InvalidConfig(format!(
                    "abort-enabled process {p} outside universe"
                )));
            }
        }
        if let Some(choices) = &self.nbh_choices {
            for (&p, sets) in choices {
                if !self.universe.contains(&p) {
                    return Err(ExploreError::InvalidConfig(format!(
                        "choice entry for process {p} outside universe"
                    )));
                }
                if sets.is_empty() {
                    return Err(ExploreError::InvalidConfig(format!(
                        "process {p} must have at least one neighbour-set choice"
                    )));
                }
                for set in sets {
                    if set.contains(&p) {
                        return Err(ExploreError::InvalidConfig(format!(
                            "process {p} may not choose itself"
                        )));
                    }
                    for q in set {
                        if !self.universe.contains(q) {
                            return Err(ExploreError::InvalidConfig(format!(
                                "choice of {p} references {q} outside universe"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolved choice table: configured sets, or all subsets of the
    /// universe minus the process.
    fn choice_table(&self) -> BTreeMap<Pid, Vec<PidSet>> {
        let mut table = self.nbh_choices.clone().unwrap_or_default();
        for &p in &self.universe {
            table
                .entry(p)
                .or_insert_with(|| all_subsets_excluding(&self.universe, p));
        }
        table
    }
}

/// All subsets of `universe \ {p}`, smallest first.
pub fn all_subsets_excluding(universe: &[Pid], p: Pid) -> Vec<PidSet> {
    let others: Vec<Pid> = universe.iter().copied().filter(|&q| q != p).collect();
    let mut subsets: Vec<PidSet> = (0u32..(1 << others.len()))
        .map(|mask| {
            others
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &q)| q)
                .collect()
        })
        .collect();
    subsets.sort_by_key(|s: &PidSet| (s.len(), s.iter().copied().collect::<Vec<_>>()));
    subsets
}

/// An invariant violation together with the alternative sequence that
/// reaches it from the initial state.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub violation: Violation,
    pub path: Vec<Alternative>,
}

#[derive(Debug)]
pub struct ExploreResult {
    pub state_count: usize,
    pub depth_reached: usize,
    pub violations: Vec<Counterexample>,
    pub silent_nonidle: Vec<(GlobalState, Vec<Alternative>)>,
    pub truncated: bool,
    /// Order-independent hash of the visited state set.
    pub state_set_hash: u64,
}

impl ExploreResult {
    pub fn clean(&self) -> bool {
        self.violations.is_empty() && self.silent_nonidle.is_empty()
    }

    /// One-line report in the stable CLI format.
    pub fn summary(&self) -> String {
        format!(
            "states={} depth={} violations={} silent_nonidle={} truncated={}",
            self.state_count,
            self.depth_reached,
            self.violations.len(),
            self.silent_nonidle.len(),
            self.truncated
        )
    }
}

const MAX_REPORTED: usize = 100;

/// Explore the reachable space of `cfg` with the unmodified protocol.
pub fn explore(cfg: &ExploreConfig) -> Result<ExploreResult, ExploreError> {
    explore_with(cfg, None, None)
}

/// [`explore`] with an optional protocol mutation and an optional seed
/// that permutes the per-state expansion order (the visited set must not
/// depend on it).
pub fn explore_with(
    cfg: &ExploreConfig,
    mutation: Option<Mutation>,
    shuffle_seed: Option<u64>,
) -> Result<ExploreResult, ExploreError> {
    run_bfs(cfg, mutation, shuffle_seed, Stop::Never)
}

/// Shortest counterexample for one specific invariant, if any exists
/// within the configured bounds. BFS order makes the returned path
/// minimum-length.
pub fn shortest_violation(
    cfg: &ExploreConfig,
    inv: InvariantId,
    mutation: Option<Mutation>,
) -> Result<Option<Counterexample>, ExploreError> {
    let result = run_bfs(cfg, mutation, None, Stop::OnInvariant(inv))?;
    Ok(result.violations.into_iter().next())
}

/// Shortest counterexample against any catalog invariant; the usual
/// entry point for mutation sensitivity checks.
pub fn first_violation(
    cfg: &ExploreConfig,
    mutation: Option<Mutation>,
) -> Result<Option<Counterexample>, ExploreError> {
    let result = run_bfs(cfg, mutation, None, Stop::OnAny)?;
    Ok(result.violations.into_iter().next())
}

struct Codec {
    universe: Vec<Pid>,
    index: BTreeMap<Pid, u8>,
}

impl Codec {
    fn new(universe: &[Pid]) -> Self {
        Codec {
            universe: universe.to_vec(),
            index: universe
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, u8::try_from(i).expect("universe larger than 255")))
                .collect(),
        }
    }

    /// Canonical compact encoding; equal states encode equally because all
    /// components iterate in sorted order and zero channel entries are
    /// never stored.
    fn encode(&self, s: &GlobalState) -> Box<[u8]> {
        let mut out = Vec::with_capacity(64);
        for &p in &self.universe {
            let l = s.local(p);
            out.push(l.pc);
            for set in [
                &l.nbh, &l.prio, &l.before, &l.after, &l.wack, &l.away, &l.need, &l.prom,
            ] {
                out.push(set.len() as u8);
                for q in set {
                    out.push(self.index[q]);
                }
            }
        }
        let channel_entries: Vec<((MsgKind, Pid, Pid), u32)> = s.channels.iter().collect();
        out.extend((channel_entries.len() as u16).to_le_bytes());
        for ((kind, from, to), count) in channel_entries {
            out.push(kind as u8);
            out.push(self.index[&from]);
            out.push(self.index[&to]);
            out.extend(count.to_le_bytes());
        }
        for &q in &self.universe {
            for &r in &self.universe {
                if q != r {
                    out.extend(s.forks.count(q, r).to_le_bytes());
                }
            }
        }
        out.into_boxed_slice()
    }

    fn decode(&self, bytes: &[u8]) -> GlobalState {
        let mut at = 0usize;
        let mut next = |n: usize| {
            let slice = &bytes[at..at + n];
            at += n;
            slice
        };
        let mut locals = BTreeMap::new();
        for &p in &self.universe {
            let pc = next(1)[0];
            let mut sets: Vec<PidSet> = Vec::with_capacity(8);
            for _ in 0..8 {
                let len = next(1)[0] as usize;
                let set = (0..len)
                    .map(|_| self.universe[next(1)[0] as usize])
                    .collect();
                sets.push(set);
            }
            let mut it = sets.into_iter();
            locals.insert(
                p,
                LocalState {
                    pc,
                    nbh: it.next().unwrap(),
                    prio: it.next().unwrap(),
                    before: it.next().unwrap(),
                    after: it.next().unwrap(),
                    wack: it.next().unwrap(),
                    away: it.next().unwrap(),
                    need: it.next().unwrap(),
                    prom: it.next().unwrap(),
                },
            );
        }
        let n_entries = u16::from_le_bytes(next(2).try_into().unwrap());
        let mut channels = Channels::default();
        for _ in 0..n_entries {
            let kind = match next(1)[0] {
                0 => MsgKind::Req,
                1 => MsgKind::Gra,
                2 => MsgKind::Notify,
                3 => MsgKind::Withdraw,
                _ => MsgKind::Ack,
            };
            let from = self.universe[next(1)[0] as usize];
            let to = self.universe[next(1)[0] as usize];
            let count = u32::from_le_bytes(next(4).try_into().unwrap());
            channels.set(kind, from, to, count);
        }
        let mut forks = ForkGhost::default();
        for &q in &self.universe {
            for &r in &self.universe {
                if q != r {
                    forks.set(q, r, i32::from_le_bytes(next(4).try_into().unwrap()));
                }
            }
        }
        GlobalState {
            universe: self.universe.clone(),
            locals,
            channels,
            forks,
        }
    }
}

type Parent = Option<(u32, Alternative)>;

/// When the search returns early.
#[derive(Clone, Copy)]
enum Stop {
    /// Full sweep, collecting everything.
    Never,
    /// Return at the first violation of the given invariant.
    OnInvariant(InvariantId),
    /// Return at the first violation of any catalog invariant.
    OnAny,
}

fn run_bfs(
    cfg: &ExploreConfig,
    mutation: Option<Mutation>,
    shuffle_seed: Option<u64>,
    stop: Stop,
) -> Result<ExploreResult, ExploreError> {
    cfg.validate()?;
    let init =
        initial_state(&cfg.universe).map_err(|e| ExploreError::InvalidConfig(e.to_string()))?;
    let codec = Codec::new(&init.universe);
    let choices = cfg.choice_table();
    let choose = |p: Pid| choices.get(&p).cloned().unwrap_or_default();

    let mut visited: IndexMap<Box<[u8]>, Parent> = IndexMap::new();
    let mut result = ExploreResult {
        state_count: 0,
        depth_reached: 0,
        violations: Vec::new(),
        silent_nonidle: Vec::new(),
        truncated: false,
        state_set_hash: 0,
    };

    let path_of = |visited: &IndexMap<Box<[u8]>, Parent>, idx: u32| -> Vec<Alternative> {
        let mut path = Vec::new();
        let mut cur = idx;
        while let Some((parent, alt)) = visited
            .get_index(cur as usize)
            .and_then(|(_, p)| p.as_ref())
        {
            path.push(alt.clone());
            cur = *parent;
        }
        path.reverse();
        path
    };

    let check_state = |s: &GlobalState| -> Vec<Violation> {
        match stop {
            Stop::OnInvariant(inv) => check(inv, s),
            Stop::Never | Stop::OnAny => {
                let mut vs = check_all(s);
                vs.truncate(MAX_REPORTED);
                vs
            }
        }
    };
    let stop_early = !matches!(stop, Stop::Never);

    fn record(result: &mut ExploreResult, vs: Vec<Violation>, path: &[Alternative]) {
        for v in vs {
            if result.violations.len() < MAX_REPORTED {
                result.violations.push(Counterexample {
                    violation: v,
                    path: path.to_vec(),
                });
            }
        }
    }

    let enc0 = codec.encode(&init);
    result.state_set_hash ^= fnv1a64(&enc0);
    visited.insert(enc0, None);
    result.state_count = 1;
    let init_violations = check_state(&init);
    let found = !init_violations.is_empty() && stop_early;
    record(&mut result, init_violations, &[]);
    if found {
        return Ok(result);
    }

    let mut frontier: VecDeque<(u32, usize)> = VecDeque::new();
    frontier.push_back((0, 0));

    while let Some((idx, depth)) = frontier.pop_front() {
        if cfg.max_depth.is_some_and(|limit| depth >= limit) {
            continue;
        }
        let state = codec.decode(visited.get_index(idx as usize).unwrap().0);
        let mut alternatives = enabled_alternatives_with(&state, &cfg.ae, &choose, mutation);
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(idx));
            alternatives.shuffle(&mut rng);
        }

        // Silent-state check: no forward or receive alternative enabled.
        if alternatives.iter().all(|a| a.is_env())
            && state.universe.iter().any(|&p| state.pc(p) != line::IDLE)
            && result.silent_nonidle.len() < MAX_REPORTED
        {
            let path = path_of(&visited, idx);
            result.silent_nonidle.push((state.clone(), path));
        }

        for alt in alternatives {
            let succ = crate::protocol::apply_assuming_enabled(&alt, &state, mutation);
            let enc = codec.encode(&succ);
            if visited.contains_key(&enc) {
                continue;
            }
            if visited.len() >= cfg.max_states {
                result.truncated = true;
                // Still audit the successor so truncation cannot hide an
                // invariant failure one step past the stored frontier.
                let vs = check_state(&succ);
                if !vs.is_empty() {
                    let mut path = path_of(&visited, idx);
                    path.push(alt.clone());
                    record(&mut result, vs, &path);
                    if stop_early {
                        return Ok(result);
                    }
                }
                continue;
            }
            let entry = visited
                .insert_full(enc.clone(), Some((idx, alt.clone())))
                .0 as u32;
            result.state_set_hash ^= fnv1a64(&enc);
            result.state_count = visited.len();
            result.depth_reached = result.depth_reached.max(depth + 1);

            let vs = check_state(&succ);
            if !vs.is_empty() {
                let path = path_of(&visited, entry);
                record(&mut result, vs, &path);
                if stop_early {
                    return Ok(result);
                }
            }
            frontier.push_back((entry, depth + 1));
        }
    }
    Ok(result)
}
