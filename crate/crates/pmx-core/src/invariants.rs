//! Executable invariant catalog over [`GlobalState`].
//!
//! Every named invariant of the protocol is a pure predicate, universally
//! quantified over universe members. Checking a state yields one
//! [`Violation`] per failing instantiation (truncated at
//! [`MAX_WITNESSES_PER_INVARIANT`] to bound output on badly corrupted
//! states). The conjunction of the whole catalog is inductive: from any
//! state satisfying it, every enabled alternative leads to a state that
//! satisfies it again — the explorer re-verifies this concretely.
//!
//! Free variables range over the configured universe only. Processes
//! outside the universe never act and keep their initial values, so this
//! quantifier scope loses nothing at desk scale.

use std::fmt;

use crate::protocol::{line, GlobalState, MsgKind, Pid};

/// Cap on reported witnesses per invariant per state.
pub const MAX_WITNESSES_PER_INVARIANT: usize = 100;

/// Labels of the invariant catalog, in catalog order.
///
/// `Iq*`/`Jq*` concern the fork (inner) layer, `Kq*`/`Lq*` the FCFS
/// (outer) layer, `Mq*` and `ChanBound` the message channels. `Pmx` is the
/// top-level partial mutual exclusion predicate itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InvariantId {
    Pmx,
    Iq0,
    Iq1,
    Iq2,
    Iq3,
    Iq4,
    Iq5,
    Iq6,
    Iq7,
    Iq8,
    Iq9,
    Jq0,
    Jq1,
    Jq2,
    Jq3,
    Jq4,
    Jq5,
    Jq6,
    Kq0,
    Kq1,
    Kq2,
    Kq3,
    Kq4,
    Kq5,
    Kq6,
    Kq7,
    Kq8,
    Lq0,
    Lq1,
    Lq2,
    Mq0,
    Mq1,
    ChanBound,
}

impl InvariantId {
    pub const ALL: [InvariantId; 33] = [
        InvariantId::Pmx,
        InvariantId::Iq0,
        InvariantId::Iq1,
        InvariantId::Iq2,
        InvariantId::Iq3,
        InvariantId::Iq4,
        InvariantId::Iq5,
        InvariantId::Iq6,
        InvariantId::Iq7,
        InvariantId::Iq8,
        InvariantId::Iq9,
        InvariantId::Jq0,
        InvariantId::Jq1,
        InvariantId::Jq2,
        InvariantId::Jq3,
        InvariantId::Jq4,
        InvariantId::Jq5,
        InvariantId::Jq6,
        InvariantId::Kq0,
        InvariantId::Kq1,
        InvariantId::Kq2,
        InvariantId::Kq3,
        InvariantId::Kq4,
        InvariantId::Kq5,
        InvariantId::Kq6,
        InvariantId::Kq7,
        InvariantId::Kq8,
        InvariantId::Lq0,
        InvariantId::Lq1,
        InvariantId::Lq2,
        InvariantId::Mq0,
        InvariantId::Mq1,
        InvariantId::ChanBound,
    ];

    pub fn label(self) -> &'static str {
        match self {
            InvariantId::Pmx => "PMX",
            InvariantId::Iq0 => "Iq0",
            InvariantId::Iq1 => "Iq1",
            InvariantId::Iq2 => "Iq2",
            InvariantId::Iq3 => "Iq3",
            InvariantId::Iq4 => "Iq4",
            InvariantId::Iq5 => "Iq5",
            InvariantId::Iq6 => "Iq6",
            InvariantId::Iq7 => "Iq7",
            InvariantId::Iq8 => "Iq8",
            InvariantId::Iq9 => "Iq9",
            InvariantId::Jq0 => "Jq0",
            InvariantId::Jq1 => "Jq1",
            InvariantId::Jq2 => "Jq2",
            InvariantId::Jq3 => "Jq3",
            InvariantId::Jq4 => "Jq4",
            InvariantId::Jq5 => "Jq5",
            InvariantId::Jq6 => "Jq6",
            InvariantId::Kq0 => "Kq0",
            InvariantId::Kq1 => "Kq1",
            InvariantId::Kq2 => "Kq2",
            InvariantId::Kq3 => "Kq3",
            InvariantId::Kq4 => "Kq4",
            InvariantId::Kq5 => "Kq5",
            InvariantId::Kq6 => "Kq6",
            InvariantId::Kq7 => "Kq7",
            InvariantId::Kq8 => "Kq8",
            InvariantId::Lq0 => "Lq0",
            InvariantId::Lq1 => "Lq1",
            InvariantId::Lq2 => "Lq2",
            InvariantId::Mq0 => "Mq0",
            InvariantId::Mq1 => "Mq1",
            InvariantId::ChanBound => "ChanBound",
        }
    }
}

impl fmt::Display for InvariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One failing instantiation of an invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: InvariantId,
    /// The free variables instantiated, in formula order (usually `q, r`).
    pub witnesses: Vec<Pid>,
    pub detail: String,
}

impl fmt::Display for Violation {
    /// Stable rendering: `<label> q=<id> r=<id>: <detail>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.invariant)?;
        let names = ["q", "r", "s"];
        for (i, w) in self.witnesses.iter().enumerate() {
            write!(f, " {}={}", names.get(i).unwrap_or(&"w"), w)?;
        }
        write!(f, ": {}", self.detail)
    }
}

fn in_range(pc: u8, lo: u8) -> bool {
    pc >= lo
}

struct Collector {
    invariant: InvariantId,
    out: Vec<Violation>,
}

impl Collector {
    fn new(invariant: InvariantId) -> Self {
        Collector {
            invariant,
            out: Vec::new(),
        }
    }

    fn full(&self) -> bool {
        self.out.len() >= MAX_WITNESSES_PER_INVARIANT
    }

    fn report(&mut self, witnesses: &[Pid], detail: String) {
        if !self.full() {
            self.out.push(Violation {
                invariant: self.invariant,
                witnesses: witnesses.to_vec(),
                detail,
            });
        }
    }
}

/// Evaluate one invariant over `s`, returning a violation per failing
/// instantiation (empty iff the quantified predicate holds).
pub fn check(inv: InvariantId, s: &GlobalState) -> Vec<Violation> {
    let mut c = Collector::new(inv);
    match inv {
        InvariantId::Pmx => {
            for_unordered_pairs(s, &mut c, |s, q, r| {
                let conflicted = s.local(r).nbh.contains(&q) && s.local(q).nbh.contains(&r);
                if conflicted && s.pc(q) == line::CS && s.pc(r) == line::CS {
                    Some(format!("{q} and {r} are in conflict and both in CS"))
                } else {
                    None
                }
            });
        }
        InvariantId::Iq0 => {
            for &q in &s.universe {
                let l = s.local(q);
                for &r in &l.nbh {
                    if c.full() {
                        break;
                    }
                    if r == q {
                        c.report(&[q, r], format!("{q} is its own neighbour"));
                    } else if l.pc < line::START {
                        c.report(&[q, r], format!("nbh nonempty while pc={}", l.pc));
                    }
                }
            }
        }
        InvariantId::Iq1 => {
            for_unordered_pairs(s, &mut c, |s, q, r| {
                let sum = s.forks.count(q, r) + s.forks.count(r, q);
                (sum > 1).then(|| format!("fork.{q}.{r} + fork.{r}.{q} = {sum}"))
            });
        }
        InvariantId::Iq2 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if in_range(s.pc(q), line::CS)
                    && s.local(q).nbh.contains(&r)
                    && s.forks.count(q, r) <= 0
                {
                    Some(format!(
                        "{q} at {} with {r} in nbh but fork.{q}.{r} = {}",
                        s.pc(q),
                        s.forks.count(q, r)
                    ))
                } else {
                    None
                }
            });
        }
        InvariantId::Iq3 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let lhs = s.local(r).away.contains(&q);
                let rhs = q < r && s.forks.count(r, q) == 0;
                (lhs != rhs).then(|| {
                    format!(
                        "{q} in away.{r} is {lhs} but (q<r and fork.{r}.{q}=0) is {rhs}"
                    )
                })
            });
        }
        InvariantId::Iq4 => {
            for_unordered_pairs(s, &mut c, |s, q, r| {
                let sum = i64::from(s.forks.count(q, r))
                    + i64::from(s.forks.count(r, q))
                    + i64::from(s.channels.count(MsgKind::Gra, q, r))
                    + i64::from(s.channels.count(MsgKind::Gra, r, q));
                (sum != 1).then(|| format!("edge sum = {sum}, expected 1"))
            });
        }
        InvariantId::Iq5 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if in_range(s.pc(q), line::FORK_WAIT)
                    && s.local(q).nbh.contains(&r)
                    && !s.local(q).need.contains(&r)
                    && s.forks.count(q, r) <= 0
                {
                    Some(format!(
                        "{q} at {} neither needs {r} nor holds the fork",
                        s.pc(q)
                    ))
                } else {
                    None
                }
            });
        }
        InvariantId::Iq6 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.local(q).need.contains(&r)
                    && !(s.pc(q) == line::FORK_WAIT && s.local(q).nbh.contains(&r))
                {
                    Some(format!("{r} in need.{q} outside line 14 / nbh"))
                } else {
                    None
                }
            });
        }
        InvariantId::Iq7 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let v = s.forks.count(q, r);
                (v < 0).then(|| format!("fork.{q}.{r} = {v}"))
            });
        }
        InvariantId::Iq8 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                (s.local(r).prom.contains(&q) && q >= r)
                    .then(|| format!("{q} in prom.{r} but not lower"))
            });
        }
        InvariantId::Iq9 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                (s.channels.count(MsgKind::Req, q, r) > 0 && q >= r)
                    .then(|| format!("req.{q}.{r} in transit but not upward"))
            });
        }
        InvariantId::Jq0 => {
            for &q in &s.universe {
                if c.full() {
                    break;
                }
                let pc = s.pc(q);
                if !(line::IDLE..=line::EXIT).contains(&pc) {
                    c.report(&[q], format!("pc={pc} outside 11..=16"));
                }
            }
        }
        InvariantId::Jq1 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if q < r
                    && s.local(q).need.contains(&r)
                    && s.channels.count(MsgKind::Req, q, r) == 0
                    && s.channels.count(MsgKind::Gra, r, q) == 0
                    && !s.local(r).prom.contains(&q)
                {
                    Some(format!("{q} needs {r} but no req/gra in transit and no promise"))
                } else {
                    None
                }
            });
        }
        InvariantId::Jq2 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.local(q).need.contains(&r) && s.forks.count(q, r) != 0 {
                    Some(format!(
                        "{q} needs {r} while fork.{q}.{r} = {}",
                        s.forks.count(q, r)
                    ))
                } else {
                    None
                }
            });
        }
        InvariantId::Jq3 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if q < r
                    && i64::from(s.forks.count(q, r))
                        + i64::from(s.channels.count(MsgKind::Gra, r, q))
                        > 0
                    && !(in_range(s.pc(q), line::FORK_WAIT) && s.local(q).nbh.contains(&r))
                {
                    Some(format!("lower {q} holds/receives the fork for {r} without use"))
                } else {
                    None
                }
            });
        }
        InvariantId::Jq4 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.local(r).prom.contains(&q)
                    && !(s.local(q).need.contains(&r)
                        && s.channels.count(MsgKind::Req, q, r) == 0
                        && s.channels.count(MsgKind::Gra, r, q) == 0)
                {
                    Some(format!("promise {q} in prom.{r} without matching need"))
                } else {
                    None
                }
            });
        }
        InvariantId::Jq5 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.channels.count(MsgKind::Req, q, r) > 0
                    && !(s.local(q).need.contains(&r)
                        && s.channels.count(MsgKind::Gra, r, q) == 0)
                {
                    Some(format!("req.{q}.{r} in transit without matching need"))
                } else {
                    None
                }
            });
        }
        InvariantId::Jq6 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let n = s.channels.count(MsgKind::Req, q, r);
                (n > 1).then(|| format!("req.{q}.{r} = {n}"))
            });
        }
        InvariantId::Kq0 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let lhs = i64::from(s.channels.count(MsgKind::Withdraw, q, r))
                    + i64::from(s.channels.count(MsgKind::Ack, r, q))
                    + i64::from(s.local(r).after.contains(&q));
                let rhs = i64::from(s.local(q).wack.contains(&r));
                (lhs != rhs).then(|| {
                    format!("withdraw.{q}.{r} + ack.{r}.{q} + |q in after.{r}| = {lhs}, |r in wack.{q}| = {rhs}")
                })
            });
        }
        InvariantId::Kq1 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.local(r).after.contains(&q)
                    && s.channels.count(MsgKind::Notify, q, r) == 0
                    && !s.local(r).before.contains(&q)
                {
                    Some(format!("{q} in after.{r} without notify in transit or before entry"))
                } else {
                    None
                }
            });
        }
        InvariantId::Kq2 => {
            for &q in &s.universe {
                if c.full() {
                    break;
                }
                let l = s.local(q);
                if (l.pc == line::PRIO_WAIT || l.pc == line::FORK_WAIT) && !l.wack.is_empty() {
                    c.report(&[q], format!("wack nonempty at line {}", l.pc));
                }
            }
        }
        InvariantId::Kq3 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.channels.count(MsgKind::Withdraw, q, r) > 0
                    && s.channels.count(MsgKind::Notify, q, r) == 0
                    && !s.local(r).before.contains(&q)
                {
                    Some(format!("withdraw.{q}.{r} in transit without preceding notify"))
                } else {
                    None
                }
            });
        }
        InvariantId::Kq4 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let pcq = s.pc(q);
                if (pcq == line::PRIO_WAIT || pcq == line::FORK_WAIT)
                    && s.local(q).nbh.contains(&r)
                    && s.channels.count(MsgKind::Notify, q, r) == 0
                    && !s.local(r).before.contains(&q)
                {
                    Some(format!("{q} in entry with {r} in nbh but unnotified"))
                } else {
                    None
                }
            });
        }
        InvariantId::Kq5 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let lr = s.local(r);
                if lr.before.contains(&q)
                    && !lr.after.contains(&q)
                    && s.channels.count(MsgKind::Withdraw, q, r) == 0
                {
                    let pcq = s.pc(q);
                    if !((pcq == line::PRIO_WAIT || pcq == line::FORK_WAIT)
                        && s.local(q).nbh.contains(&r))
                    {
                        return Some(format!(
                            "{q} registered in before.{r} but not in entry with {r}"
                        ));
                    }
                }
                None
            });
        }
        InvariantId::Kq6 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.channels.count(MsgKind::Notify, q, r) > 0
                    && !s.local(r).after.contains(&q)
                    && s.channels.count(MsgKind::Withdraw, q, r) == 0
                {
                    let pcq = s.pc(q);
                    if !((pcq == line::PRIO_WAIT || pcq == line::FORK_WAIT)
                        && s.local(q).nbh.contains(&r))
                    {
                        return Some(format!(
                            "notify.{q}.{r} in transit but {q} not in entry with {r}"
                        ));
                    }
                }
                None
            });
        }
        InvariantId::Kq7 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.local(r).before.contains(&q) && s.channels.count(MsgKind::Notify, q, r) > 0 {
                    Some(format!("{q} in before.{r} while notify still in transit"))
                } else {
                    None
                }
            });
        }
        InvariantId::Kq8 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let n = s.channels.count(MsgKind::Notify, q, r);
                (n > 1).then(|| format!("notify.{q}.{r} = {n}"))
            });
        }
        InvariantId::Lq0 => {
            if let Some(cycle) = prio_cycle(s) {
                let rendered: Vec<String> = cycle.iter().map(|p| p.to_string()).collect();
                c.report(
                    &cycle,
                    format!("priority relation has cycle {}", rendered.join(" -> ")),
                );
            }
        }
        InvariantId::Lq1 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                if s.local(r).prio.contains(&q)
                    && s.channels.count(MsgKind::Withdraw, q, r) == 0
                    && !in_range(s.pc(q), line::PRIO_WAIT)
                {
                    Some(format!("{q} holds priority over {r} while at pc={}", s.pc(q)))
                } else {
                    None
                }
            });
        }
        InvariantId::Lq2 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                let lq = s.local(q);
                if lq.prio.contains(&r) && !(lq.before.contains(&r) && !lq.after.contains(&r)) {
                    Some(format!("{r} in prio.{q} but not in before.{q} minus after.{q}"))
                } else {
                    None
                }
            });
        }
        InvariantId::Mq0 => {
            for &q in &s.universe {
                if c.full() {
                    break;
                }
                let n = s.channels.count(MsgKind::Gra, q, q);
                if n != 0 {
                    c.report(&[q], format!("gra.{q}.{q} = {n}"));
                }
            }
        }
        InvariantId::Mq1 => {
            for_ordered_pairs(s, &mut c, |s, q, r| {
                // r in prio.q implies q at 13 with r in nbh.q
                let lq = s.local(q);
                if lq.prio.contains(&r)
                    && !(lq.pc == line::PRIO_WAIT && lq.nbh.contains(&r))
                {
                    Some(format!("{r} in prio.{q} while {q} at pc={}", lq.pc))
                } else {
                    None
                }
            });
        }
        InvariantId::ChanBound => {
            for ((kind, q, r), n) in s.channels.iter() {
                if c.full() {
                    break;
                }
                if n > 1 {
                    c.report(&[q, r], format!("{kind}.{q}.{r} = {n}"));
                }
            }
        }
    }
    c.out
}

/// Ordered pairs `(q, r)` with `q != r`.
fn for_ordered_pairs(
    s: &GlobalState,
    c: &mut Collector,
    pred: impl Fn(&GlobalState, Pid, Pid) -> Option<String>,
) {
    for &q in &s.universe {
        for &r in &s.universe {
            if q == r || c.full() {
                continue;
            }
            if let Some(detail) = pred(s, q, r) {
                c.report(&[q, r], detail);
            }
        }
    }
}

/// Unordered pairs, visited as `(q, r)` with `q < r`, for symmetric
/// predicates so each offending edge is reported once.
fn for_unordered_pairs(
    s: &GlobalState,
    c: &mut Collector,
    pred: impl Fn(&GlobalState, Pid, Pid) -> Option<String>,
) {
    for (i, &q) in s.universe.iter().enumerate() {
        for &r in &s.universe[i + 1..] {
            if c.full() {
                continue;
            }
            if let Some(detail) = pred(s, q, r) {
                c.report(&[q, r], detail);
            }
        }
    }
}

/// Check the full catalog in catalog order.
pub fn check_all(s: &GlobalState) -> Vec<Violation> {
    let mut out = Vec::new();
    for inv in InvariantId::ALL {
        out.extend(check(inv, s));
    }
    out
}

/// True iff the priority relation `{(q, r) | q in prio.r}` is acyclic.
/// On a finite relation this is exactly well-foundedness.
pub fn prio_acyclic(s: &GlobalState) -> bool {
    prio_cycle(s).is_none()
}

/// A cycle of the priority relation if one exists, for violation reports.
fn prio_cycle(s: &GlobalState) -> Option<Vec<Pid>> {
    let mut edges: Vec<(Pid, Pid)> = Vec::new();
    for &r in &s.universe {
        for &q in &s.local(r).prio {
            edges.push((q, r));
        }
    }
    find_cycle(&s.universe, &edges)
}

/// Depth-first cycle search over an explicit edge list. Returns the cycle
/// node sequence (closing node repeated at the end) if any.
pub(crate) fn find_cycle(nodes: &[Pid], edges: &[(Pid, Pid)]) -> Option<Vec<Pid>> {
    use std::collections::BTreeMap;
    let mut succ: BTreeMap<Pid, Vec<Pid>> = BTreeMap::new();
    for &(a, b) in edges {
        succ.entry(a).or_default().push(b);
    }
    // 0 unvisited, 1 on stack, 2 done
    let mut color: BTreeMap<Pid, u8> = nodes.iter().map(|&n| (n, 0)).collect();
    let mut parent: BTreeMap<Pid, Pid> = BTreeMap::new();

    for &start in nodes {
        if color[&start] != 0 {
            continue;
        }
        // Iterative DFS with an explicit stack of (node, next-child index).
        let mut stack: Vec<(Pid, usize)> = vec![(start, 0)];
        color.insert(start, 1);
        while let Some(&(node, idx)) = stack.last() {
            let children = succ.get(&node).map(|v| v.as_slice()).unwrap_or(&[]);
            if idx < children.len() {
                stack.last_mut().expect("nonempty stack").1 += 1;
                let child = children[idx];
                match color.get(&child).copied().unwrap_or(2) {
                    0 => {
                        parent.insert(child, node);
                        color.insert(child, 1);
                        stack.push((child, 0));
                    }
                    1 => {
                        // Back edge node -> child closes a cycle; unwind it.
                        let mut cycle = Vec::new();
                        let mut cur = node;
                        while cur != child {
                            cycle.push(cur);
                            cur = parent[&cur];
                        }
                        cycle.push(child);
                        cycle.reverse();
                        cycle.push(child);
                        return Some(cycle);
                    }
                    _ => {}
                }
            } else {
                color.insert(node, 2);
                stack.pop();
            }
        }
    }
    None
}
