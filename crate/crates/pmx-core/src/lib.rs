//! Executable laboratory for a two-layer partial mutual exclusion
//! protocol over asynchronous messages: a pure transition system, an
//! executable invariant catalog, a fairness-aware simulation engine, an
//! exhaustive small-instance state explorer and trace analyzers for the
//! protocol's ordering, liveness and message-complexity properties.

pub mod analysis;
pub mod explore;
pub mod invariants;
pub mod protocol;
pub mod sim;
pub mod trace_file;

pub use protocol::{
    apply, apply_with, conflict, enabled, enabled_alternatives, enabled_alternatives_with,
    enabled_with, initial_state, Alternative, Channels, ForkGhost, GlobalState, LocalState,
    MsgKind, Mutation, Pid, PidSet, ProtocolError,
};

pub use invariants::{check, check_all, prio_acyclic, InvariantId, Violation};

/// FNV-1a 64-bit hash; used for stable state-set and scenario hashes that
/// must not vary across runs or builds.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
