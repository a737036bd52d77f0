//! In-process SPMD runtime: one thread per rank, blocking collectives that
//! rendezvous per process group, and a ledger of bytes sent per rank.

mod group;
mod ledger;
mod world;

use thiserror::Error;

pub use group::{ProcessGroup, ProcessMesh};
pub use ledger::{Collective, CommLedger, LedgerEntry};
pub use world::{spawn, CallSite, Rank, SpawnOutput};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CommError {
    #[error("world size must be at least 1")]
    EmptyWorld,
    #[error("invalid group {group}: {reason}")]
    InvalidGroup { group: String, reason: String },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("rank {rank} is not a member of {group}")]
    NotAMember { rank: usize, group: String },
    #[error("collective mismatch: {first} vs {second}")]
    Mismatch {
        first: Box<CallSite>,
        second: Box<CallSite>,
    },
    #[error("deadlock: {} rank(s) finished while {}", finished, format_sites(waiting))]
    Deadlock {
        waiting: Vec<CallSite>,
        finished: usize,
    },
    #[error("{collective} size mismatch: {detail}")]
    SizeMismatch {
        collective: Collective,
        detail: String,
    },
    #[error("ranks disagree on the collective element type")]
    TypeMismatch,
    #[error("rank {rank} failed; collective aborted")]
    PeerFailed { rank: usize },
}

fn format_sites(sites: &[CallSite]) -> String {
    if sites.is_empty() {
        return "no collective is pending".into();
    }
    let parts: Vec<String> = sites.iter().map(|s| format!("waiting: {s}")).collect();
    parts.join("; ")
}
