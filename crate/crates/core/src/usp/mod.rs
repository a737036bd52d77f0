//! Unified sequence parallelism: token placement with zigzag causal load
//! balancing, `AllToAll4D` head/sequence redistribution over Ulysses rows,
//! ring attention over ring columns, and their composition.

mod alltoall;
mod partition;
mod ring;
mod simulate;
mod unified;

use thiserror::Error;

pub use alltoall::{all_to_all_4d, Layout, Redistribution, Shard};
pub use partition::{
    causal_workload, even_partition, zigzag_partition, PartitionScheme, ShardPlan,
};
pub use ring::{ring_attention, ring_attention_backward, RingForward, ShardGrads};
pub use simulate::{
    seeded_inputs, simulate, CollectiveSummary, ErrorStat, OracleCheck, SeededInputs,
    SimulateConfig, SimulateResult,
};
pub use unified::{
    assemble_sequence, check_degrees, run_usp, shard_sequence, usp_attention,
    usp_attention_backward, UspRun, UspSaved,
};

use crate::numerics::NumericsError;
use crate::simcomm::CommError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UspError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("divisibility: {0}")]
    Divisibility(String),
    #[error(
        "Ulysses degree {ulysses} exceeds KV head count {kv_heads}: \
         the Ulysses degree cannot exceed the number of attention heads"
    )]
    UlyssesExceedsKvHeads { ulysses: usize, kv_heads: usize },
    #[error("{heads} heads do not split over degree {ulysses}")]
    HeadDivisibility { heads: usize, ulysses: usize },
    #[error("expected a {expected:?} shard, got {got:?}")]
    LayoutMismatch { expected: Layout, got: Layout },
    #[error("backward needs the forward output and log-sum-exp")]
    MissingForward,
    #[error("mesh covers {mesh} ranks but the world has {world}")]
    MeshMismatch { mesh: usize, world: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}
