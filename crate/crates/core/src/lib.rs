//! Deterministic simulation and planning for unified sequence parallelism,
//! where Ulysses all-to-all head redistribution and ring attention are
//! combined on a 2D process mesh.
//!
//! * [`numerics`]: tensors, the exact attention oracle, online softmax.
//! * [`simcomm`]: in-process SPMD runtime with collectives and a byte ledger.
//! * [`usp`]: zigzag load balancing, `AllToAll4D`, ring attention and the
//!   unified attention forward/backward.
//! * [`costmodel`]: per-block communication and memory costs of SP, DP, ZeRO
//!   and TP variants, and a bandwidth-aware step time estimate.
//! * [`planner`]: enumeration, feasibility and ranking of hybrid strategies.

pub mod costmodel;
pub mod numerics;
pub mod planner;
pub mod report;
pub mod simcomm;
pub mod usp;
