//! Analytical communication, memory and step-time model for hybrid
//! TP / Ulysses / Ring / DP / PP / ZeRO strategies.

mod config;
mod cost;
mod placement;
mod table;

use thiserror::Error;

pub use config::{ClusterConfig, ModelConfig, ParamFormula, Strategy};
pub use cost::{
    algobw_factor, algobw_factor_by_name, comm_cost, cost_report, estimate_step_time,
    memory_cost, ring_hops, CommCost, CostReport, MemoryCost, StepTime,
};
pub use placement::{Coords, Dim, RankLayout};
pub use table::{table2, CostRow, CostTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("unknown collective {0:?}")]
    UnknownCollective(String),
    #[error("strategy {strategy} needs {} devices but the cluster has {devices}", strategy.devices())]
    StrategyTooLarge { strategy: Strategy, devices: u64 },
}
