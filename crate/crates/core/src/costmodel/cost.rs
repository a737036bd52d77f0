use serde::{Deserialize, Serialize};

use super::{ClusterConfig, CostError, Dim, ModelConfig, RankLayout, Strategy};
use crate::simcomm::Collective;

/// Effective-volume multiplier of a collective over `n` ranks: `2(n−1)/n`
/// for all-reduce, `(n−1)/n` for all-gather and reduce-scatter, and 1 for
/// all-to-all and point-to-point. A singleton group moves nothing.
pub fn algobw_factor(collective: Collective, n: u64) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let nf = n as f64;
    match collective {
        Collective::AllReduce => 2.0 * (nf - 1.0) / nf,
        Collective::AllGather | Collective::ReduceScatter => (nf - 1.0) / nf,
        Collective::AllToAll | Collective::RingShift => 1.0,
    }
}

/// Parses a collective name and returns its factor.
pub fn algobw_factor_by_name(collective: &str, n: u64) -> Result<f64, CostError> {
    let c: Collective = collective
        .parse()
        .map_err(|_| CostError::UnknownCollective(collective.to_string()))?;
    Ok(algobw_factor(c, n))
}

/// Communication volume of one transformer block, fwd + bwd.
///
/// Parameter and activation terms use the table convention: whole-tensor
/// element counts with the `(n−1)/n` factors taken as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub param_collective: String,
    pub param_elems: f64,
    pub param_bytes: f64,
    pub act_collective: String,
    /// TP plus Ulysses activation traffic.
    pub act_elems: f64,
    pub act_bytes: f64,
    pub tp_act_elems: f64,
    pub ulysses_act_elems: f64,
    /// K/V (and their gradients) circulated by ring attention, summed over ranks.
    pub ring_p2p_elems: f64,
    pub ring_p2p_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_note: Option<String>,
}

/// Per-device memory of the model stage, in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCost {
    pub params_bytes: f64,
    pub grads_bytes: f64,
    pub optimizer_bytes: f64,
    pub activation_bytes: f64,
    /// Parameters of the stage before ZeRO sharding (after TP/PP splits).
    pub unsharded_params_bytes: f64,
}

impl MemoryCost {
    pub fn total(&self) -> f64 {
        self.params_bytes + self.grads_bytes + self.optimizer_bytes + self.activation_bytes
    }
}

/// Modeled seconds per training step, split by source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTime {
    pub tp: f64,
    pub ulysses: f64,
    /// Ring P2P before subtracting the overlap budget.
    pub ring_p2p_raw: f64,
    /// Ring P2P left exposed after overlap.
    pub ring_p2p: f64,
    pub param: f64,
    pub latency: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub strategy: Strategy,
    pub comm: CommCost,
    pub memory: MemoryCost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_time: Option<StepTime>,
}

/// Number of single-hop K/V-sized transfers per rank in one fwd + bwd ring
/// pass: K and V make `R−1` hops forward and again backward, and the dK/dV
/// partials make `R` hops to return to their owner.
pub fn ring_hops(ring: u64) -> u64 {
    if ring <= 1 {
        0
    } else {
        6 * ring - 4
    }
}

/// Per-block communication, fwd + bwd.
pub fn comm_cost(strategy: &Strategy, model: &ModelConfig) -> Result<CommCost, CostError> {
    model.validate()?;
    strategy.validate()?;
    let dtype = model.dtype_bytes as f64;
    let g = model.gqa_groups() as f64;
    let bsld = model.hidden_elems();

    let (param_collective, param_elems) = if strategy.zero_group() > 1 {
        let base = model.params_per_block() / strategy.tp as f64;
        match strategy.zero_stage {
            0 => ("allreduce", base),
            1 | 2 => ("allgather+reducescatter", base),
            _ => ("2*allgather+reducescatter", 1.5 * base),
        }
    } else {
        ("0", 0.0)
    };

    let mut act_parts = Vec::new();
    let tp_act_elems = if strategy.tp > 1 {
        act_parts.push(if strategy.tp_sp {
            "4*allgather+4*reducescatter"
        } else {
            "4*allreduce"
        });
        8.0 * bsld
    } else {
        0.0
    };
    let ring_p2p_elems = ring_hops(strategy.ring) as f64 * bsld / g;
    if ring_p2p_elems > 0.0 {
        act_parts.push("P2P");
    }
    let ulysses_act_elems = if strategy.ulysses > 1 {
        act_parts.push("8*all2all");
        4.0 * bsld + 4.0 * bsld / g
    } else {
        0.0
    };
    let act_elems = tp_act_elems + ulysses_act_elems;
    let act_collective = if act_parts.is_empty() {
        "0".to_string()
    } else {
        act_parts.join("+")
    };
    Ok(CommCost {
        param_collective: param_collective.to_string(),
        param_elems,
        param_bytes: param_elems * dtype,
        act_collective,
        act_elems,
        act_bytes: act_elems * dtype,
        tp_act_elems,
        ulysses_act_elems,
        ring_p2p_elems,
        ring_p2p_bytes: ring_p2p_elems * dtype,
        overlap_note: (ring_p2p_elems > 0.0)
            .then(|| "ring P2P overlaps with attention compute".to_string()),
    })
}

/// Per-device memory of one pipeline stage.
pub fn memory_cost(strategy: &Strategy, model: &ModelConfig) -> Result<MemoryCost, CostError> {
    model.validate()?;
    strategy.validate()?;
    let stage_layers = model.layers as f64 / strategy.pp as f64;
    let dtype = model.dtype_bytes as f64;
    let p = model.params_per_block() * stage_layers * dtype / strategy.tp as f64;
    let n = strategy.zero_group() as f64;
    let (params, grads, optimizer) = match strategy.zero_stage {
        0 => (p, p, 6.0 * p),
        1 => (p, p, 6.0 * p / n),
        2 => (p, p / n, 6.0 * p / n),
        _ => (p / n, p / n, 6.0 * p / n),
    };
    let full_act = model.act_multiplier * model.hidden_elems() * dtype * stage_layers;
    let tp_share = match (strategy.tp, strategy.tp_sp) {
        (1, _) => 1.0,
        (tp, true) => 1.0 / tp as f64,
        (_, false) => model.tp_act_fraction,
    };
    Ok(MemoryCost {
        params_bytes: params,
        grads_bytes: grads,
        optimizer_bytes: optimizer,
        activation_bytes: full_act / n * tp_share,
        unsharded_params_bytes: p,
    })
}

fn group_bandwidth(layout: &RankLayout, dims: &[Dim], cluster: &ClusterConfig) -> f64 {
    if layout.spans_nodes(dims, cluster.devices_per_node) {
        cluster.inter_node_bandwidth
    } else {
        cluster.intra_node_bandwidth
    }
}

/// Modeled step time with ranks placed innermost-first (TP, Ulysses, Ring,
/// DP, PP) and each group limited by the slowest link it spans.
pub fn estimate_step_time(
    strategy: &Strategy,
    model: &ModelConfig,
    cluster: &ClusterConfig,
) -> Result<StepTime, CostError> {
    model.validate()?;
    cluster.validate()?;
    strategy.validate()?;
    if strategy.devices() > cluster.devices {
        return Err(CostError::StrategyTooLarge {
            strategy: *strategy,
            devices: cluster.devices,
        });
    }
    let layout = RankLayout::new(*strategy);
    let s = strategy;
    let dtype = model.dtype_bytes as f64;
    let bs_local = model.batch as f64 / s.dp as f64;
    let hs = model.head_size() as f64;
    let seq = model.seq_len as f64;
    let mut calls = 0u64;

    let mut tp = 0.0;
    if s.tp > 1 {
        let payload = bs_local * seq / s.sp_degree() as f64 * model.hidden as f64 * dtype;
        let bw = group_bandwidth(&layout, &[Dim::Tp], cluster);
        let per = if s.tp_sp {
            calls += 8;
            4.0 * payload
                * (algobw_factor(Collective::AllGather, s.tp)
                    + algobw_factor(Collective::ReduceScatter, s.tp))
        } else {
            calls += 4;
            4.0 * payload * algobw_factor(Collective::AllReduce, s.tp)
        };
        tp = per / bw;
    }

    let mut ulysses = 0.0;
    if s.ulysses > 1 {
        let q_like = bs_local * seq / s.sp_degree() as f64 * (model.heads / s.tp) as f64 * hs * dtype;
        let kv_like = q_like / model.gqa_groups() as f64;
        let bw = group_bandwidth(&layout, &[Dim::Ulysses], cluster);
        calls += 8;
        ulysses = 4.0 * (q_like + kv_like) * algobw_factor(Collective::AllToAll, s.ulysses) / bw;
    }

    let mut ring_raw = 0.0;
    if s.ring > 1 {
        let kv_heads_local = model.kv_heads as f64 / (s.tp * s.ulysses) as f64;
        let per_hop = bs_local * seq / s.ring as f64 * kv_heads_local * hs * dtype;
        let bw = group_bandwidth(&layout, &[Dim::Ring], cluster);
        let hops = ring_hops(s.ring);
        calls += hops;
        ring_raw = hops as f64 * per_hop * algobw_factor(Collective::RingShift, s.ring) / bw;
    }
    let ring = (ring_raw - cluster.overlap_budget).max(0.0);

    let mut param = 0.0;
    let n = s.zero_group();
    if n > 1 {
        let payload = model.params_per_block() / s.tp as f64 * dtype;
        let bw = group_bandwidth(&layout, &[Dim::Ulysses, Dim::Ring, Dim::Dp], cluster);
        let ag = algobw_factor(Collective::AllGather, n);
        let rs = algobw_factor(Collective::ReduceScatter, n);
        let volume = match s.zero_stage {
            0 => {
                calls += 1;
                algobw_factor(Collective::AllReduce, n)
            }
            1 | 2 => {
                calls += 2;
                ag + rs
            }
            _ => {
                calls += 3;
                2.0 * ag + rs
            }
        };
        param = payload * volume / bw;
    }

    let blocks = model.layers as f64 / s.pp as f64;
    let latency = calls as f64 * cluster.collective_latency;
    let total = blocks * (tp + ulysses + ring + param + latency);
    Ok(StepTime {
        tp: blocks * tp,
        ulysses: blocks * ulysses,
        ring_p2p_raw: blocks * ring_raw,
        ring_p2p: blocks * ring,
        param: blocks * param,
        latency: blocks * latency,
        total,
    })
}

/// Communication and memory, plus step time when a cluster is given.
pub fn cost_report(
    strategy: &Strategy,
    model: &ModelConfig,
    cluster: Option<&ClusterConfig>,
) -> Result<CostReport, CostError> {
    Ok(CostReport {
        strategy: *strategy,
        comm: comm_cost(strategy, model)?,
        memory: memory_cost(strategy, model)?,
        step_time: cluster
            .map(|c| estimate_step_time(strategy, model, c))
            .transpose()?,
    })
}
