use std::fmt;

use serde::{Deserialize, Serialize};

use super::CostError;

/// Per-block parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamFormula {
    /// `12·d²`: four attention projections plus a `4d` FFN.
    #[default]
    Gpt,
    /// Explicit parameter count of one transformer block.
    Custom { per_block: f64 },
}

fn default_dtype_bytes() -> u64 {
    2
}

fn default_act_multiplier() -> f64 {
    17.0
}

fn default_tp_act_fraction() -> f64 {
    0.5
}

/// Transformer shape. `hidden == heads · head_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Tokens per sequence, `L`.
    pub seq_len: u64,
    /// Hidden size, `d`.
    pub hidden: u64,
    /// Query heads, `hc`.
    pub heads: u64,
    /// Key/value heads; `heads / kv_heads` is the GQA group number.
    pub kv_heads: u64,
    /// Global batch size, `bs`.
    pub batch: u64,
    pub layers: u64,
    #[serde(default = "default_dtype_bytes")]
    pub dtype_bytes: u64,
    #[serde(default)]
    pub params: ParamFormula,
    /// Peak activation bytes per block are `act_multiplier · bs · L · d · dtype_bytes`.
    #[serde(default = "default_act_multiplier")]
    pub act_multiplier: f64,
    /// Fraction of activations that plain TP leaves unsharded-equivalent, in (0, 1).
    #[serde(default = "default_tp_act_fraction")]
    pub tp_act_fraction: f64,
}

impl ModelConfig {
    /// A GPT-style preset with the defaults above.
    pub fn gpt(seq_len: u64, hidden: u64, heads: u64, kv_heads: u64, batch: u64, layers: u64) -> Self {
        Self {
            seq_len,
            hidden,
            heads,
            kv_heads,
            batch,
            layers,
            dtype_bytes: default_dtype_bytes(),
            params: ParamFormula::Gpt,
            act_multiplier: default_act_multiplier(),
            tp_act_fraction: default_tp_act_fraction(),
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: String| Err(CostError::InvalidModel(msg));
        for (name, v) in [
            ("seq_len", self.seq_len),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("batch", self.batch),
            ("layers", self.layers),
            ("dtype_bytes", self.dtype_bytes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} is not a multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.heads % self.kv_heads != 0 {
            return bad(format!(
                "heads {} is not a multiple of kv_heads {}",
                self.heads, self.kv_heads
            ));
        }
        if !(self.tp_act_fraction > 0.0 && self.tp_act_fraction < 1.0) {
            return bad(format!(
                "tp_act_fraction {} must lie in (0, 1)",
                self.tp_act_fraction
            ));
        }
        if !(self.act_multiplier > 0.0) {
            return bad("act_multiplier must be positive".into());
        }
        if let ParamFormula::Custom { per_block } = self.params {
            if !(per_block > 0.0) {
                return bad("custom per_block parameter count must be positive".into());
            }
        }
        Ok(())
    }

    pub fn head_size(&self) -> u64 {
        self.hidden / self.heads
    }

    /// GQA group number `G = hc / kv_hc`.
    pub fn gqa_groups(&self) -> u64 {
        self.heads / self.kv_heads
    }

    pub fn params_per_block(&self) -> f64 {
        match self.params {
            ParamFormula::Gpt => 12.0 * (self.hidden as f64).powi(2),
            ParamFormula::Custom { per_block } => per_block,
        }
    }

    /// Elements in one `(bs, L, d)` hidden-state tensor.
    pub fn hidden_elems(&self) -> f64 {
        self.batch as f64 * self.seq_len as f64 * self.hidden as f64
    }
}

/// Devices and links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub devices: u64,
    pub devices_per_node: u64,
    /// Bytes per second within a node.
    pub intra_node_bandwidth: f64,
    /// Bytes per second between nodes.
    pub inter_node_bandwidth: f64,
    /// Bytes of device memory.
    pub device_memory: f64,
    /// Fixed cost per collective call, seconds.
    #[serde(default)]
    pub collective_latency: f64,
    /// Ring P2P seconds per block that compute can hide.
    #[serde(default)]
    pub overlap_budget: f64,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |msg: String| Err(CostError::InvalidCluster(msg));
        if self.devices == 0 || self.devices_per_node == 0 {
            return bad("device counts must be positive".into());
        }
        if self.devices % self.devices_per_node != 0 {
            return bad(format!(
                "{} devices do not fill nodes of {}",
                self.devices, self.devices_per_node
            ));
        }
        if !(self.intra_node_bandwidth > 0.0 && self.inter_node_bandwidth > 0.0) {
            return bad("bandwidths must be positive".into());
        }
        if !(self.device_memory > 0.0) {
            return bad("device_memory must be positive".into());
        }
        if self.collective_latency < 0.0 || self.overlap_budget < 0.0 {
            return bad("latency and overlap budget must be non-negative".into());
        }
        Ok(())
    }

    pub fn nodes(&self) -> u64 {
        self.devices / self.devices_per_node
    }
}

fn one() -> u64 {
    1
}

/// Degrees of each parallel dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Strategy {
    #[serde(default = "one")]
    pub tp: u64,
    #[serde(default = "one")]
    pub ulysses: u64,
    #[serde(default = "one")]
    pub ring: u64,
    #[serde(default = "one")]
    pub dp: u64,
    #[serde(default = "one")]
    pub pp: u64,
    #[serde(default)]
    pub zero_stage: u8,
    /// Megatron-style sequence optimization of TP (allgather + reduce-scatter).
    #[serde(default)]
    pub tp_sp: bool,
}

impl Default for Strategy {
    fn default() -> Self {
        Self {
            tp: 1,
            ulysses: 1,
            ring: 1,
            dp: 1,
            pp: 1,
            zero_stage: 0,
            tp_sp: false,
        }
    }
}

impl Strategy {
    pub fn devices(&self) -> u64 {
        self.tp * self.ulysses * self.ring * self.dp * self.pp
    }

    pub fn sp_degree(&self) -> u64 {
        self.ulysses * self.ring
    }

    /// Size of the combined SP × DP group that syncs gradients and shards ZeRO state.
    pub fn zero_group(&self) -> u64 {
        self.dp * self.ulysses * self.ring
    }

    pub fn validate(&self) -> Result<(), CostError> {
        if [self.tp, self.ulysses, self.ring, self.dp, self.pp].contains(&0) {
            return Err(CostError::InvalidStrategy(format!("{self}: degrees must be positive")));
        }
        if self.zero_stage > 3 {
            return Err(CostError::InvalidStrategy(format!(
                "zero stage {} is not one of 0..=3",
                self.zero_stage
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp={}{} ulysses={} ring={} dp={} pp={} zero={}",
            self.tp,
            if self.tp_sp { "(sp)" } else { "" },
            self.ulysses,
            self.ring,
            self.dp,
            self.pp,
            self.zero_stage
        )
    }
}
