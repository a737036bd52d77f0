//! Strategy enumeration, feasibility verdicts and ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::costmodel::{
    cost_report, memory_cost, ClusterConfig, CostReport, ModelConfig, RankLayout, Strategy,
};

/// Hard constraints a strategy must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Devices,
    Degrees,
    TpHeads,
    HeadLimit,
    UlyssesKvHeads,
    TpUlyssesKvHeads,
    Batch,
    Layers,
    Sequence,
    SpWithZero,
    Memory,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::Devices => "devices",
            Rule::Degrees => "degrees",
            Rule::TpHeads => "tp-heads",
            Rule::HeadLimit => "head-limit",
            Rule::UlyssesKvHeads => "ulysses-kv-heads",
            Rule::TpUlyssesKvHeads => "tp-ulysses-kv-heads",
            Rule::Batch => "batch",
            Rule::Layers => "layers",
            Rule::Sequence => "sequence",
            Rule::SpWithZero => "sp-with-zero",
            Rule::Memory => "memory",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Comparative guidance attached to verdicts as notes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guideline {
    UnifiedSp,
    DpOverSp,
    GqaFavorsSp,
    TpSpMemory,
    LongSequenceSp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub guideline: Guideline,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Rejected { rule: Rule, reason: String },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Ok => f.write_str("ok"),
            Verdict::Rejected { rule, reason } => write!(f, "rejected [{rule}]: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub strategy: Strategy,
    pub verdict: Verdict,
    /// Always present for accepted candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
    pub rank_order: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<Note>,
}

impl PlanCandidate {
    pub fn step_time(&self) -> Option<f64> {
        self.cost
            .as_ref()
            .and_then(|c| c.step_time.as_ref())
            .map(|t| t.total)
    }
}

/// Degrees fixed by the caller; `None` leaves a dimension free. PP is
/// pinned to 1 unless given explicitly (`"pp": null` frees it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pins {
    #[serde(default)]
    pub tp: Option<u64>,
    #[serde(default)]
    pub ulysses: Option<u64>,
    #[serde(default)]
    pub ring: Option<u64>,
    #[serde(default)]
    pub dp: Option<u64>,
    #[serde(default = "pp_one")]
    pub pp: Option<u64>,
}

fn pp_one() -> Option<u64> {
    Some(1)
}

impl Default for Pins {
    fn default() -> Self {
        Self {
            tp: None,
            ulysses: None,
            ring: None,
            dp: None,
            pp: pp_one(),
        }
    }
}

fn all_zero_stages() -> Vec<u8> {
    vec![0, 1, 2, 3]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanOptions {
    #[serde(default)]
    pub pins: Pins,
    #[serde(default = "all_zero_stages")]
    pub zero_stages: Vec<u8>,
    /// Also try the sequence-optimized TP variant when `tp > 1`.
    #[serde(default = "yes")]
    pub tp_sp_variants: bool,
}

fn yes() -> bool {
    true
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            pins: Pins::default(),
            zero_stages: all_zero_stages(),
            tp_sp_variants: true,
        }
    }
}

/// Every enumerated candidate, accepted or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    pub candidates: Vec<PlanCandidate>,
}

impl Enumeration {
    pub fn feasible(&self) -> Vec<PlanCandidate> {
        self.candidates
            .iter()
            .filter(|c| c.verdict.is_ok())
            .cloned()
            .collect()
    }

    /// Rejection counts by rule.
    pub fn tally(&self) -> BTreeMap<Rule, usize> {
        let mut t = BTreeMap::new();
        for c in &self.candidates {
            if let Verdict::Rejected { rule, .. } = c.verdict {
                *t.entry(rule).or_default() += 1;
            }
        }
        t
    }
}

/// Nested process-group layout, innermost first.
pub fn group_order(strategy: &Strategy) -> RankLayout {
    RankLayout::new(*strategy)
}

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Ordered factorizations `tp·u·r·dp·pp == n`.
pub fn factorizations(n: u64) -> Vec<[u64; 5]> {
    let mut out = Vec::new();
    for tp in divisors(n) {
        let a = n / tp;
        for u in divisors(a) {
            let b = a / u;
            for r in divisors(b) {
                let c = b / r;
                for dp in divisors(c) {
                    out.push([tp, u, r, dp, c / dp]);
                }
            }
        }
    }
    out
}

fn reject(rule: Rule, reason: String) -> Result<(), (Rule, String)> {
    Err((rule, reason))
}

/// Structural checks, in the order that picks the governing reason.
fn structural(s: &Strategy, model: &ModelConfig, cluster: &ClusterConfig) -> Result<(), (Rule, String)> {
    if s.devices() != cluster.devices {
        return reject(
            Rule::Devices,
            format!("uses {} devices but the cluster has {}", s.devices(), cluster.devices),
        );
    }
    if let Err(e) = s.validate() {
        return reject(Rule::Degrees, e.to_string());
    }
    let (hc, kv) = (model.heads, model.kv_heads);
    if hc % s.tp != 0 {
        return reject(Rule::TpHeads, format!("tp={} does not divide {hc} heads", s.tp));
    }
    if s.ulysses > kv {
        return reject(
            Rule::HeadLimit,
            format!(
                "Ulysses degree {} exceeds KV head count {kv}: the Ulysses degree cannot exceed the number of attention heads",
                s.ulysses
            ),
        );
    }
    if kv % s.ulysses != 0 {
        return reject(
            Rule::UlyssesKvHeads,
            format!("ulysses={} does not divide {kv} KV heads", s.ulysses),
        );
    }
    let tu = s.tp * s.ulysses;
    if tu > kv || kv % tu != 0 {
        return reject(
            Rule::TpUlyssesKvHeads,
            format!(
                "tp·ulysses = {tu} must divide {kv} KV heads (at most {kv})"
            ),
        );
    }
    if s.dp > model.batch || model.batch % s.dp != 0 {
        return reject(
            Rule::Batch,
            format!("dp={} does not divide batch size {}", s.dp, model.batch),
        );
    }
    if model.layers % s.pp != 0 {
        return reject(
            Rule::Layers,
            format!("pp={} does not divide {} layers", s.pp, model.layers),
        );
    }
    let seq = model.seq_len;
    let chunks = if s.ring > 1 { 2 * s.ring } else { 1 };
    let per_rank = s.sp_degree() * if s.tp_sp { s.tp } else { 1 };
    if seq % chunks != 0 || seq % per_rank != 0 || (seq / s.ring) % s.ulysses != 0 {
        return reject(
            Rule::Sequence,
            format!(
                "sequence length {seq} does not split into {chunks} zigzag chunks over {per_rank} ranks"
            ),
        );
    }
    if s.sp_degree() > 1 && s.zero_stage == 0 {
        return reject(
            Rule::SpWithZero,
            format!(
                "SP degree {} with zero_stage 0: SP should always be used in conjunction wit ZeRO-1/2",
                s.sp_degree()
            ),
        );
    }
    Ok(())
}

fn fits(s: &Strategy, model: &ModelConfig, cluster: &ClusterConfig) -> bool {
    structural(s, model, cluster).is_ok()
        && memory_cost(s, model).is_ok_and(|m| m.total() <= cluster.device_memory)
}

fn notes_for(s: &Strategy, model: &ModelConfig, cluster: &ClusterConfig, memory_failed: bool) -> Vec<Note> {
    let mut notes = Vec::new();
    let mut add = |guideline, text: String| notes.push(Note { guideline, text });
    let sp = s.sp_degree();
    let kv_room = model.kv_heads / s.tp;
    if s.ring > 1 && s.ulysses < kv_room.min(cluster.devices_per_node) {
        add(
            Guideline::UnifiedSp,
            format!(
                "Unified SP encompasses the capabilities of both: raising ulysses above {} moves ring traffic onto all-to-all",
                s.ulysses
            ),
        );
    }
    if sp > 1 && model.batch >= s.dp * sp && model.batch % (s.dp * sp) == 0 {
        add(
            Guideline::DpOverSp,
            format!(
                "prioritizing the use of DP over SP if possible: batch size {} allows dp={}",
                model.batch,
                s.dp * sp
            ),
        );
    }
    if s.tp > 1 && model.gqa_groups() > 1 {
        add(
            Guideline::GqaFavorsSp,
            format!(
                "GQA can reduce the communication cost of SP without affecting TP (G={})",
                model.gqa_groups()
            ),
        );
    }
    if memory_failed && s.tp == 1 && sp > 1 {
        let sibling = Strategy {
            tp: sp,
            ulysses: 1,
            ring: 1,
            tp_sp: true,
            ..*s
        };
        if fits(&sibling, model, cluster) {
            add(
                Guideline::TpSpMemory,
                format!(
                    "switching TP-sp to SP cannot increase the sequence length: {sibling} fits in memory"
                ),
            );
        }
    }
    if s.ring > 1 && s.ulysses == kv_room {
        add(
            Guideline::LongSequenceSp,
            format!(
                "a higher degree of SP parallelism needs ring={} because ulysses is capped at {kv_room} by the head count",
                s.ring
            ),
        );
    }
    notes
}

/// Full verdict for one strategy on one cluster.
pub fn check_feasibility(
    strategy: &Strategy,
    model: &ModelConfig,
    cluster: &ClusterConfig,
) -> PlanCandidate {
    let rank_order = group_order(strategy).to_string();
    let rejected = |rule, reason, notes| PlanCandidate {
        strategy: *strategy,
        verdict: Verdict::Rejected { rule, reason },
        cost: None,
        rank_order: rank_order.clone(),
        notes,
    };
    if let Err(e) = model.validate().and_then(|_| cluster.validate()) {
        return rejected(Rule::Degrees, e.to_string(), Vec::new());
    }
    if let Err((rule, reason)) = structural(strategy, model, cluster) {
        return rejected(rule, reason, Vec::new());
    }
    let cost = match cost_report(strategy, model, Some(cluster)) {
        Ok(c) => c,
        Err(e) => return rejected(Rule::Degrees, e.to_string(), Vec::new()),
    };
    let need = cost.memory.total();
    if need > cluster.device_memory {
        return rejected(
            Rule::Memory,
            format!(
                "needs {need:.0} bytes per device, {:.0} bytes over the {:.0} available",
                need - cluster.device_memory,
                cluster.device_memory
            ),
            notes_for(strategy, model, cluster, true),
        );
    }
    PlanCandidate {
        strategy: *strategy,
        verdict: Verdict::Ok,
        cost: Some(cost),
        rank_order,
        notes: notes_for(strategy, model, cluster, false),
    }
}

/// Every factorization of the cluster size allowed by the pins, with each
/// ZeRO stage and TP variant, together with its verdict.
pub fn enumerate_strategies(
    model: &ModelConfig,
    cluster: &ClusterConfig,
    options: &PlanOptions,
) -> Enumeration {
    let p = &options.pins;
    let pinned = |pin: Option<u64>, v: u64| pin.is_none_or(|x| x == v);
    let mut zero_stages = options.zero_stages.clone();
    zero_stages.sort_unstable();
    zero_stages.dedup();
    let mut candidates = Vec::new();
    for [tp, ulysses, ring, dp, pp] in factorizations(cluster.devices) {
        if !(pinned(p.tp, tp)
            && pinned(p.ulysses, ulysses)
            && pinned(p.ring, ring)
            && pinned(p.dp, dp)
            && pinned(p.pp, pp))
        {
            continue;
        }
        let variants: &[bool] = if tp > 1 && options.tp_sp_variants {
            &[false, true]
        } else {
            &[false]
        };
        for &zero_stage in &zero_stages {
            for &tp_sp in variants {
                let s = Strategy {
                    tp,
                    ulysses,
                    ring,
                    dp,
                    pp,
                    zero_stage,
                    tp_sp,
                };
                candidates.push(check_feasibility(&s, model, cluster));
            }
        }
    }
    Enumeration { candidates }
}

fn plan_order(a: &PlanCandidate, b: &PlanCandidate) -> Ordering {
    let t = |c: &PlanCandidate| c.step_time().unwrap_or(f64::INFINITY);
    t(a).total_cmp(&t(b))
        .then(a.strategy.ring.cmp(&b.strategy.ring))
        .then(a.strategy.tp.cmp(&b.strategy.tp))
        .then(a.strategy.cmp(&b.strategy))
}

/// Accepted candidates, fastest first; ties go to the lower ring degree,
/// then the lower TP degree, then strategy order.
pub fn rank_plans(candidates: &[PlanCandidate]) -> Vec<PlanCandidate> {
    let mut ok: Vec<PlanCandidate> = candidates
        .iter()
        .filter(|c| c.verdict.is_ok())
        .cloned()
        .collect();
    ok.sort_by(plan_order);
    ok
}
