use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_usp, UspError};
use crate::numerics::{
    reference_attention, reference_attention_grad, Dims4, Precision, Scalar, Tensor4,
};
use crate::simcomm::{Collective, CommLedger, ProcessMesh};

/// Inputs of one simulated fwd + bwd run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub bs: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_size: usize,
    pub ulysses: usize,
    pub ring: usize,
    pub causal: bool,
    pub precision: Precision,
    pub seed: u64,
    /// Compare against the single-device reference.
    pub check: bool,
    /// Overrides the precision's default tolerance.
    #[serde(default)]
    pub tolerance: Option<f64>,
}

impl SimulateConfig {
    pub fn default_tolerance(precision: Precision) -> f64 {
        match precision {
            Precision::Fp64 => 1e-10,
            Precision::Fp32 => 1e-3,
        }
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
            .unwrap_or_else(|| Self::default_tolerance(self.precision))
    }
}

/// Seeded inputs: one ChaCha8 stream seeded with `seed` fills `Q`, `K`, `V`
/// and `dO` in that order, row-major, with values uniform in `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeededInputs<T> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
    pub d_out: Tensor4<T>,
}

pub fn seeded_inputs<T: Scalar>(
    bs: usize,
    seq_len: usize,
    heads: usize,
    kv_heads: usize,
    head_size: usize,
    seed: u64,
) -> Result<SeededInputs<T>, UspError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qd = Dims4::new(bs, seq_len, heads, head_size);
    let kd = qd.with_heads(kv_heads);
    let mut fill = |d: Dims4| {
        Tensor4::from_fn(d, |_, _, _, _| {
            T::from_f64_lossy(rng.random_range(-1.0..1.0))
        })
    };
    Ok(SeededInputs {
        q: fill(qd)?,
        k: fill(kd)?,
        v: fill(kd)?,
        d_out: fill(qd)?,
    })
}

/// Worst deviation of one tensor from the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStat {
    pub max_abs: f64,
    /// `max_abs` over the reference's largest magnitude.
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub output: ErrorStat,
    pub dq: ErrorStat,
    pub dk: ErrorStat,
    pub dv: ErrorStat,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveSummary {
    pub collective: Collective,
    /// Calls issued by rank 0.
    pub calls_per_rank: usize,
    /// Distinct group invocations.
    pub events: usize,
    pub bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResult {
    pub world_size: usize,
    pub collectives: Vec<CollectiveSummary>,
    pub total_bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<OracleCheck>,
    #[serde(skip)]
    pub ledger: CommLedger,
}

impl SimulateResult {
    pub fn passed(&self) -> bool {
        self.check.as_ref().is_none_or(|c| c.passed)
    }
}

fn stat<T: Scalar>(got: &Tensor4<T>, want: &Tensor4<f64>) -> Result<ErrorStat, UspError> {
    let max_abs = got.to_f64().max_abs_diff(want)?;
    let scale = want.max_abs();
    Ok(ErrorStat {
        max_abs,
        max_rel: if scale > 0.0 { max_abs / scale } else { max_abs },
    })
}

fn run_typed<T: Scalar>(cfg: &SimulateConfig) -> Result<SimulateResult, UspError> {
    let mesh = ProcessMesh::new(cfg.ulysses, cfg.ring)?;
    let x = seeded_inputs::<T>(
        cfg.bs,
        cfg.seq_len,
        cfg.heads,
        cfg.kv_heads,
        cfg.head_size,
        cfg.seed,
    )?;
    let run = run_usp(mesh, &x.q, &x.k, &x.v, Some(&x.d_out), cfg.causal)?;
    let check = if cfg.check {
        let (q, k, v, d) = (x.q.to_f64(), x.k.to_f64(), x.v.to_f64(), x.d_out.to_f64());
        let out = reference_attention(&q, &k, &v, cfg.causal, None)?;
        let g = reference_attention_grad(&q, &k, &v, &d, cfg.causal, None)?;
        let grads = run.grads.as_ref().ok_or(UspError::MissingForward)?;
        let stats = [
            stat(&run.output, &out)?,
            stat(&grads.dq, &g.dq)?,
            stat(&grads.dk, &g.dk)?,
            stat(&grads.dv, &g.dv)?,
        ];
        let tolerance = cfg.tolerance();
        let passed = match cfg.precision {
            Precision::Fp64 => stats.iter().all(|s| s.max_abs <= tolerance),
            Precision::Fp32 => stats.iter().all(|s| s.max_rel <= tolerance),
        };
        Some(OracleCheck {
            output: stats[0],
            dq: stats[1],
            dk: stats[2],
            dv: stats[3],
            tolerance,
            passed,
        })
    } else {
        None
    };
    let collectives = Collective::ALL
        .iter()
        .map(|&c| CollectiveSummary {
            collective: c,
            calls_per_rank: run.ledger.calls_on_rank(c, 0),
            events: run.ledger.events(c),
            bytes: run.ledger.bytes_of(c),
        })
        .collect();
    Ok(SimulateResult {
        world_size: mesh.world_size(),
        collectives,
        total_bytes: run.ledger.total_bytes(),
        check,
        ledger: run.ledger,
    })
}

/// Runs unified attention fwd + bwd on seeded inputs over a
/// `ulysses × ring` mesh and optionally checks it against the reference.
///
/// With `check`, fp64 runs compare the max absolute error and fp32 runs
/// the max error relative to the largest reference magnitude.
pub fn simulate(cfg: &SimulateConfig) -> Result<SimulateResult, UspError> {
    match cfg.precision {
        Precision::Fp32 => run_typed::<f32>(cfg),
        Precision::Fp64 => run_typed::<f64>(cfg),
    }
}
