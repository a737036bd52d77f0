use super::{
    all_to_all_4d, ring_attention, ring_attention_backward, Layout, Redistribution, Shard,
    ShardGrads, ShardPlan, UspError,
};
use crate::numerics::{AttentionGrads, Scalar, Tensor4};
use crate::simcomm::{spawn, CommLedger, ProcessMesh, Rank};

/// Head-sharded forward artifacts kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct UspSaved<T> {
    pub q: Shard<T>,
    pub k: Shard<T>,
    pub v: Shard<T>,
    pub out: Shard<T>,
    pub logsumexp: Vec<T>,
}

/// Checks the head-count limits of a Ulysses degree.
pub fn check_degrees(q_heads: usize, kv_heads: usize, mesh: ProcessMesh) -> Result<(), UspError> {
    let ulysses = mesh.ulysses_degree();
    if q_heads % kv_heads != 0 {
        return Err(UspError::HeadDivisibility {
            heads: q_heads,
            ulysses: kv_heads,
        });
    }
    if ulysses > kv_heads {
        return Err(UspError::UlyssesExceedsKvHeads { ulysses, kv_heads });
    }
    for heads in [q_heads, kv_heads] {
        if heads % ulysses != 0 {
            return Err(UspError::HeadDivisibility { heads, ulysses });
        }
    }
    Ok(())
}

/// Unified attention forward on one rank: three `AllToAll4D` calls scatter
/// heads, ring attention runs over the ring column, and one more `AllToAll4D`
/// returns `O` to the sequence-sharded layout.
pub fn usp_attention<T: Scalar>(
    rank: &mut Rank<'_>,
    plan: &ShardPlan,
    q: &Shard<T>,
    k: &Shard<T>,
    v: &Shard<T>,
    causal: bool,
) -> Result<(Shard<T>, UspSaved<T>), UspError> {
    let mesh = plan.mesh();
    if mesh.world_size() != rank.world_size() {
        return Err(UspError::MeshMismatch {
            mesh: mesh.world_size(),
            world: rank.world_size(),
        });
    }
    check_degrees(q.tensor.dims().heads, k.tensor.dims().heads, mesh)?;
    let down = Redistribution::ScatterHeads;
    let qh = all_to_all_4d(rank.label_next("a2a:q"), q, down, plan)?;
    let kh = all_to_all_4d(rank.label_next("a2a:k"), k, down, plan)?;
    let vh = all_to_all_4d(rank.label_next("a2a:v"), v, down, plan)?;
    let fwd = ring_attention(rank, &qh, &kh, &vh, plan, causal)?;
    let out = all_to_all_4d(rank.label_next("a2a:o"), &fwd.output, down.inverse(), plan)?;
    Ok((
        out,
        UspSaved {
            q: qh,
            k: kh,
            v: vh,
            out: fwd.output,
            logsumexp: fwd.logsumexp,
        },
    ))
}

/// Backward of [`usp_attention`]: `dO` is scattered by heads, the ring
/// backward runs, and `dQ`, `dK`, `dV` are scattered back by sequence.
pub fn usp_attention_backward<T: Scalar>(
    rank: &mut Rank<'_>,
    plan: &ShardPlan,
    saved: &UspSaved<T>,
    d_out: &Shard<T>,
    causal: bool,
) -> Result<ShardGrads<T>, UspError> {
    let down = Redistribution::ScatterHeads;
    let doh = all_to_all_4d(rank.label_next("a2a:do"), d_out, down, plan)?;
    let g = ring_attention_backward(
        rank,
        &saved.q,
        &saved.k,
        &saved.v,
        &saved.out,
        &doh,
        &saved.logsumexp,
        plan,
        causal,
    )?;
    let up = down.inverse();
    Ok(ShardGrads {
        dq: all_to_all_4d(rank.label_next("a2a:dq"), &g.dq, up, plan)?,
        dk: all_to_all_4d(rank.label_next("a2a:dk"), &g.dk, up, plan)?,
        dv: all_to_all_4d(rank.label_next("a2a:dv"), &g.dv, up, plan)?,
    })
}

/// The sequence-sharded piece of a global tensor held by `rank`.
pub fn shard_sequence<T: Scalar>(
    plan: &ShardPlan,
    global: &Tensor4<T>,
    rank: usize,
) -> Result<Shard<T>, UspError> {
    if global.dims().seq != plan.seq_len() {
        return Err(UspError::Shape(format!(
            "tensor has {} tokens but the plan covers {}",
            global.dims().seq,
            plan.seq_len()
        )));
    }
    let positions = plan.rank_positions(rank).to_vec();
    let tensor = global.select_tokens(&positions)?;
    Shard::new(tensor, positions, Layout::SequenceSharded)
}

/// Places every sequence-sharded piece back at its original positions.
pub fn assemble_sequence<T: Scalar>(shards: &[Shard<T>]) -> Result<Tensor4<T>, UspError> {
    let first = shards
        .first()
        .ok_or_else(|| UspError::Shape("no shards to assemble".into()))?;
    let seq_len: usize = shards.iter().map(|s| s.positions.len()).sum();
    let dims = first.tensor.dims().with_seq(seq_len);
    let mut out = Tensor4::zeros(dims)?;
    let mut seen = vec![false; seq_len];
    for s in shards {
        if s.layout != Layout::SequenceSharded || s.tensor.dims().with_seq(seq_len) != dims {
            return Err(UspError::Shape("shards disagree on layout or extents".into()));
        }
        for (i, &p) in s.positions.iter().enumerate() {
            if p >= seq_len || std::mem::replace(&mut seen[p], true) {
                return Err(UspError::Shape(format!("position {p} is not a unique token")));
            }
            for b in 0..dims.bs {
                for h in 0..dims.heads {
                    out.row_mut(b, p, h).copy_from_slice(s.tensor.row(b, i, h));
                }
            }
        }
    }
    Ok(out)
}

/// Gathered results of a simulated unified attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct UspRun<T> {
    /// Output in original token order.
    pub output: Tensor4<T>,
    /// Present when a cotangent was supplied.
    pub grads: Option<AttentionGrads<T>>,
    pub ledger: CommLedger,
}

/// Shards global `Q`, `K`, `V` (and optionally `dO`) over `mesh`, runs the
/// unified attention forward (and backward) on every simulated rank, and
/// reassembles the results in original token order.
pub fn run_usp<T: Scalar>(
    mesh: ProcessMesh,
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    d_out: Option<&Tensor4<T>>,
    causal: bool,
) -> Result<UspRun<T>, UspError> {
    check_degrees(q.dims().heads, k.dims().heads, mesh)?;
    if k.dims() != v.dims() || k.dims().seq != q.dims().seq {
        return Err(UspError::Shape(format!(
            "Q {} / K {} / V {} are not a self-attention triple",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if let Some(g) = d_out {
        if g.dims() != q.dims() {
            return Err(UspError::Shape(format!("dO is {} but Q is {}", g.dims(), q.dims())));
        }
    }
    let plan = ShardPlan::for_mask(q.dims().seq, mesh, causal)?;
    type RankOut<T> = (Shard<T>, Option<ShardGrads<T>>);
    let run = spawn(mesh.world_size(), |rank| -> Result<RankOut<T>, UspError> {
        let me = rank.rank();
        let qs = shard_sequence(&plan, q, me)?;
        let ks = shard_sequence(&plan, k, me)?;
        let vs = shard_sequence(&plan, v, me)?;
        let (out, saved) = usp_attention(rank, &plan, &qs, &ks, &vs, causal)?;
        let grads = match d_out {
            Some(g) => {
                let gs = shard_sequence(&plan, g, me)?;
                Some(usp_attention_backward(rank, &plan, &saved, &gs, causal)?)
            }
            None => None,
        };
        Ok((out, grads))
    })?;
    let (outs, grads): (Vec<_>, Vec<_>) = run.results.into_iter().unzip();
    let output = assemble_sequence(&outs)?;
    let grads = if d_out.is_some() {
        let grads: Vec<ShardGrads<T>> = grads.into_iter().flatten().collect();
        let pick = |f: fn(&ShardGrads<T>) -> &Shard<T>| {
            let shards: Vec<Shard<T>> = grads.iter().map(|g| f(g).clone()).collect();
            assemble_sequence(&shards)
        };
        Some(AttentionGrads {
            dq: pick(|g| &g.dq)?,
            dk: pick(|g| &g.dk)?,
            dv: pick(|g| &g.dv)?,
        })
    } else {
        None
    };
    Ok(UspRun {
        output,
        grads,
        ledger: run.ledger,
    })
}
