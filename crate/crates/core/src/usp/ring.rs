use super::{Layout, Shard, ShardPlan, UspError};
use crate::numerics::{
    blockwise_backward, row_delta, BlockMask, KvGrads, Scalar, SoftmaxState, Tensor4,
};
use crate::simcomm::{ProcessGroup, Rank};

/// Output of the ring forward pass on one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RingForward<T> {
    pub output: Shard<T>,
    /// Per `(batch, token, head)` row, `(bs, L/R, h)` layout.
    pub logsumexp: Vec<T>,
}

/// Gradients of one rank's head-sharded Q, K and V.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardGrads<T> {
    pub dq: Shard<T>,
    pub dk: Shard<T>,
    pub dv: Shard<T>,
}

fn check_ring_inputs<T: Scalar>(
    rank: &Rank<'_>,
    plan: &ShardPlan,
    shards: &[&Shard<T>],
) -> Result<(ProcessGroup, usize), UspError> {
    let mesh = plan.mesh();
    let (u, r) = mesh.coords(rank.rank());
    for s in shards {
        if s.layout != Layout::HeadSharded {
            return Err(UspError::LayoutMismatch {
                expected: Layout::HeadSharded,
                got: s.layout,
            });
        }
        if s.positions != plan.ring_positions(r) {
            return Err(UspError::Shape(format!(
                "ring rank {r} shard does not hold its planned tokens"
            )));
        }
    }
    Ok((mesh.ring_group(u), r))
}

fn shift<T: Scalar>(
    rank: &mut Rank<'_>,
    group: &ProcessGroup,
    t: &Tensor4<T>,
    label: &str,
) -> Result<Tensor4<T>, UspError> {
    let dims = t.dims();
    let data = rank
        .label_next(label)
        .ring_shift(group, t.data().to_vec())?;
    Ok(Tensor4::new(dims, data)?)
}

/// Load-balanced ring attention over the calling rank's ring column.
///
/// At step `t` the rank holds K/V from ring rank `(r − t) mod R`, folds it
/// into the online softmax, then passes it on. The last step does not shift.
pub fn ring_attention<T: Scalar>(
    rank: &mut Rank<'_>,
    q: &Shard<T>,
    k: &Shard<T>,
    v: &Shard<T>,
    plan: &ShardPlan,
    causal: bool,
) -> Result<RingForward<T>, UspError> {
    let (group, r) = check_ring_inputs(rank, plan, &[q, k, v])?;
    let ring = group.size();
    let mut state = SoftmaxState::new(q.tensor.dims())?;
    let mut k_cur = k.tensor.clone();
    let mut v_cur = v.tensor.clone();
    for t in 0..ring {
        let src = (r + ring - t) % ring;
        let mask = BlockMask::new(causal, &q.positions, plan.ring_positions(src));
        state.update(&q.tensor, &k_cur, &v_cur, mask)?;
        if t + 1 < ring {
            k_cur = shift(rank, &group, &k_cur, "ring:k")?;
            v_cur = shift(rank, &group, &v_cur, "ring:v")?;
        }
    }
    let fin = state.finalize()?;
    Ok(RingForward {
        output: Shard::new(fin.output, q.positions.clone(), Layout::HeadSharded)?,
        logsumexp: fin.logsumexp,
    })
}

/// Backward of [`ring_attention`].
///
/// K/V circulate again while block probabilities are recomputed from the
/// saved log-sum-exp. `dQ` accumulates locally; `dK`/`dV` partial sums travel
/// with their K/V block and take one extra hop to land back on the owner.
#[allow(clippy::too_many_arguments)]
pub fn ring_attention_backward<T: Scalar>(
    rank: &mut Rank<'_>,
    q: &Shard<T>,
    k: &Shard<T>,
    v: &Shard<T>,
    out: &Shard<T>,
    d_out: &Shard<T>,
    logsumexp: &[T],
    plan: &ShardPlan,
    causal: bool,
) -> Result<ShardGrads<T>, UspError> {
    let (group, r) = check_ring_inputs(rank, plan, &[q, k, v, out, d_out])?;
    if logsumexp.len() != q.tensor.dims().rows() || out.tensor.dims() != q.tensor.dims() {
        return Err(UspError::MissingForward);
    }
    let ring = group.size();
    let delta = row_delta(&d_out.tensor, &out.tensor)?;
    let mut dq = Tensor4::zeros(q.tensor.dims())?;
    let mut k_cur = k.tensor.clone();
    let mut v_cur = v.tensor.clone();
    let mut kv_grads = KvGrads::zeros(k.tensor.dims())?;
    for t in 0..ring {
        let src = (r + ring - t) % ring;
        let mask = BlockMask::new(causal, &q.positions, plan.ring_positions(src));
        blockwise_backward(
            &q.tensor,
            &k_cur,
            &v_cur,
            &d_out.tensor,
            logsumexp,
            &delta,
            mask,
            &mut dq,
            &mut kv_grads,
        )?;
        if t + 1 < ring {
            k_cur = shift(rank, &group, &k_cur, "ring:k")?;
            v_cur = shift(rank, &group, &v_cur, "ring:v")?;
            kv_grads.dk = shift(rank, &group, &kv_grads.dk, "ring:dk")?;
            kv_grads.dv = shift(rank, &group, &kv_grads.dv, "ring:dv")?;
        }
    }
    if ring > 1 {
        kv_grads.dk = shift(rank, &group, &kv_grads.dk, "ring:dk")?;
        kv_grads.dv = shift(rank, &group, &kv_grads.dv, "ring:dv")?;
    }
    let positions = q.positions.clone();
    Ok(ShardGrads {
        dq: Shard::new(dq, positions.clone(), Layout::HeadSharded)?,
        dk: Shard::new(kv_grads.dk, positions.clone(), Layout::HeadSharded)?,
        dv: Shard::new(kv_grads.dv, positions, Layout::HeadSharded)?,
    })
}
