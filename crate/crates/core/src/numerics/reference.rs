use super::tensor::{Scalar, Tensor4};
use super::{dot, softmax_scale, visible, NumericsError};

/// Gradients of attention with respect to its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T> {
    pub dq: Tensor4<T>,
    pub dk: Tensor4<T>,
    pub dv: Tensor4<T>,
}

/// Shape checks shared by the reference paths. Returns the GQA group size.
pub(crate) fn check_qkv<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
) -> Result<usize, NumericsError> {
    let (qd, kd, vd) = (q.dims(), k.dims(), v.dims());
    if kd.seq != vd.seq {
        return Err(NumericsError::KvSeqMismatch {
            k: kd.seq,
            v: vd.seq,
        });
    }
    if kd != vd {
        return Err(NumericsError::Shape(format!("K is {kd} but V is {vd}")));
    }
    if qd.bs != kd.bs || qd.head_size != kd.head_size {
        return Err(NumericsError::Shape(format!("Q is {qd} but K is {kd}")));
    }
    if qd.heads % kd.heads != 0 {
        return Err(NumericsError::HeadDivisibility {
            q_heads: qd.heads,
            kv_heads: kd.heads,
        });
    }
    Ok(qd.heads / kd.heads)
}

fn resolve_positions<'a>(
    q: usize,
    k: usize,
    causal: bool,
    positions: Option<&'a [usize]>,
    identity: &'a mut Vec<usize>,
) -> Result<&'a [usize], NumericsError> {
    if causal && q != k {
        return Err(NumericsError::Shape(format!(
            "causal self-attention needs equal query and key lengths, got {q} and {k}"
        )));
    }
    match positions {
        Some(p) if p.len() != q || p.len() != k => Err(NumericsError::Shape(format!(
            "{} positions for {q} queries and {k} keys",
            p.len()
        ))),
        Some(p) => Ok(p),
        None => {
            *identity = (0..q.max(k)).collect();
            Ok(identity.as_slice())
        }
    }
}

/// Softmax probabilities of one query row over every key, zero where masked.
fn probabilities<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    b: usize,
    i: usize,
    h: usize,
    group: usize,
    causal: bool,
    positions: &[usize],
) -> Vec<T> {
    let scale = softmax_scale::<T>(q.dims().head_size);
    let kvh = h / group;
    let qrow = q.row(b, i, h);
    let lk = k.dims().seq;
    let mut scores = vec![T::neg_infinity(); lk];
    let mut max = T::neg_infinity();
    for (j, s) in scores.iter_mut().enumerate() {
        if visible(causal, positions[i], positions[j]) {
            *s = dot(qrow, k.row(b, j, kvh)) * scale;
            max = max.max(*s);
        }
    }
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = if s.is_finite() {
            (*s - max).exp()
        } else {
            T::zero()
        };
        sum = sum + *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
    scores
}

/// Exact single-device attention, `softmax(Q·Kᵀ/√hs)·V` with optional causal
/// masking by original token position. Query head `h` reads kv head
/// `h / (hc / kv_hc)`. Keys are summed in ascending order.
pub fn reference_attention<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    causal: bool,
    positions: Option<&[usize]>,
) -> Result<Tensor4<T>, NumericsError> {
    let group = check_qkv(q, k, v)?;
    let qd = q.dims();
    let mut identity = Vec::new();
    let pos = resolve_positions(qd.seq, k.dims().seq, causal, positions, &mut identity)?;
    let mut out = Tensor4::zeros(qd)?;
    for b in 0..qd.bs {
        for i in 0..qd.seq {
            for h in 0..qd.heads {
                let p = probabilities(q, k, b, i, h, group, causal, pos);
                let orow = out.row_mut(b, i, h);
                for (j, &pj) in p.iter().enumerate() {
                    for (o, &vx) in orow.iter_mut().zip(v.row(b, j, h / group)) {
                        *o = *o + pj * vx;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Probability rows of the reference path, laid out `(bs, L, hc, Lk)`.
pub fn reference_probabilities<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    causal: bool,
    positions: Option<&[usize]>,
) -> Result<Vec<T>, NumericsError> {
    let group = check_qkv(q, k, k)?;
    let qd = q.dims();
    let mut identity = Vec::new();
    let pos = resolve_positions(qd.seq, k.dims().seq, causal, positions, &mut identity)?;
    let mut rows = Vec::with_capacity(qd.rows() * k.dims().seq);
    for b in 0..qd.bs {
        for i in 0..qd.seq {
            for h in 0..qd.heads {
                rows.extend(probabilities(q, k, b, i, h, group, causal, pos));
            }
        }
    }
    Ok(rows)
}

/// Analytic gradients of [`reference_attention`] for cotangent `d_o`.
/// Shared kv heads accumulate the contributions of every query head in
/// their group.
pub fn reference_attention_grad<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    d_o: &Tensor4<T>,
    causal: bool,
    positions: Option<&[usize]>,
) -> Result<AttentionGrads<T>, NumericsError> {
    let group = check_qkv(q, k, v)?;
    let qd = q.dims();
    if d_o.dims() != qd.with_head_size(v.dims().head_size) {
        return Err(NumericsError::Shape(format!(
            "dO is {} but the output is {qd}",
            d_o.dims()
        )));
    }
    let mut identity = Vec::new();
    let pos = resolve_positions(qd.seq, k.dims().seq, causal, positions, &mut identity)?;
    let scale = softmax_scale::<T>(qd.head_size);
    let mut dq = Tensor4::zeros(qd)?;
    let mut dk = Tensor4::zeros(k.dims())?;
    let mut dv = Tensor4::zeros(v.dims())?;
    let lk = k.dims().seq;
    for b in 0..qd.bs {
        for i in 0..qd.seq {
            for h in 0..qd.heads {
                let kvh = h / group;
                let p = probabilities(q, k, b, i, h, group, causal, pos);
                let go = d_o.row(b, i, h);
                let dp: Vec<T> = (0..lk).map(|j| dot(go, v.row(b, j, kvh))).collect();
                let delta = p
                    .iter()
                    .zip(&dp)
                    .fold(T::zero(), |acc, (&pj, &dpj)| acc + pj * dpj);
                for j in 0..lk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - delta) * scale;
                    let krow = k.row(b, j, kvh).to_vec();
                    for (g, kx) in dq.row_mut(b, i, h).iter_mut().zip(krow) {
                        *g = *g + ds * kx;
                    }
                    for (g, &qx) in dk.row_mut(b, j, kvh).iter_mut().zip(q.row(b, i, h)) {
                        *g = *g + ds * qx;
                    }
                    for (g, &ox) in dv.row_mut(b, j, kvh).iter_mut().zip(go) {
                        *g = *g + p[j] * ox;
                    }
                }
            }
        }
    }
    Ok(AttentionGrads { dq, dk, dv })
}
