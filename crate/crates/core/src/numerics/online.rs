use super::reference::check_qkv;
use super::tensor::{Dims4, Scalar, Tensor4};
use super::{dot, softmax_scale, visible, NumericsError};

/// Which key/query pairs of a block participate.
#[derive(Debug, Clone, Copy)]
pub enum BlockMask<'a> {
    /// Every key is visible to every query.
    Full,
    /// Key `j` is visible to query `i` iff `k_positions[j] <= q_positions[i]`.
    Causal {
        q_positions: &'a [usize],
        k_positions: &'a [usize],
    },
}

impl<'a> BlockMask<'a> {
    pub fn new(causal: bool, q_positions: &'a [usize], k_positions: &'a [usize]) -> Self {
        if causal {
            BlockMask::Causal {
                q_positions,
                k_positions,
            }
        } else {
            BlockMask::Full
        }
    }

    #[inline]
    fn visible(&self, i: usize, j: usize) -> bool {
        match *self {
            BlockMask::Full => true,
            BlockMask::Causal {
                q_positions,
                k_positions,
            } => visible(true, q_positions[i], k_positions[j]),
        }
    }

    fn check(&self, lq: usize, lk: usize) -> Result<(), NumericsError> {
        if let BlockMask::Causal {
            q_positions,
            k_positions,
        } = self
        {
            if q_positions.len() != lq || k_positions.len() != lk {
                return Err(NumericsError::Shape(format!(
                    "mask positions {}x{} for a {lq}x{lk} block",
                    q_positions.len(),
                    k_positions.len()
                )));
            }
        }
        Ok(())
    }
}

/// Running state of online softmax over a fixed query block.
///
/// `m` and `l` hold one entry per `(batch, query, head)` row; `acc` holds the
/// unnormalized output with the same layout as `O`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState<T> {
    dims: Dims4,
    m: Vec<T>,
    l: Vec<T>,
    acc: Vec<T>,
}

/// Normalized output plus per-row `m + ln(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Finalized<T> {
    pub output: Tensor4<T>,
    /// Layout `(bs, L, hc)`.
    pub logsumexp: Vec<T>,
}

impl<T: Scalar> SoftmaxState<T> {
    /// Empty state for queries of shape `q_dims` and values of width `v_head_size`.
    pub fn new(q_dims: Dims4) -> Result<Self, NumericsError> {
        let out = Tensor4::<T>::zeros(q_dims)?;
        let rows = q_dims.rows();
        Ok(Self {
            dims: q_dims,
            m: vec![T::neg_infinity(); rows],
            l: vec![T::zero(); rows],
            acc: out.into_data(),
        })
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn running_max(&self) -> &[T] {
        &self.m
    }

    pub fn normalizer(&self) -> &[T] {
        &self.l
    }

    /// Folds one key/value block into the state.
    ///
    /// Rows whose keys are all masked in this block are left untouched.
    pub fn update(
        &mut self,
        q: &Tensor4<T>,
        k: &Tensor4<T>,
        v: &Tensor4<T>,
        mask: BlockMask<'_>,
    ) -> Result<(), NumericsError> {
        let group = check_qkv(q, k, v)?;
        if q.dims() != self.dims {
            return Err(NumericsError::Shape(format!(
                "query block {} for state {}",
                q.dims(),
                self.dims
            )));
        }
        let d = self.dims;
        let lk = k.dims().seq;
        mask.check(d.seq, lk)?;
        let scale = softmax_scale::<T>(d.head_size);
        let hs = d.head_size;
        let mut scores: Vec<(usize, T)> = Vec::with_capacity(lk);
        for b in 0..d.bs {
            for i in 0..d.seq {
                for h in 0..d.heads {
                    let kvh = h / group;
                    let qrow = q.row(b, i, h);
                    scores.clear();
                    let mut block_max = T::neg_infinity();
                    for j in 0..lk {
                        if mask.visible(i, j) {
                            let s = dot(qrow, k.row(b, j, kvh)) * scale;
                            block_max = block_max.max(s);
                            scores.push((j, s));
                        }
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    let row = (b * d.seq + i) * d.heads + h;
                    let m_new = self.m[row].max(block_max);
                    let alpha = (self.m[row] - m_new).exp();
                    let acc = &mut self.acc[row * hs..(row + 1) * hs];
                    let mut l = self.l[row] * alpha;
                    for a in acc.iter_mut() {
                        *a = *a * alpha;
                    }
                    for &(j, s) in &scores {
                        let p = (s - m_new).exp();
                        l = l + p;
                        for (a, &vx) in acc.iter_mut().zip(v.row(b, j, kvh)) {
                            *a = *a + p * vx;
                        }
                    }
                    self.l[row] = l;
                    self.m[row] = m_new;
                }
            }
        }
        Ok(())
    }

    /// Divides the accumulator by the normalizer.
    pub fn finalize(&self) -> Result<Finalized<T>, NumericsError> {
        let d = self.dims;
        let hs = d.head_size;
        let mut out = self.acc.clone();
        let mut lse = Vec::with_capacity(self.l.len());
        for (row, (&l, &m)) in self.l.iter().zip(&self.m).enumerate() {
            if l == T::zero() {
                let h = row % d.heads;
                let i = (row / d.heads) % d.seq;
                let b = row / (d.heads * d.seq);
                return Err(NumericsError::RowSawNoKeys { b, i, h });
            }
            for o in &mut out[row * hs..(row + 1) * hs] {
                *o = *o / l;
            }
            lse.push(m + l.ln());
        }
        Ok(Finalized {
            output: Tensor4::new(d, out)?,
            logsumexp: lse,
        })
    }
}

/// `Σ_x dO·O` per `(batch, query, head)` row.
pub fn row_delta<T: Scalar>(d_o: &Tensor4<T>, o: &Tensor4<T>) -> Result<Vec<T>, NumericsError> {
    if d_o.dims() != o.dims() {
        return Err(NumericsError::Shape(format!(
            "dO is {} but O is {}",
            d_o.dims(),
            o.dims()
        )));
    }
    Ok(d_o
        .data()
        .chunks(o.dims().head_size)
        .zip(o.data().chunks(o.dims().head_size))
        .map(|(a, b)| dot(a, b))
        .collect())
}

/// Gradient buffers for one key/value block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvGrads<T> {
    pub dk: Tensor4<T>,
    pub dv: Tensor4<T>,
}

impl<T: Scalar> KvGrads<T> {
    pub fn zeros(kv_dims: Dims4) -> Result<Self, NumericsError> {
        Ok(Self {
            dk: Tensor4::zeros(kv_dims)?,
            dv: Tensor4::zeros(kv_dims)?,
        })
    }
}

/// Backward through one key/value block, recomputing probabilities from the
/// forward log-sum-exp. Accumulates into `dq` and `kv_grads`.
#[allow(clippy::too_many_arguments)]
pub fn blockwise_backward<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    d_o: &Tensor4<T>,
    logsumexp: &[T],
    delta: &[T],
    mask: BlockMask<'_>,
    dq: &mut Tensor4<T>,
    kv_grads: &mut KvGrads<T>,
) -> Result<(), NumericsError> {
    let group = check_qkv(q, k, v)?;
    let d = q.dims();
    if d_o.dims() != d || dq.dims() != d {
        return Err(NumericsError::Shape(format!(
            "dO {} / dQ {} for queries {d}",
            d_o.dims(),
            dq.dims()
        )));
    }
    if logsumexp.len() != d.rows() || delta.len() != d.rows() {
        return Err(NumericsError::Shape(format!(
            "{} logsumexp and {} delta rows for {} query rows",
            logsumexp.len(),
            delta.len(),
            d.rows()
        )));
    }
    if kv_grads.dk.dims() != k.dims() || kv_grads.dv.dims() != v.dims() {
        return Err(NumericsError::Shape("kv gradient buffers do not match K/V".into()));
    }
    let lk = k.dims().seq;
    mask.check(d.seq, lk)?;
    let scale = softmax_scale::<T>(d.head_size);
    for b in 0..d.bs {
        for i in 0..d.seq {
            for h in 0..d.heads {
                let row = (b * d.seq + i) * d.heads + h;
                let kvh = h / group;
                let qrow = q.row(b, i, h);
                let go = d_o.row(b, i, h);
                for j in 0..lk {
                    if !mask.visible(i, j) {
                        continue;
                    }
                    let p = (dot(qrow, k.row(b, j, kvh)) * scale - logsumexp[row]).exp();
                    let dp = dot(go, v.row(b, j, kvh));
                    let ds = p * (dp - delta[row]) * scale;
                    for (g, &kx) in dq.row_mut(b, i, h).iter_mut().zip(k.row(b, j, kvh)) {
                        *g = *g + ds * kx;
                    }
                    for (g, &qx) in kv_grads.dk.row_mut(b, j, kvh).iter_mut().zip(qrow) {
                        *g = *g + ds * qx;
                    }
                    for (g, &ox) in kv_grads.dv.row_mut(b, j, kvh).iter_mut().zip(go) {
                        *g = *g + p * ox;
                    }
                }
            }
        }
    }
    Ok(())
}
