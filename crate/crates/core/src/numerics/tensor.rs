use std::fmt::{self, Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Floating point precision of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp64 => 8,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" => Ok(Precision::Fp32),
            "fp64" | "f64" => Ok(Precision::Fp64),
            _ => Err(format!("unknown precision {s:?}, expected fp32 or fp64")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        })
    }
}

/// Element type usable in tensors and collectives.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every float type")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Fp32;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Fp64;
}

/// Extents of a `(batch, sequence, heads, head_size)` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims4 {
    pub bs: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_size: usize,
}

impl Dims4 {
    pub const fn new(bs: usize, seq: usize, heads: usize, head_size: usize) -> Self {
        Self {
            bs,
            seq,
            heads,
            head_size,
        }
    }

    pub fn numel(&self) -> usize {
        self.bs * self.seq * self.heads * self.head_size
    }

    /// Number of `(batch, token, head)` rows.
    pub fn rows(&self) -> usize {
        self.bs * self.seq * self.heads
    }

    pub fn with_seq(self, seq: usize) -> Self {
        Self { seq, ..self }
    }

    pub fn with_heads(self, heads: usize) -> Self {
        Self { heads, ..self }
    }

    pub fn with_head_size(self, head_size: usize) -> Self {
        Self { head_size, ..self }
    }

    fn validate(&self) -> Result<(), NumericsError> {
        if self.bs == 0 || self.seq == 0 || self.heads == 0 || self.head_size == 0 {
            return Err(NumericsError::EmptyExtent(*self));
        }
        Ok(())
    }
}

impl Display for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.bs, self.seq, self.heads, self.head_size
        )
    }
}

/// Dense row-major `(bs, L, hc, hs)` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims4,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: Dims4, data: Vec<T>) -> Result<Self, NumericsError> {
        dims.validate()?;
        if data.len() != dims.numel() {
            return Err(NumericsError::DataLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims4) -> Result<Self, NumericsError> {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![T::zero(); dims.numel()],
        })
    }

    pub fn from_fn(
        dims: Dims4,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Result<Self, NumericsError> {
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.numel());
        for b in 0..dims.bs {
            for i in 0..dims.seq {
                for h in 0..dims.heads {
                    for x in 0..dims.head_size {
                        data.push(f(b, i, h, x));
                    }
                }
            }
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, i: usize, h: usize) -> usize {
        ((b * self.dims.seq + i) * self.dims.heads + h) * self.dims.head_size
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, h: usize, x: usize) -> T {
        self.data[self.offset(b, i, h) + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, i: usize, h: usize, x: usize, value: T) {
        let o = self.offset(b, i, h);
        self.data[o + x] = value;
    }

    /// The `head_size` vector at `(b, i, h)`.
    #[inline]
    pub fn row(&self, b: usize, i: usize, h: usize) -> &[T] {
        let o = self.offset(b, i, h);
        &self.data[o..o + self.dims.head_size]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, i: usize, h: usize) -> &mut [T] {
        let o = self.offset(b, i, h);
        let hs = self.dims.head_size;
        &mut self.data[o..o + hs]
    }

    /// Copy of heads `[start, start + count)`.
    pub fn slice_heads(&self, start: usize, count: usize) -> Result<Self, NumericsError> {
        if start + count > self.dims.heads {
            return Err(NumericsError::Shape(format!(
                "head range {start}..{} out of {} heads",
                start + count,
                self.dims.heads
            )));
        }
        Self::from_fn(self.dims.with_heads(count), |b, i, h, x| {
            self.get(b, i, start + h, x)
        })
    }

    /// Copy of tokens `[start, start + count)`.
    pub fn slice_seq(&self, start: usize, count: usize) -> Result<Self, NumericsError> {
        if start + count > self.dims.seq {
            return Err(NumericsError::Shape(format!(
                "token range {start}..{} out of {} tokens",
                start + count,
                self.dims.seq
            )));
        }
        Self::from_fn(self.dims.with_seq(count), |b, i, h, x| {
            self.get(b, start + i, h, x)
        })
    }

    /// Gathers the listed token indices in order.
    pub fn select_tokens(&self, tokens: &[usize]) -> Result<Self, NumericsError> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.seq) {
            return Err(NumericsError::Shape(format!(
                "token {bad} out of {} tokens",
                self.dims.seq
            )));
        }
        Self::from_fn(self.dims.with_seq(tokens.len()), |b, i, h, x| {
            self.get(b, tokens[i], h, x)
        })
    }

    /// Concatenates along the sequence axis; all other extents must agree.
    pub fn concat_seq(parts: &[Self]) -> Result<Self, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?
            .dims;
        let mut seq = 0;
        for p in parts {
            if p.dims.with_seq(first.seq) != first {
                return Err(NumericsError::Shape(format!(
                    "sequence concat of {} with {}",
                    first, p.dims
                )));
            }
            seq += p.dims.seq;
        }
        let dims = first.with_seq(seq);
        let mut data = Vec::with_capacity(dims.numel());
        for b in 0..dims.bs {
            for p in parts {
                let per_batch = p.dims.seq * p.dims.heads * p.dims.head_size;
                data.extend_from_slice(&p.data[b * per_batch..(b + 1) * per_batch]);
            }
        }
        Self::new(dims, data)
    }

    /// Concatenates along the head axis; all other extents must agree.
    pub fn concat_heads(parts: &[Self]) -> Result<Self, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?
            .dims;
        let mut heads = 0;
        for p in parts {
            if p.dims.with_heads(first.heads) != first {
                return Err(NumericsError::Shape(format!(
                    "head concat of {} with {}",
                    first, p.dims
                )));
            }
            heads += p.dims.heads;
        }
        let dims = first.with_heads(heads);
        let mut data = Vec::with_capacity(dims.numel());
        for b in 0..dims.bs {
            for i in 0..dims.seq {
                for p in parts {
                    let o = p.offset(b, i, 0);
                    data.extend_from_slice(&p.data[o..o + p.dims.heads * p.dims.head_size]);
                }
            }
        }
        Self::new(dims, data)
    }

    /// Repeats every head `factor` times in place (explicit GQA expansion).
    pub fn repeat_heads(&self, factor: usize) -> Result<Self, NumericsError> {
        if factor == 0 {
            return Err(NumericsError::Shape("head repeat factor 0".into()));
        }
        Self::from_fn(
            self.dims.with_heads(self.dims.heads * factor),
            |b, i, h, x| self.get(b, i, h / factor, x),
        )
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor4<f64> {
        self.map(|x| x.to_f64().unwrap_or(f64::NAN))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T, NumericsError> {
        if self.dims != other.dims {
            return Err(NumericsError::Shape(format!(
                "compare {} with {}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|x| x.abs()).fold(T::zero(), T::max)
    }
}
