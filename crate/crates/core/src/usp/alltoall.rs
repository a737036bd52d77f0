use serde::{Deserialize, Serialize};

use super::{ShardPlan, UspError};
use crate::numerics::{Scalar, Tensor4};
use crate::simcomm::Rank;

/// Which axis a shard is split along across its Ulysses row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `(bs, L/(U·R), hc, hs)`: every head, a slice of the tokens.
    SequenceSharded,
    /// `(bs, L/R, hc/U, hs)`: the ring rank's tokens, a slice of the heads.
    HeadSharded,
}

/// A rank's piece of a `Q`, `K`, `V` or `O` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard<T> {
    pub tensor: Tensor4<T>,
    /// Original sequence index of each held token, in storage order.
    pub positions: Vec<usize>,
    pub layout: Layout,
}

impl<T: Scalar> Shard<T> {
    pub fn new(tensor: Tensor4<T>, positions: Vec<usize>, layout: Layout) -> Result<Self, UspError> {
        if tensor.dims().seq != positions.len() {
            return Err(UspError::Shape(format!(
                "{} positions for {} tokens",
                positions.len(),
                tensor.dims().seq
            )));
        }
        Ok(Self {
            tensor,
            positions,
            layout,
        })
    }
}

/// Direction of an `AllToAll4D` redistribution inside a Ulysses group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redistribution {
    /// Scatter heads, gather tokens: sequence-sharded to head-sharded.
    ScatterHeads,
    /// Scatter tokens, gather heads: head-sharded back to sequence-sharded.
    ScatterSequence,
}

impl Redistribution {
    /// From `(scatter, gather)` axis indices of a `(bs, L, hc, hs)` tensor.
    pub fn from_axes(scatter_idx: usize, gather_idx: usize) -> Result<Self, UspError> {
        match (scatter_idx, gather_idx) {
            (2, 1) => Ok(Redistribution::ScatterHeads),
            (1, 2) => Ok(Redistribution::ScatterSequence),
            _ => Err(UspError::Shape(format!(
                "unsupported scatter/gather axes ({scatter_idx}, {gather_idx})"
            ))),
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            Redistribution::ScatterHeads => Redistribution::ScatterSequence,
            Redistribution::ScatterSequence => Redistribution::ScatterHeads,
        }
    }
}

/// `AllToAll4D` over the calling rank's Ulysses row.
///
/// `ScatterHeads`: rank `u` keeps global heads `[u·h/U, (u+1)·h/U)` and the
/// received token runs are concatenated in source-rank order.
/// `ScatterSequence` is the exact inverse.
pub fn all_to_all_4d<T: Scalar>(
    rank: &mut Rank<'_>,
    shard: &Shard<T>,
    direction: Redistribution,
    plan: &ShardPlan,
) -> Result<Shard<T>, UspError> {
    let mesh = plan.mesh();
    let ulysses = mesh.ulysses_degree();
    let (u, r) = mesh.coords(rank.rank());
    let group = mesh.ulysses_group(r);
    let dims = shard.tensor.dims();
    match direction {
        Redistribution::ScatterHeads => {
            expect_layout(shard, Layout::SequenceSharded)?;
            if shard.positions != plan.seq_positions(u, r) {
                return Err(UspError::Shape(format!(
                    "rank {} holds positions that do not match its sequence shard",
                    rank.rank()
                )));
            }
            if dims.heads % ulysses != 0 {
                return Err(UspError::HeadDivisibility {
                    heads: dims.heads,
                    ulysses,
                });
            }
            let per = dims.heads / ulysses;
            let parts = (0..ulysses)
                .map(|j| Ok(shard.tensor.slice_heads(j * per, per)?.into_data()))
                .collect::<Result<Vec<_>, UspError>>()?;
            let recv = rank.all_to_all(&group, parts)?;
            let piece = dims.with_heads(per);
            let pieces = recv
                .into_iter()
                .map(|data| Tensor4::new(piece, data))
                .collect::<Result<Vec<_>, _>>()?;
            let tensor = Tensor4::concat_seq(&pieces)?;
            Shard::new(
                tensor,
                plan.ring_positions(r).to_vec(),
                Layout::HeadSharded,
            )
        }
        Redistribution::ScatterSequence => {
            expect_layout(shard, Layout::HeadSharded)?;
            if shard.positions != plan.ring_positions(r) {
                return Err(UspError::Shape(format!(
                    "rank {} holds positions that do not match its ring shard",
                    rank.rank()
                )));
            }
            let tokens = plan.tokens_per_rank();
            let parts = (0..ulysses)
                .map(|j| Ok(shard.tensor.slice_seq(j * tokens, tokens)?.into_data()))
                .collect::<Result<Vec<_>, UspError>>()?;
            let recv = rank.all_to_all(&group, parts)?;
            let piece = dims.with_seq(tokens);
            let pieces = recv
                .into_iter()
                .map(|data| Tensor4::new(piece, data))
                .collect::<Result<Vec<_>, _>>()?;
            let tensor = Tensor4::concat_heads(&pieces)?;
            Shard::new(
                tensor,
                plan.seq_positions(u, r).to_vec(),
                Layout::SequenceSharded,
            )
        }
    }
}

fn expect_layout<T>(shard: &Shard<T>, expected: Layout) -> Result<(), UspError> {
    if shard.layout != expected {
        return Err(UspError::LayoutMismatch {
            expected,
            got: shard.layout,
        });
    }
    Ok(())
}
