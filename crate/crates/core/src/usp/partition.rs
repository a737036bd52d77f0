use serde::{Deserialize, Serialize};

use super::UspError;
use crate::simcomm::ProcessMesh;

/// Splits `0..seq_len` into `2·ring` equal chunks and gives ring rank `ρ`
/// chunks `ρ` and `2·ring − 1 − ρ`, which equalizes causal work.
pub fn zigzag_partition(seq_len: usize, ring: usize) -> Result<Vec<Vec<usize>>, UspError> {
    if ring == 0 || seq_len % (2 * ring) != 0 || seq_len == 0 {
        return Err(UspError::Divisibility(format!(
            "zigzag needs the sequence length {seq_len} to split into 2 x {ring} equal chunks"
        )));
    }
    let chunk = seq_len / (2 * ring);
    Ok((0..ring)
        .map(|rho| {
            let mirror = 2 * ring - 1 - rho;
            (rho * chunk..(rho + 1) * chunk)
                .chain(mirror * chunk..(mirror + 1) * chunk)
                .collect()
        })
        .collect())
}

/// Contiguous split of `0..seq_len` into `ring` equal blocks.
pub fn even_partition(seq_len: usize, ring: usize) -> Result<Vec<Vec<usize>>, UspError> {
    if ring == 0 || seq_len % ring != 0 || seq_len == 0 {
        return Err(UspError::Divisibility(format!(
            "sequence length {seq_len} does not split into {ring} equal blocks"
        )));
    }
    let block = seq_len / ring;
    Ok((0..ring)
        .map(|r| (r * block..(r + 1) * block).collect())
        .collect())
}

/// Causal `(query, key)` pairs with `key <= query` owned by each rank.
///
/// Each assignment lists the query positions a rank holds; keys range over
/// the whole sequence `0..seq_len`.
pub fn causal_workload(assignment: &[Vec<usize>], seq_len: usize) -> Vec<u64> {
    assignment
        .iter()
        .map(|queries| {
            queries
                .iter()
                .map(|&q| (q + 1).min(seq_len) as u64)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Contiguous,
    Zigzag,
}

/// Token placement for one unified-SP attention call.
///
/// Ring rank `r` owns the tokens of the ring-level partition; its Ulysses row
/// splits them into `U` consecutive runs, one per Ulysses rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    seq_len: usize,
    mesh: ProcessMesh,
    scheme: PartitionScheme,
    ring_positions: Vec<Vec<usize>>,
}

impl ShardPlan {
    pub fn new(seq_len: usize, mesh: ProcessMesh, scheme: PartitionScheme) -> Result<Self, UspError> {
        let ring = mesh.ring_degree();
        let ulysses = mesh.ulysses_degree();
        let ring_positions = match scheme {
            PartitionScheme::Zigzag => zigzag_partition(seq_len, ring)?,
            PartitionScheme::Contiguous => even_partition(seq_len, ring)?,
        };
        if (seq_len / ring) % ulysses != 0 {
            return Err(UspError::Divisibility(format!(
                "{} tokens per ring rank do not split over ulysses degree {ulysses}",
                seq_len / ring
            )));
        }
        Ok(Self {
            seq_len,
            mesh,
            scheme,
            ring_positions,
        })
    }

    /// Zigzag for causal attention, contiguous otherwise.
    pub fn for_mask(seq_len: usize, mesh: ProcessMesh, causal: bool) -> Result<Self, UspError> {
        let scheme = if causal {
            PartitionScheme::Zigzag
        } else {
            PartitionScheme::Contiguous
        };
        Self::new(seq_len, mesh, scheme)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn mesh(&self) -> ProcessMesh {
        self.mesh
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    /// `L / (U·R)`.
    pub fn tokens_per_rank(&self) -> usize {
        self.seq_len / self.mesh.world_size()
    }

    /// Positions held by ring rank `r` in the head-sharded layout.
    pub fn ring_positions(&self, ring_rank: usize) -> &[usize] {
        &self.ring_positions[ring_rank]
    }

    /// Positions held by mesh coordinate `(u, r)` in the sequence-sharded layout.
    pub fn seq_positions(&self, ulysses_rank: usize, ring_rank: usize) -> &[usize] {
        let c = self.tokens_per_rank();
        &self.ring_positions[ring_rank][ulysses_rank * c..(ulysses_rank + 1) * c]
    }

    pub fn rank_positions(&self, rank: usize) -> &[usize] {
        let (u, r) = self.mesh.coords(rank);
        self.seq_positions(u, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent count by enumerating every (q, k) pair.
    fn brute_pairs(assignment: &[Vec<usize>], seq_len: usize) -> Vec<u64> {
        assignment
            .iter()
            .map(|qs| {
                let mut n = 0;
                for &q in qs {
                    for k in 0..seq_len {
                        if k <= q {
                            n += 1;
                        }
                    }
                }
                n
            })
            .collect()
    }

    #[test]
    fn zigzag_sixteen_over_four() {
        let z = zigzag_partition(16, 4).unwrap();
        assert_eq!(z[0], vec![0, 1, 14, 15]);
        assert_eq!(z[3], vec![6, 7, 8, 9]);
        assert_eq!(zigzag_partition(6, 1).unwrap(), vec![(0..6).collect::<Vec<_>>()]);
        assert!(zigzag_partition(12, 4).is_err());
    }

    #[test]
    fn workloads_match_enumeration() {
        let even = even_partition(16, 4).unwrap();
        let zz = zigzag_partition(16, 4).unwrap();
        assert_eq!(brute_pairs(&even, 16), vec![10, 26, 42, 58]);
        assert_eq!(causal_workload(&even, 16), vec![10, 26, 42, 58]);
        assert_eq!(brute_pairs(&zz, 16), vec![34; 4]);
        assert_eq!(causal_workload(&zz, 16), vec![34; 4]);
        assert_eq!(causal_workload(&[(0..9).collect()], 9), vec![45]);
    }

    #[test]
    fn plan_splits_ring_blocks_over_ulysses_rows() {
        let mesh = ProcessMesh::new(2, 2).unwrap();
        let plan = ShardPlan::for_mask(8, mesh, true).unwrap();
        assert_eq!(plan.ring_positions(0), &[0, 1, 6, 7]);
        assert_eq!(plan.seq_positions(0, 0), &[0, 1]);
        assert_eq!(plan.seq_positions(1, 0), &[6, 7]);
        assert_eq!(plan.rank_positions(3), &[4, 5]);
        assert!(ShardPlan::for_mask(12, ProcessMesh::new(4, 2).unwrap(), true).is_err());
    }

    #[test]
    fn plan_positions_cover_sequence_once() {
        for (u, r) in [(1, 8), (2, 4), (4, 2), (8, 1)] {
            let mesh = ProcessMesh::new(u, r).unwrap();
            for causal in [false, true] {
                let plan = ShardPlan::for_mask(64, mesh, causal).unwrap();
                let mut all: Vec<usize> =
                    (0..8).flat_map(|k| plan.rank_positions(k).to_vec()).collect();
                all.sort_unstable();
                assert_eq!(all, (0..64).collect::<Vec<_>>());
            }
        }
    }
}
