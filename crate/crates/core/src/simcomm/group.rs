use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::CommError;

/// Ordered set of ranks that take part in a collective together.
///
/// Groups are identified by name; every member must construct the group with
/// the same name and member order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessGroup {
    name: String,
    members: Vec<usize>,
}

impl ProcessGroup {
    pub fn new(name: impl Into<String>, members: Vec<usize>) -> Result<Self, CommError> {
        let name = name.into();
        if members.is_empty() {
            return Err(CommError::InvalidGroup {
                group: name,
                reason: "no members".into(),
            });
        }
        let distinct: BTreeSet<_> = members.iter().collect();
        if distinct.len() != members.len() {
            return Err(CommError::InvalidGroup {
                group: name,
                reason: format!("duplicate members in {members:?}"),
            });
        }
        Ok(Self { name, members })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Index of `rank` inside the group.
    pub fn position(&self, rank: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == rank)
    }
}

impl fmt::Display for ProcessGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.name, self.members)
    }
}

/// Ulysses × Ring view of a sequence-parallel group.
///
/// Rank `r·U + u` sits at row `r`, column `u`. Each row is one Ulysses
/// group and each column is one Ring group, so Ulysses peers are adjacent
/// ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessMesh {
    ulysses: usize,
    ring: usize,
}

impl ProcessMesh {
    pub fn new(ulysses: usize, ring: usize) -> Result<Self, CommError> {
        if ulysses == 0 || ring == 0 {
            return Err(CommError::InvalidMesh(format!(
                "degrees must be positive, got ulysses={ulysses} ring={ring}"
            )));
        }
        Ok(Self { ulysses, ring })
    }

    /// Checks that the mesh covers exactly `world_size` ranks.
    pub fn for_world(ulysses: usize, ring: usize, world_size: usize) -> Result<Self, CommError> {
        let mesh = Self::new(ulysses, ring)?;
        if mesh.world_size() != world_size {
            return Err(CommError::InvalidMesh(format!(
                "ulysses {ulysses} x ring {ring} != world size {world_size}"
            )));
        }
        Ok(mesh)
    }

    pub fn ulysses_degree(&self) -> usize {
        self.ulysses
    }

    pub fn ring_degree(&self) -> usize {
        self.ring
    }

    pub fn world_size(&self) -> usize {
        self.ulysses * self.ring
    }

    /// `(ulysses_rank, ring_rank)` of a world rank.
    pub fn coords(&self, rank: usize) -> (usize, usize) {
        (rank % self.ulysses, rank / self.ulysses)
    }

    pub fn rank_of(&self, ulysses_rank: usize, ring_rank: usize) -> usize {
        ring_rank * self.ulysses + ulysses_rank
    }

    /// Row `ring_rank` of the mesh.
    pub fn ulysses_group(&self, ring_rank: usize) -> ProcessGroup {
        ProcessGroup {
            name: format!("ulysses/r{ring_rank}"),
            members: (0..self.ulysses)
                .map(|u| self.rank_of(u, ring_rank))
                .collect(),
        }
    }

    /// Column `ulysses_rank` of the mesh.
    pub fn ring_group(&self, ulysses_rank: usize) -> ProcessGroup {
        ProcessGroup {
            name: format!("ring/u{ulysses_rank}"),
            members: (0..self.ring).map(|r| self.rank_of(ulysses_rank, r)).collect(),
        }
    }

    pub fn ulysses_group_of(&self, rank: usize) -> ProcessGroup {
        self.ulysses_group(self.coords(rank).1)
    }

    pub fn ring_group_of(&self, rank: usize) -> ProcessGroup {
        self.ring_group(self.coords(rank).0)
    }
}
