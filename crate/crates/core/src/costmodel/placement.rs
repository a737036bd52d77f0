use std::fmt;

use serde::{Deserialize, Serialize};

use super::Strategy;

/// Parallel dimensions, innermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    Tp,
    Ulysses,
    Ring,
    Dp,
    Pp,
}

impl Dim {
    pub const ORDER: [Dim; 5] = [Dim::Tp, Dim::Ulysses, Dim::Ring, Dim::Dp, Dim::Pp];

    pub fn name(self) -> &'static str {
        match self {
            Dim::Tp => "tp",
            Dim::Ulysses => "ulysses",
            Dim::Ring => "ring",
            Dim::Dp => "dp",
            Dim::Pp => "pp",
        }
    }
}

/// Coordinates of one rank in the hybrid layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coords {
    pub tp: u64,
    pub ulysses: u64,
    pub ring: u64,
    pub dp: u64,
    pub pp: u64,
}

impl Coords {
    fn get(&self, d: Dim) -> u64 {
        match d {
            Dim::Tp => self.tp,
            Dim::Ulysses => self.ulysses,
            Dim::Ring => self.ring,
            Dim::Dp => self.dp,
            Dim::Pp => self.pp,
        }
    }

    fn set(&mut self, d: Dim, v: u64) {
        match d {
            Dim::Tp => self.tp = v,
            Dim::Ulysses => self.ulysses = v,
            Dim::Ring => self.ring = v,
            Dim::Dp => self.dp = v,
            Dim::Pp => self.pp = v,
        }
    }
}

/// Mixed-radix rank layout with TP innermost, then Ulysses, Ring, DP, PP:
/// `rank = (((pp·DP + dp)·R + r)·U + u)·TP + tp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankLayout {
    strategy: Strategy,
}

impl RankLayout {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy }
    }

    pub fn degree(&self, d: Dim) -> u64 {
        let s = &self.strategy;
        match d {
            Dim::Tp => s.tp,
            Dim::Ulysses => s.ulysses,
            Dim::Ring => s.ring,
            Dim::Dp => s.dp,
            Dim::Pp => s.pp,
        }
    }

    pub fn world_size(&self) -> u64 {
        self.strategy.devices()
    }

    pub fn coords(&self, rank: u64) -> Coords {
        let mut rest = rank;
        let mut c = Coords {
            tp: 0,
            ulysses: 0,
            ring: 0,
            dp: 0,
            pp: 0,
        };
        for d in Dim::ORDER {
            let n = self.degree(d);
            c.set(d, rest % n);
            rest /= n;
        }
        c
    }

    pub fn rank(&self, coords: Coords) -> u64 {
        Dim::ORDER
            .iter()
            .rev()
            .fold(0, |acc, &d| acc * self.degree(d) + coords.get(d))
    }

    /// Ranks sharing every coordinate of `rank` outside `dims`.
    pub fn group_of(&self, rank: u64, dims: &[Dim]) -> Vec<u64> {
        let base = self.coords(rank);
        let mut members = vec![base];
        for &d in dims {
            members = members
                .into_iter()
                .flat_map(|c| {
                    (0..self.degree(d)).map(move |v| {
                        let mut c = c;
                        c.set(d, v);
                        c
                    })
                })
                .collect();
        }
        let mut ranks: Vec<u64> = members.into_iter().map(|c| self.rank(c)).collect();
        ranks.sort_unstable();
        ranks
    }

    /// Whether any group over `dims` contains ranks on different nodes.
    pub fn spans_nodes(&self, dims: &[Dim], devices_per_node: u64) -> bool {
        (0..self.world_size()).any(|rank| {
            let g = self.group_of(rank, dims);
            g.iter().any(|&m| m / devices_per_node != g[0] / devices_per_node)
        })
    }
}

impl fmt::Display for RankLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Dim::ORDER
            .iter()
            .map(|&d| format!("{}({})", d.name(), self.degree(d)))
            .collect();
        f.write_str(&parts.join(" < "))
    }
}
