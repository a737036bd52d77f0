use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collective {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
    RingShift,
}

impl Collective {
    pub const ALL: [Collective; 5] = [
        Collective::AllReduce,
        Collective::AllGather,
        Collective::ReduceScatter,
        Collective::AllToAll,
        Collective::RingShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Collective::AllReduce => "all_reduce",
            Collective::AllGather => "all_gather",
            Collective::ReduceScatter => "reduce_scatter",
            Collective::AllToAll => "all_to_all",
            Collective::RingShift => "ring_shift",
        }
    }

    /// Bytes one rank sends for a payload of `payload_bytes` in a group of `n`.
    ///
    /// `payload_bytes` is the full tensor for all_reduce and reduce_scatter,
    /// the gathered result for all_gather, the total send buffer for
    /// all_to_all and the buffer for ring_shift.
    pub fn bytes_sent(self, payload_bytes: f64, n: usize) -> f64 {
        if n <= 1 {
            return 0.0;
        }
        let nf = n as f64;
        match self {
            Collective::AllReduce => payload_bytes * 2.0 * (nf - 1.0) / nf,
            Collective::AllGather | Collective::ReduceScatter | Collective::AllToAll => {
                payload_bytes * (nf - 1.0) / nf
            }
            Collective::RingShift => payload_bytes,
        }
    }
}

impl fmt::Display for Collective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepts the snake_case names plus the compact spellings
/// `allreduce`, `allgather`, `reducescatter`, `all2all`, `p2p`.
impl std::str::FromStr for Collective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-'))
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "allreduce" => Ok(Collective::AllReduce),
            "allgather" => Ok(Collective::AllGather),
            "reducescatter" => Ok(Collective::ReduceScatter),
            "alltoall" | "all2all" => Ok(Collective::AllToAll),
            "ringshift" | "p2p" => Ok(Collective::RingShift),
            _ => Err(format!("unknown collective {s:?}")),
        }
    }
}

/// One rank's share of one collective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Position of the call in the rank's own program order.
    pub step: u64,
    pub collective: Collective,
    pub group: String,
    /// Sequence number of the collective within its group.
    pub group_seq: u64,
    pub rank: usize,
    pub bytes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Record of bytes sent per rank per collective, ordered by `(step, rank)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub(crate) fn from_entries(mut entries: Vec<LedgerEntry>) -> Self {
        entries.sort_by(|a, b| {
            (a.step, a.rank, &a.group, a.group_seq).cmp(&(b.step, b.rank, &b.group, b.group_seq))
        });
        Self { entries }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct collective calls of `kind` (one per group invocation).
    pub fn events(&self, kind: Collective) -> usize {
        self.entries
            .iter()
            .filter(|e| e.collective == kind)
            .map(|e| (&e.group, e.group_seq))
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Number of calls of `kind` made by `rank`.
    pub fn calls_on_rank(&self, kind: Collective, rank: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.collective == kind && e.rank == rank)
            .count()
    }

    pub fn total_bytes(&self) -> f64 {
        self.entries.iter().fold(0.0, |acc, e| acc + e.bytes)
    }

    pub fn bytes_of(&self, kind: Collective) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.collective == kind)
            .fold(0.0, |acc, e| acc + e.bytes)
    }

    pub fn bytes_labeled(&self, label: &str) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.label.as_deref() == Some(label))
            .fold(0.0, |acc, e| acc + e.bytes)
    }

    pub fn calls_labeled(&self, label: &str, rank: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.rank == rank && e.label.as_deref() == Some(label))
            .count()
    }

    /// CSV with header `step,collective,group,rank,bytes`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,collective,group,rank,bytes")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.step, e.collective, e.group, e.rank, e.bytes
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ascii")
    }
}
